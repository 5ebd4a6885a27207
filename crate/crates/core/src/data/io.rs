//! Volume files and the dataset manifest.
//!
//! Two on-disk volume formats are understood:
//!
//! * **Raw**: a headerless little-endian array (`float32` for images, `uint8`
//!   for labels) in x-fastest order, plus a JSON sidecar at `<path>.json`:
//!   `{"shape": [nx, ny, nz], "spacing": [sx, sy, sz]}`. The sidecar may also
//!   carry `"intensity": "hounsfield" | "normalized"` (default hounsfield).
//! * **NIfTI-1** single-file volumes (`.nii`, `.nii.gz`), either byte order.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use super::volume::{IntensityDomain, VolumeSample};
use crate::error::{Error, Result};
use crate::tensor::Dims3;

/// Sidecar header of a raw volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    #[serde(default, skip_serializing_if = "is_hounsfield")]
    pub intensity: IntensityDomain,
}

fn is_hounsfield(d: &IntensityDomain) -> bool {
    *d == IntensityDomain::Hounsfield
}

/// A single grid read from disk before pairing image with label.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub dims: Dims3,
    pub spacing: [f64; 3],
    pub values: Vec<f32>,
    pub intensity: IntensityDomain,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn is_nifti(path: &Path) -> bool {
    let name = path.to_string_lossy().to_ascii_lowercase();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_raw_header(path: &Path) -> Result<RawHeader> {
    let side = sidecar_path(path);
    let bytes = read_bytes(&side)?;
    let h: RawHeader = serde_json::from_slice(&bytes).map_err(|e| format_err(&side, e.to_string()))?;
    Ok(h)
}

/// Reads a volume grid; `label` selects the uint8 raw layout.
pub fn read_grid(path: &Path, label: bool) -> Result<Grid> {
    if is_nifti(path) {
        return read_nifti(path);
    }
    let header = read_raw_header(path)?;
    let dims = Dims3::from_slice(&header.shape)?;
    let bytes = read_bytes(path)?;
    let width = if label { 1 } else { 4 };
    if bytes.len() != dims.len() * width {
        return Err(format_err(
            path,
            format!(
                "{} bytes on disk, header shape {dims} needs {}",
                bytes.len(),
                dims.len() * width
            ),
        ));
    }
    let values = if label {
        bytes.iter().map(|&b| b as f32).collect()
    } else {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    };
    Ok(Grid {
        dims,
        spacing: header.spacing,
        values,
        intensity: header.intensity,
    })
}

pub fn write_raw_image(
    path: &Path,
    dims: Dims3,
    spacing: [f64; 3],
    image: &[f32],
    intensity: IntensityDomain,
) -> Result<()> {
    let bytes: Vec<u8> = image.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(path, &bytes)?;
    let header = RawHeader {
        shape: dims.as_array(),
        spacing,
        intensity,
    };
    write_bytes(&sidecar_path(path), &serde_json::to_vec_pretty(&header)?)
}

pub fn write_raw_label(path: &Path, dims: Dims3, spacing: [f64; 3], label: &[u8]) -> Result<()> {
    write_bytes(path, label)?;
    let header = RawHeader {
        shape: dims.as_array(),
        spacing,
        intensity: IntensityDomain::Hounsfield,
    };
    write_bytes(&sidecar_path(path), &serde_json::to_vec_pretty(&header)?)
}

/// Loads an image/label pair and checks that their grids agree.
pub fn load_volume(image_path: &Path, label_path: &Path, id: &str) -> Result<VolumeSample> {
    let image = read_grid(image_path, false)?;
    let label = read_grid(label_path, true)?;
    if image.dims != label.dims {
        return Err(Error::ShapeMismatch(format!(
            "image {} is {} but label {} is {}",
            image_path.display(),
            image.dims,
            label_path.display(),
            label.dims
        )));
    }
    let labels = label
        .values
        .iter()
        .map(|&v| {
            if v >= 0.0 && v <= u8::MAX as f32 && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(format_err(label_path, format!("label value {v} is not a class id")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    VolumeSample::new(id, image.dims, image.spacing, image.values, labels, image.intensity)
}

/// Writes a sample as a raw image/label pair.
pub fn save_volume(sample: &VolumeSample, image_path: &Path, label_path: &Path) -> Result<()> {
    write_raw_image(image_path, sample.dims, sample.spacing, &sample.image, sample.intensity)?;
    write_raw_label(label_path, sample.dims, sample.spacing, &sample.label)
}

// ---------------------------------------------------------------------------
// NIfTI-1
// ---------------------------------------------------------------------------

const NIFTI_HEADER_LEN: usize = 348;

struct Endian(bool);

impl Endian {
    fn i16(&self, b: &[u8], at: usize) -> i16 {
        let a = [b[at], b[at + 1]];
        if self.0 {
            i16::from_le_bytes(a)
        } else {
            i16::from_be_bytes(a)
        }
    }
    fn i32(&self, b: &[u8], at: usize) -> i32 {
        let a = [b[at], b[at + 1], b[at + 2], b[at + 3]];
        if self.0 {
            i32::from_le_bytes(a)
        } else {
            i32::from_be_bytes(a)
        }
    }
    fn f32(&self, b: &[u8], at: usize) -> f32 {
        f32::from_bits(self.i32(b, at) as u32)
    }
}

fn read_nifti(path: &Path) -> Result<Grid> {
    let raw = read_bytes(path)?;
    let bytes = if path.to_string_lossy().to_ascii_lowercase().ends_with(".gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| format_err(path, format!("gzip: {e}")))?;
        out
    } else {
        raw
    };
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(format_err(path, "file shorter than a NIfTI-1 header"));
    }
    let e = if i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) == 348 {
        Endian(true)
    } else if i32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) == 348 {
        Endian(false)
    } else {
        return Err(format_err(path, "sizeof_hdr is not 348"));
    };
    if &bytes[344..347] != b"n+1" {
        return Err(format_err(path, "only single-file NIfTI-1 (n+1) is supported"));
    }
    let ndim = e.i16(&bytes, 40);
    if !(3..=7).contains(&ndim) {
        return Err(format_err(path, format!("{ndim}-dimensional data is not a volume")));
    }
    let mut dim = [1usize; 7];
    for (k, d) in dim.iter_mut().enumerate().take(ndim as usize) {
        let v = e.i16(&bytes, 42 + 2 * k);
        if v < 1 {
            return Err(format_err(path, format!("dim[{}] = {v}", k + 1)));
        }
        *d = v as usize;
    }
    if dim[3..].iter().any(|&d| d != 1) {
        return Err(format_err(path, "volumes with more than three non-singleton axes"));
    }
    let dims = Dims3::new(dim[0], dim[1], dim[2]);
    let datatype = e.i16(&bytes, 70);
    let spacing = [
        e.f32(&bytes, 80) as f64,
        e.f32(&bytes, 84) as f64,
        e.f32(&bytes, 88) as f64,
    ];
    let vox_offset = e.f32(&bytes, 108).max(NIFTI_HEADER_LEN as f32) as usize;
    let slope = e.f32(&bytes, 112);
    let inter = e.f32(&bytes, 116);
    type Decode = fn(&Endian, &[u8]) -> f64;
    let (width, decode): (usize, Decode) = match datatype {
        2 => (1, |_, b| b[0] as f64),
        256 => (1, |_, b| b[0] as i8 as f64),
        4 => (2, |e, b| e.i16(b, 0) as f64),
        512 => (2, |e, b| e.i16(b, 0) as u16 as f64),
        8 => (4, |e, b| e.i32(b, 0) as f64),
        768 => (4, |e, b| e.i32(b, 0) as u32 as f64),
        16 => (4, |e, b| e.f32(b, 0) as f64),
        64 => (8, |e, b| {
            let a: [u8; 8] = b[..8].try_into().expect("8 bytes");
            if e.0 {
                f64::from_le_bytes(a)
            } else {
                f64::from_be_bytes(a)
            }
        }),
        other => return Err(format_err(path, format!("unsupported NIfTI datatype {other}"))),
    };
    let need = vox_offset + dims.len() * width;
    if bytes.len() < need {
        return Err(format_err(
            path,
            format!("truncated data: {} < {need} bytes", bytes.len()),
        ));
    }
    let scale = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);
    let values = bytes[vox_offset..need]
        .chunks_exact(width)
        .map(|c| {
            let v = decode(&e, c);
            if scale {
                (v * slope as f64 + inter as f64) as f32
            } else {
                v as f32
            }
        })
        .collect();
    Ok(Grid {
        dims,
        spacing,
        values,
        intensity: IntensityDomain::Hounsfield,
    })
}

/// Writes a little-endian NIfTI-1 file (float32 or uint8), gzip if the name ends in `.gz`.
pub fn write_nifti(path: &Path, dims: Dims3, spacing: [f64; 3], values: &[f32], as_u8: bool) -> Result<()> {
    let mut h = vec![0u8; 352];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dim: [i16; 8] = [3, dims.nx as i16, dims.ny as i16, dims.nz as i16, 1, 1, 1, 1];
    for (k, d) in dim.iter().enumerate() {
        h[40 + 2 * k..42 + 2 * k].copy_from_slice(&d.to_le_bytes());
    }
    let (datatype, bitpix): (i16, i16) = if as_u8 { (2, 8) } else { (16, 32) };
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    let pixdim = [
        1.0f32,
        spacing[0] as f32,
        spacing[1] as f32,
        spacing[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (k, p) in pixdim.iter().enumerate() {
        h[76 + 4 * k..80 + 4 * k].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&352f32.to_le_bytes());
    h[112..116].copy_from_slice(&1f32.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    if as_u8 {
        h.extend(values.iter().map(|&v| v as u8));
    } else {
        h.extend(values.iter().flat_map(|v| v.to_le_bytes()));
    }
    let out = if path.to_string_lossy().to_ascii_lowercase().ends_with(".gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&h).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        h
    };
    write_bytes(path, &out)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: PathBuf,
    pub split: Split,
}

impl ManifestEntry {
    /// Case id: the image file name without volume extensions.
    pub fn id(&self) -> String {
        let name = self
            .image
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut stem = name.as_str();
        for ext in [".gz", ".nii", ".raw", ".img"] {
            stem = stem.strip_suffix(ext).unwrap_or(stem);
        }
        stem.to_string()
    }
}

/// Environment variable naming the root that relative manifest paths resolve against.
pub const DATA_ROOT_ENV: &str = "VOXELSIM_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Reads a manifest; relative paths resolve against `$VOXELSIM_DATA_ROOT`,
    /// or the manifest's directory when unset.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let mut m: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let root = match std::env::var_os(DATA_ROOT_ENV) {
            Some(r) => PathBuf::from(r),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        for e in &mut m.entries {
            if e.image.is_relative() {
                e.image = root.join(&e.image);
            }
            if e.label.is_relative() {
                e.label = root.join(&e.label);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("manifest needs at least two classes".into()));
        }
        for e in &self.entries {
            for p in [&e.image, &e.label] {
                if !p.exists() {
                    return Err(Error::MissingFile(p.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<VolumeSample>> {
        self.split(split)
            .into_iter()
            .map(|e| {
                let v = load_volume(&e.image, &e.label, &e.id())?;
                v.check_classes(self.n_classes())?;
                Ok(v)
            })
            .collect()
    }
}
