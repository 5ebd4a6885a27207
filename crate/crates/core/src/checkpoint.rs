//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `VXSMCKPT`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f64` in header order.
//! The header records the full [`TrainConfig`], progress counters and a
//! directory of `{name, shape, offset, training_only}` entries, where
//! `offset` counts `f64` elements from the start of the data section.
//! Optimizer moments are stored as tensors named `optim/m/<param>` and
//! `optim/v/<param>`; they and the feature heads are marked training-only.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::{AdamState, ParamStore};

pub const MAGIC: &[u8; 8] = b"VXSMCKPT";
pub const FORMAT_VERSION: u32 = 1;
const OPTIM_M: &str = "optim/m/";
const OPTIM_V: &str = "optim/v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub training_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub best_metric: Option<f64>,
    /// Per-parameter Adam step counts, in store order.
    pub optimizer_steps: Option<Vec<u64>>,
    pub stripped: bool,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub store: ParamStore,
    pub adam: Option<AdamState>,
}

/// Progress counters written alongside parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Progress {
    pub epoch: usize,
    pub step: usize,
    pub best_metric: Option<f64>,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save_checkpoint(
    path: &Path,
    config: &TrainConfig,
    progress: Progress,
    store: &ParamStore,
    adam: Option<&AdamState>,
) -> Result<()> {
    let mut all: Vec<(String, &[usize], &[f64], bool)> = Vec::new();
    for (_, p) in store.iter() {
        all.push((p.name.clone(), &p.shape, &p.value, p.training_only));
    }
    if let Some(a) = adam {
        for (i, (_, p)) in store.iter().enumerate() {
            all.push((format!("{OPTIM_M}{}", p.name), &p.shape, &a.m[i], true));
            all.push((format!("{OPTIM_V}{}", p.name), &p.shape, &a.v[i], true));
        }
    }
    let mut entries = Vec::new();
    let mut chunks = Vec::new();
    let mut offset = 0;
    for (name, shape, data, training_only) in all {
        entries.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            offset,
            training_only,
        });
        offset += data.len();
        chunks.push(data);
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        epoch: progress.epoch,
        step: progress.step,
        best_metric: progress.best_metric,
        optimizer_steps: adam.map(|a| a.step.clone()),
        stripped: false,
        tensors: entries,
    };
    write_container(path, &header, &chunks)
}

fn write_container(path: &Path, header: &CheckpointHeader, chunks: &[&[f64]]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let total: usize = chunks.iter().map(|c| c.len()).sum();
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * total);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for c in chunks {
        for v in *c {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_container(path: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
    let mut f = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(ck(format!("{} is not a checkpoint", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let hend = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| ck("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..hend]).map_err(|e| ck(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(ck(format!("unsupported format version {}", header.format_version)));
    }
    let body = &bytes[hend..];
    if body.len() % 8 != 0 {
        return Err(ck("data section is not a whole number of f64 values"));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        if t.offset + n > data.len() {
            return Err(ck(format!("tensor {} extends past the data section", t.name)));
        }
    }
    Ok((header, data))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, data) = read_container(path)?;
    let slice = |t: &TensorEntry| data[t.offset..t.offset + t.shape.iter().product::<usize>()].to_vec();
    let mut store = ParamStore::new();
    for t in header.tensors.iter().filter(|t| !t.name.starts_with("optim/")) {
        if store.find(&t.name).is_some() {
            return Err(ck(format!("duplicate tensor {}", t.name)));
        }
        store.add(t.name.clone(), t.shape.clone(), slice(t), t.training_only);
    }
    let adam = match &header.optimizer_steps {
        Some(steps) if steps.len() == store.len() => {
            let find = |prefix: &str, name: &str| {
                header
                    .tensors
                    .iter()
                    .find(|t| t.name.strip_prefix(prefix) == Some(name))
                    .map(slice)
                    .ok_or_else(|| ck(format!("missing optimizer moment for {name}")))
            };
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (_, p) in store.iter() {
                m.push(find(OPTIM_M, &p.name)?);
                v.push(find(OPTIM_V, &p.name)?);
            }
            Some(AdamState {
                step: steps.clone(),
                m,
                v,
            })
        }
        Some(_) => return Err(ck("optimizer state does not match the parameter list")),
        None => None,
    };
    Ok(Checkpoint { header, store, adam })
}

/// Writes a copy of `src` without training-only tensors (heads, optimizer moments).
pub fn strip_training_only(src: &Path, dst: &Path) -> Result<CheckpointHeader> {
    let (mut header, data) = read_container(src)?;
    let mut kept = Vec::new();
    let mut chunks = Vec::new();
    let mut offset = 0;
    for t in header.tensors.iter().filter(|t| !t.training_only) {
        let n: usize = t.shape.iter().product();
        chunks.push(&data[t.offset..t.offset + n]);
        kept.push(TensorEntry { offset, ..t.clone() });
        offset += n;
    }
    header.tensors = kept;
    header.optimizer_steps = None;
    header.stripped = true;
    write_container(dst, &header, &chunks)?;
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Adam;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add(
            "enc0.w",
            vec![2, 3],
            vec![1.0, -2.0, 3.5, 0.25, f64::MIN_POSITIVE, 1e300],
            false,
        );
        s.add("heads.f1.w", vec![2], vec![0.5, -0.5], true);
        s
    }

    #[test]
    fn round_trip_preserves_values_and_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let mut store = sample_store();
        let mut adam = Adam::new(Default::default(), &store);
        adam.step(&mut store, &[Some(vec![0.1; 6]), None], 1e-3);
        let progress = Progress {
            epoch: 3,
            step: 12,
            best_metric: Some(0.7),
        };
        save_checkpoint(&p, &TrainConfig::default(), progress, &store, Some(adam.state())).unwrap();
        let c = load_checkpoint(&p).unwrap();
        assert_eq!(c.store, store);
        assert_eq!(c.adam.as_ref(), Some(adam.state()));
        assert_eq!((c.header.epoch, c.header.step), (3, 12));
    }

    #[test]
    fn strip_drops_training_only() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let store = sample_store();
        let adam = Adam::new(Default::default(), &store);
        save_checkpoint(
            &a,
            &TrainConfig::default(),
            Progress::default(),
            &store,
            Some(adam.state()),
        )
        .unwrap();
        strip_training_only(&a, &b).unwrap();
        let c = load_checkpoint(&b).unwrap();
        assert!(c.header.stripped);
        assert!(c.adam.is_none());
        assert_eq!(c.store.len(), 1);
        assert_eq!(
            c.store.get(c.store.find("enc0.w").unwrap()).value,
            store.get(store.find("enc0.w").unwrap()).value
        );
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
        assert!(matches!(
            load_checkpoint(&dir.path().join("none")),
            Err(Error::MissingFile(_))
        ));
        let good = dir.path().join("g.ckpt");
        save_checkpoint(
            &good,
            &TrainConfig::default(),
            Progress::default(),
            &sample_store(),
            None,
        )
        .unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
    }
}
