//! Per-organ evaluation reports and embedding export.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::data::{DatasetManifest, Split, VolumeSample};
use crate::error::{Error, Result};
use crate::heads::EmbeddingBatch;
use crate::metrics::class_metrics;
use crate::model::Model;
use crate::sampler::{sample_batch, CapScope, SamplerConfig, VoxelTag};
use crate::trainer::load_preprocessed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    /// Indexed by organ, i.e. class ids `1..n_classes`.
    pub dsc: Vec<f64>,
    pub hd95: Vec<Option<f64>>,
    pub assd: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganSummary {
    pub class_id: u8,
    pub name: String,
    pub dsc: f64,
    pub hd95: Option<f64>,
    pub assd: Option<f64>,
    /// Cases where a distance was undefined because a mask was empty.
    pub missing: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub organs: Vec<OrganSummary>,
    pub average_dsc: f64,
    pub average_hd95: Option<f64>,
    pub average_assd: Option<f64>,
    pub cases: Vec<CaseMetrics>,
}

fn mean_present(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (s, n) = v.flatten().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricReport {
    /// Aggregates per-case values; `class_names[0]` is the background.
    pub fn from_cases(label: impl Into<String>, class_names: &[String], cases: Vec<CaseMetrics>) -> Self {
        let organs: Vec<OrganSummary> = (1..class_names.len())
            .map(|c| {
                let k = c - 1;
                let missing = cases.iter().filter(|m| m.hd95[k].is_none()).count();
                if missing > 0 {
                    log::info!("{}: {missing} case(s) without a surface distance", class_names[c]);
                }
                OrganSummary {
                    class_id: c as u8,
                    name: class_names[c].clone(),
                    dsc: cases.iter().map(|m| m.dsc[k]).sum::<f64>() / cases.len().max(1) as f64,
                    hd95: mean_present(cases.iter().map(|m| m.hd95[k])),
                    assd: mean_present(cases.iter().map(|m| m.assd[k])),
                    missing,
                }
            })
            .collect();
        Self {
            label: label.into(),
            average_dsc: organs.iter().map(|o| o.dsc).sum::<f64>() / organs.len().max(1) as f64,
            average_hd95: mean_present(organs.iter().map(|o| o.hd95)),
            average_assd: mean_present(organs.iter().map(|o| o.assd)),
            organs,
            cases,
        }
    }

    /// One row per case and organ: `case_id,organ,dsc,hd95,assd` (missing distances empty).
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let e = |e: csv::Error| Error::InvalidInput(e.to_string());
        w.write_record(["method", "case_id", "organ", "dsc", "hd95", "assd"])
            .map_err(e)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cases {
            for (k, o) in self.organs.iter().enumerate() {
                w.write_record([
                    self.label.clone(),
                    c.case_id.clone(),
                    o.name.clone(),
                    c.dsc[k].to_string(),
                    opt(c.hd95[k]),
                    opt(c.assd[k]),
                ])
                .map_err(e)?;
            }
        }
        let bytes = w.into_inner().map_err(|err| Error::InvalidInput(err.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Metrics of one predicted label grid against its reference.
pub fn case_metrics(case_id: &str, pred: &[u8], sample: &VolumeSample, n_classes: usize) -> Result<CaseMetrics> {
    let mut m = CaseMetrics {
        case_id: case_id.to_string(),
        dsc: Vec::new(),
        hd95: Vec::new(),
        assd: Vec::new(),
    };
    for c in 1..n_classes {
        let r = class_metrics(pred, &sample.label, c as u8, sample.dims, sample.spacing)?;
        m.dsc.push(r.dsc);
        m.hd95.push(r.hd95);
        m.assd.push(r.assd);
    }
    Ok(m)
}

/// Evaluates a model on preprocessed samples.
pub fn evaluate_model(
    model: &Model,
    label: &str,
    class_names: &[String],
    samples: &[VolumeSample],
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no volumes to evaluate".into()));
    }
    if class_names.len() != model.n_classes() {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes but the dataset lists {}",
            model.n_classes(),
            class_names.len()
        )));
    }
    let cases = samples
        .iter()
        .map(|s| case_metrics(&s.id, &model.predict(s)?, s, model.n_classes()))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_cases(label, class_names, cases))
}

/// Loads `checkpoint` and evaluates it on `split` of `manifest`.
pub fn evaluate(checkpoint: &Path, manifest: &DatasetManifest, split: Split) -> Result<MetricReport> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = ck.header.config.clone();
    if manifest.n_classes() != cfg.unet.n_classes {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes but the manifest lists {}",
            cfg.unet.n_classes,
            manifest.n_classes()
        )));
    }
    let model = Model::from_store(&cfg, ck.store)?;
    let samples = load_preprocessed(manifest, split, &cfg)?;
    evaluate_model(&model, &cfg.method_label(), &manifest.classes, &samples)
}

/// Embeds up to `cap` sampled voxels per layer with the `z` branch.
pub fn collect_embeddings(
    model: &Model,
    volumes: &[VolumeSample],
    layer_ids: &[u32],
    cap: usize,
    seed: u64,
) -> Result<EmbeddingBatch> {
    let heads = model
        .heads
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("inference-only checkpoint has no feature heads to export".into()))?;
    let max_layer = layer_ids.iter().copied().max().unwrap_or(0) as usize;
    if layer_ids.contains(&0) || max_layer > heads.layers.len() {
        return Err(Error::InvalidInput(format!(
            "layer ids {layer_ids:?} outside 1..={}",
            heads.layers.len()
        )));
    }
    let mut features = Vec::new();
    let mut labels: Vec<Vec<Vec<u8>>> = vec![Vec::new(); max_layer];
    for s in volumes {
        let pyr = model.unet.forward(
            &model.store,
            &crate::tensor::Tensor::feature_map(1, s.dims, s.image_f64()),
            max_layer,
        )?;
        for (l, f) in pyr.features.iter().enumerate() {
            let (_, ld) = f.channels_and_dims();
            labels[l].push(crate::sampler::downsample_label(&s.label, s.dims, ld)?);
        }
        features.push(pyr.features);
    }
    let cfg = SamplerConfig {
        total_cap: cap,
        fn_cap: cap,
        include_background: true,
        scope: CapScope::PerBatch,
    };
    let mut parts = Vec::new();
    for &layer_id in layer_ids {
        let l = layer_id as usize - 1;
        let tags: Vec<Vec<VoxelTag>> = labels[l].iter().map(|li| vec![VoxelTag::Tp; li.len()]).collect();
        let vols: Vec<(&[u8], &[VoxelTag])> = labels[l]
            .iter()
            .zip(&tags)
            .map(|(a, b)| (a.as_slice(), b.as_slice()))
            .collect();
        let plan = sample_batch(&[vols], &cfg, crate::seed::derive(seed, layer_id as u64))?;
        let mut by_volume: BTreeMap<u32, (Vec<usize>, Vec<u32>)> = BTreeMap::new();
        for set in &plan.sets {
            for v in &set.voxels {
                let e = by_volume.entry(v.volume).or_default();
                e.0.push(v.index);
                e.1.push(set.class_id as u32);
            }
        }
        for (vol, (idx, cls)) in by_volume {
            let f = &features[vol as usize][l];
            parts.push(heads.embed(&model.store, f, &idx, layer_id, &cls, vol)?);
        }
    }
    EmbeddingBatch::concat(&parts)
}

/// Writes `z` embeddings as CSV with columns `e0..e{D-1},class_id,layer_id,volume_id`.
pub fn write_embeddings_csv(batch: &EmbeddingBatch, path: &Path) -> Result<()> {
    let e = |e: csv::Error| Error::InvalidInput(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(e)?;
    let d = batch.dim();
    let mut header: Vec<String> = (0..d).map(|k| format!("e{k}")).collect();
    header.extend(["class_id", "layer_id", "volume_id"].map(String::from));
    w.write_record(&header).map_err(e)?;
    for r in 0..batch.len() {
        let mut row: Vec<String> = batch.z.data()[r * d..(r + 1) * d]
            .iter()
            .map(|v| v.to_string())
            .collect();
        row.push(batch.class_id[r].to_string());
        row.push(batch.layer_id[r].to_string());
        row.push(batch.volume_id[r].to_string());
        w.write_record(&row).map_err(e)?;
    }
    w.flush().map_err(|err| Error::io(path, err))
}

/// Loads `checkpoint`, embeds sampled voxels of `volumes` and writes them to `out`.
pub fn export_embeddings(
    checkpoint: &Path,
    volumes: &[VolumeSample],
    layer_ids: &[u32],
    cap: usize,
    out: &Path,
) -> Result<usize> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = ck.header.config.clone();
    let model = Model::from_store(&cfg, ck.store)?;
    let batch = collect_embeddings(&model, volumes, layer_ids, cap, cfg.seed)?;
    write_embeddings_csv(&batch, out)?;
    Ok(batch.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{IntensityDomain, VolumeSample};
    use crate::tensor::Dims3;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|k| format!("c{k}")).collect()
    }

    #[test]
    fn ground_truth_against_itself_is_perfect() {
        let d = Dims3::new(8, 8, 4);
        let label: Vec<u8> = (0..d.len()).map(|i| ((i / 7) % 3) as u8).collect();
        let s = VolumeSample::new(
            "a",
            d,
            [1.0, 1.0, 2.0],
            vec![0.0; d.len()],
            label.clone(),
            IntensityDomain::Normalized,
        )
        .unwrap();
        let m = case_metrics("a", &label, &s, 3).unwrap();
        let r = MetricReport::from_cases("x", &names(3), vec![m]);
        assert_eq!(r.average_dsc, 1.0);
        assert_eq!(r.average_hd95, Some(0.0));
        assert_eq!(r.average_assd, Some(0.0));
    }

    #[test]
    fn averages_are_means_of_organ_columns_and_skip_missing() {
        let cases = vec![
            CaseMetrics {
                case_id: "a".into(),
                dsc: vec![0.5, 1.0],
                hd95: vec![Some(2.0), None],
                assd: vec![Some(1.0), None],
            },
            CaseMetrics {
                case_id: "b".into(),
                dsc: vec![0.7, 0.0],
                hd95: vec![Some(4.0), None],
                assd: vec![Some(3.0), None],
            },
        ];
        let r = MetricReport::from_cases("x", &names(3), cases);
        assert!((r.organs[0].dsc - 0.6).abs() < 1e-12);
        assert_eq!(r.organs[1].dsc, 0.5);
        assert!((r.average_dsc - 0.55).abs() < 1e-12);
        assert_eq!(r.organs[1].hd95, None);
        assert_eq!(r.organs[1].missing, 2);
        assert_eq!(r.average_hd95, Some(3.0));
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.contains("x,a,c2,1,,"));
    }
}
