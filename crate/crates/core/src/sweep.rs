//! Ablation and label-fraction sweeps: train every variant, evaluate it on
//! the test split and collect one report per variant.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport};
use crate::trainer::fit;

pub const SUMMARY_FILE: &str = "sweep_summary.json";
pub const DEFAULT_FRACTIONS: [u32; 4] = [10, 20, 50, 100];

/// Reference test DSC per label percentage, `(percent, baseline, feature)`.
pub const REFERENCE_FRACTION_CURVE: [(u32, f64, f64); 4] = [
    (10, 0.431, 0.548),
    (20, 0.609, 0.674),
    (50, 0.748, 0.764),
    (100, 0.786, 0.806),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// `|F|` in 1, 2, 3.
    Table3,
    /// Weighted feature loss on and off.
    Table4,
    /// Head hidden width 64, 128, 256 with one feature layer.
    Table5,
    /// Label percentages, one run per fraction.
    Fractions,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table3" => Ok(Preset::Table3),
            "table4" => Ok(Preset::Table4),
            "table5" => Ok(Preset::Table5),
            "fractions" => Ok(Preset::Fractions),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; expected table3, table4, table5 or fractions"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    /// File stem of the run directory and report.
    pub stem: String,
    pub config: TrainConfig,
}

impl Variant {
    pub fn label(&self) -> String {
        self.config.method_label()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub label: String,
    pub stem: String,
    pub label_fraction: f64,
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub average_dsc: f64,
    pub average_hd95: Option<f64>,
    pub average_assd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub preset: Preset,
    pub entries: Vec<SweepEntry>,
}

impl SweepSummary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

fn slug(label: &str) -> String {
    let mut s = String::new();
    for c in label.chars() {
        if c.is_ascii_alphanumeric() {
            s.push(c.to_ascii_lowercase());
        } else if !s.ends_with('_') {
            s.push('_');
        }
    }
    s.trim_matches('_').to_string()
}

/// Expands a preset into concrete run configurations derived from `base`.
pub fn variants(preset: Preset, base: &TrainConfig, fractions: &[u32], seeds: &[u64]) -> Result<Vec<Variant>> {
    if preset != Preset::Fractions && base.lambda == Some(0.0) {
        return Err(Error::Config(
            "ablation presets need a positive feature-loss weight".into(),
        ));
    }
    let mut out = Vec::new();
    let mut push = |stem: String, cfg: TrainConfig| out.push(Variant { stem, config: cfg });
    match preset {
        Preset::Table3 => {
            for f in 1..=3 {
                let mut c = base.clone();
                c.feature_layers = f;
                c.feature_loss.weighted = true;
                c.run_label = None;
                push(format!("feature_{f}"), c);
            }
        }
        Preset::Table4 => {
            for weighted in [false, true] {
                let mut c = base.clone();
                c.feature_loss.weighted = weighted;
                c.run_label = weighted.then(|| "feature".to_string());
                push(if weighted { "weighted" } else { "unweighted" }.to_string(), c);
            }
        }
        Preset::Table5 => {
            for h in [64, 128, 256] {
                let mut c = base.clone();
                c.feature_layers = 1;
                c.heads.hidden_dim = h;
                c.run_label = Some(format!("feature ({h})"));
                push(format!("hidden_{h}"), c);
            }
        }
        Preset::Fractions => {
            if fractions.is_empty() {
                return Err(Error::Config("no label fractions given".into()));
            }
            for &p in fractions {
                if p == 0 || p > 100 {
                    return Err(Error::Config(format!("label percentage {p} outside 1..=100")));
                }
                let mut c = base.clone();
                c.label_fraction = p as f64 / 100.0;
                push(format!("{}_p{p}", slug(&base.method_label())), c);
            }
        }
    }
    if seeds.len() > 1 {
        out = out
            .into_iter()
            .flat_map(|v| {
                seeds.iter().map(move |&s| {
                    let mut c = v.config.clone();
                    c.seed = s;
                    Variant {
                        stem: format!("{}_s{s}", v.stem),
                        config: c,
                    }
                })
            })
            .collect();
    } else if let Some(&s) = seeds.first() {
        for v in &mut out {
            v.config.seed = s;
        }
    }
    for v in &out {
        v.config.validate()?;
    }
    Ok(out)
}

fn log_reference_trend(summary: &SweepSummary) {
    let mut pts: Vec<(f64, f64)> = summary
        .entries
        .iter()
        .map(|e| (e.label_fraction, e.average_dsc))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (Some(first), Some(last)) = (pts.first(), pts.last()) else {
        return;
    };
    let (r0, r1) = (REFERENCE_FRACTION_CURVE[0].1, REFERENCE_FRACTION_CURVE[3].1);
    log::info!(
        "label fraction {:.0}% -> {:.0}%: DSC {:.3} -> {:.3} ({}); reference baseline {r0} -> {r1} (increasing)",
        first.0 * 100.0,
        last.0 * 100.0,
        first.1,
        last.1,
        if last.1 >= first.1 { "increasing" } else { "decreasing" },
    );
}

/// Trains and evaluates every variant under `out_dir`, writing
/// `reports/<stem>.{csv,json}` and [`SUMMARY_FILE`].
pub fn run_sweep(
    manifest: &DatasetManifest,
    base: &TrainConfig,
    preset: Preset,
    fractions: &[u32],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<SweepSummary> {
    let vs = variants(preset, base, fractions, seeds)?;
    if manifest.split(Split::Test).is_empty() {
        return Err(Error::InvalidInput("sweep needs a non-empty test split".into()));
    }
    let reports = out_dir.join("reports");
    let mut entries = Vec::new();
    for v in vs {
        log::info!("sweep {preset:?}: training {} ({})", v.stem, v.label());
        let outcome = fit(manifest, v.config.clone(), &out_dir.join("runs").join(&v.stem))?;
        let report: MetricReport = evaluate(&outcome.best_checkpoint, manifest, Split::Test)?;
        report.write(&reports, &v.stem)?;
        entries.push(SweepEntry {
            label: report.label.clone(),
            stem: v.stem.clone(),
            label_fraction: v.config.label_fraction,
            seed: v.config.seed,
            checkpoint: outcome.best_checkpoint,
            report: reports.join(format!("{}.json", v.stem)),
            average_dsc: report.average_dsc,
            average_hd95: report.average_hd95,
            average_assd: report.average_assd,
        });
    }
    let summary = SweepSummary { preset, entries };
    if preset == Preset::Fractions {
        log_reference_trend(&summary);
    }
    summary.save(&out_dir.join(SUMMARY_FILE))?;
    Ok(summary)
}
