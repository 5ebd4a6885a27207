//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::load_checkpoint;
use crate::config::TrainConfig;
use crate::data::{
    preprocess, read_grid, save_volume, synthesize_dataset, DatasetManifest, ManifestEntry, PhantomConfig, Split,
};
use crate::error::{Error, Result};
use crate::eval::{collect_embeddings, evaluate, write_embeddings_csv, MetricReport};
use crate::model::Model;
use crate::plot::{dsc_box_plot, fraction_curve};
use crate::sweep::{run_sweep, Preset, SweepSummary, DEFAULT_FRACTIONS, SUMMARY_FILE};
use crate::trainer::{fit, load_preprocessed, Trainer};
use crate::unet::Upsampling;

#[derive(Debug, Parser)]
#[command(
    name = "voxelsim",
    version,
    about = "Voxel-level Siamese representation learning for multi-organ segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Window and resample every volume of a manifest onto the training grid.
    Preprocess(PreprocessArgs),
    /// Write a synthetic phantom dataset with its manifest.
    Synth(SynthArgs),
    /// Train a model; checkpoints and logs go to a fresh run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Export sampled z embeddings of a training checkpoint as CSV.
    EmbedExport(EmbedArgs),
    /// Train and evaluate every variant of an ablation preset.
    Sweep(SweepArgs),
    /// Render DSC box plots and label-fraction curves from saved reports.
    Plot(PlotArgs),
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    <[usize; 3]>::try_from(v).map_err(|_| format!("expected three comma-separated sizes, got {s:?}"))
}

fn parse_upsampling(s: &str) -> std::result::Result<Upsampling, String> {
    match s {
        "transposed-conv" => Ok(Upsampling::TransposedConv),
        "trilinear-conv" => Ok(Upsampling::TrilinearConv),
        _ => Err(format!("expected transposed-conv or trilinear-conv, got {s:?}")),
    }
}

/// Flags overriding fields of the loaded configuration.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// TOML or JSON training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the small CPU configuration instead of the full-size defaults.
    #[arg(long, conflicts_with = "config")]
    pub desk: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Feature-loss weight; 0 trains the plain segmentation baseline.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Number of encoder layers `|F|` fed to the feature loss.
    #[arg(long)]
    pub feature_layers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub label_fraction: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub stop_at_dsc: Option<f64>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Uniform class weights in the feature loss.
    #[arg(long)]
    pub unweighted: bool,
    #[arg(long)]
    pub total_cap: Option<usize>,
    #[arg(long)]
    pub fn_cap: Option<usize>,
    #[arg(long, value_parser = parse_shape)]
    pub patch_shape: Option<[usize; 3]>,
    #[arg(long, value_parser = parse_shape)]
    pub target_shape: Option<[usize; 3]>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long, value_parser = parse_upsampling)]
    pub upsampling: Option<Upsampling>,
    #[arg(long)]
    pub run_label: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = self.$flag.clone() {
                    c.$($field).+ = v;
                }
            };
        }
        set!(epochs => epochs);
        set!(batch_size => batch_size);
        set!(lr => base_lr);
        set!(weight_decay => weight_decay);
        set!(feature_layers => feature_layers);
        set!(seed => seed);
        set!(label_fraction => label_fraction);
        set!(val_fraction => val_fraction);
        set!(eval_every => eval_every);
        set!(hidden_dim => heads.hidden_dim);
        set!(total_cap => sampler.total_cap);
        set!(fn_cap => sampler.fn_cap);
        set!(target_shape => preprocess.target_shape);
        set!(depth => unet.depth);
        set!(base_channels => unet.base_channels);
        set!(upsampling => unet.upsampling);
        if self.lambda.is_some() {
            c.lambda = self.lambda;
        }
        if self.stop_at_dsc.is_some() {
            c.stop_at_dsc = self.stop_at_dsc;
        }
        if self.embed_dim.is_some() {
            c.heads.embed_dim = self.embed_dim;
        }
        if self.patch_shape.is_some() {
            c.patch_shape = self.patch_shape;
        }
        if self.run_label.is_some() {
            c.run_label = self.run_label.clone();
        }
        if self.unweighted {
            c.feature_loss.weighted = false;
        }
    }

    /// Config file (or defaults sized to the manifest) with flag overrides applied.
    pub fn resolve(&self, manifest: &DatasetManifest) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None if self.desk => {
                let shape = match (self.target_shape, manifest.entries.first()) {
                    (Some(s), _) => s,
                    (None, Some(e)) => read_grid(&e.image, false)?.dims.as_array(),
                    (None, None) => return Err(Error::InvalidInput("manifest has no volumes".into())),
                };
                TrainConfig::desk(shape, manifest.n_classes())
            }
            None => {
                let mut c = TrainConfig::default();
                c.unet.n_classes = manifest.n_classes();
                c
            }
        };
        self.overrides(&mut c);
        c.validate()?;
        Ok(c)
    }

    fn is_empty(&self) -> bool {
        let mut c = TrainConfig::default();
        self.overrides(&mut c);
        c == TrainConfig::default() && self.config.is_none() && !self.desk
    }
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for processed volumes and their manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_shape)]
    pub target_shape: Option<[usize; 3]>,
    #[arg(long, allow_negative_numbers = true)]
    pub window_lo: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub window_hi: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Total number of phantoms.
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// How many of the phantoms form the test split.
    #[arg(long, default_value_t = 0)]
    pub test_count: usize,
    #[arg(long, value_parser = parse_shape, default_value = "32,32,16")]
    pub shape: [usize; 3],
    /// Number of classes, background included.
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Parent of the timestamped run directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Exact run directory, bypassing the timestamped name.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Continue from a training checkpoint with its stored configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
    /// Report file stem.
    #[arg(long, default_value = "report")]
    pub stem: String,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Layer ids, 1 being the bottleneck; defaults to every trained layer.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<u32>,
    /// Maximum rows per layer.
    #[arg(long, default_value_t = 1000)]
    pub cap: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub preset: Preset,
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Label percentages for the fractions preset.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FRACTIONS)]
    pub fractions: Vec<u32>,
    /// Seeds; each variant is trained once per seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Report JSON files or sweep summaries.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `<timestamp>-<first 8 hex digits of sha256(config)>`.
pub fn run_dir_name(config_toml: &str) -> String {
    let digest = Sha256::digest(config_toml.as_bytes());
    format!(
        "{}-{}",
        chrono::Local::now().format("%Y%m%d-%H%M%S"),
        &hex::encode(digest)[..8]
    )
}

fn print_json(v: serde_json::Value) {
    println!("{v}");
}

fn cmd_preprocess(a: &PreprocessArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?.preprocess,
        None => Default::default(),
    };
    if let Some(s) = a.target_shape {
        cfg.target_shape = s;
    }
    if let Some(v) = a.window_lo {
        cfg.window_lo = v;
    }
    if let Some(v) = a.window_hi {
        cfg.window_hi = v;
    }
    cfg.validate()?;
    create_dir(&a.out)?;
    let mut entries = Vec::new();
    for split in [Split::Train, Split::Test] {
        for (e, s) in manifest.split(split).into_iter().zip(manifest.load_split(split)?) {
            let out = preprocess(&s, &cfg)?;
            let id = e.id();
            let image = PathBuf::from(format!("{id}.raw"));
            let label = PathBuf::from(format!("{id}_label.raw"));
            save_volume(&out, &a.out.join(&image), &a.out.join(&label))?;
            entries.push(ManifestEntry { image, label, split });
        }
    }
    let n = entries.len();
    let path = a.out.join("manifest.json");
    DatasetManifest {
        classes: manifest.classes.clone(),
        entries,
    }
    .save(&path)?;
    print_json(json!({"manifest": path, "volumes": n}));
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    if a.test_count > a.count {
        return Err(Error::Config(format!(
            "test count {} exceeds count {}",
            a.test_count, a.count
        )));
    }
    create_dir(&a.out)?;
    let cfg = PhantomConfig::new(a.shape, a.classes);
    let path = synthesize_dataset(&a.out, a.seed, a.count - a.test_count, a.test_count, &cfg)?;
    print_json(json!({"manifest": path, "volumes": a.count}));
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let outcome = if let Some(ckpt) = &a.resume {
        if !a.cfg.is_empty() {
            return Err(Error::Config(
                "--resume uses the checkpoint's configuration; drop the other flags".into(),
            ));
        }
        let mut trainer = Trainer::resume(ckpt)?;
        let dir = match &a.run_dir {
            Some(d) => d.clone(),
            None => ckpt.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        let train = load_preprocessed(&manifest, Split::Train, &trainer.config)?;
        trainer.fit(&train, &dir)?
    } else {
        let cfg = a.cfg.resolve(&manifest)?;
        let text = cfg.to_toml()?;
        let dir = a.run_dir.clone().unwrap_or_else(|| a.out.join(run_dir_name(&text)));
        create_dir(&dir)?;
        write_text(&dir.join("config.toml"), &text)?;
        log::info!("training {} in {}", cfg.method_label(), dir.display());
        fit(&manifest, cfg, &dir)?
    };
    print_json(json!({
        "best_checkpoint": outcome.best_checkpoint,
        "last_checkpoint": outcome.last_checkpoint,
        "log": outcome.log_path,
        "best_metric": outcome.best_metric,
        "epochs": outcome.history.len(),
    }));
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let report = evaluate(&a.checkpoint, &manifest, a.split)?;
    report.write(&a.out, &a.stem)?;
    print_json(json!({
        "label": report.label,
        "report": a.out.join(format!("{}.json", a.stem)),
        "average_dsc": report.average_dsc,
        "average_hd95": report.average_hd95,
        "average_assd": report.average_assd,
    }));
    Ok(())
}

fn cmd_embed(a: &EmbedArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let cfg = ck.header.config.clone();
    let model = Model::from_store(&cfg, ck.store)?;
    let layers: Vec<u32> = if a.layers.is_empty() {
        (1..=cfg.feature_layers as u32).collect()
    } else {
        a.layers.clone()
    };
    let volumes = load_preprocessed(&manifest, a.split, &cfg)?;
    let batch = collect_embeddings(&model, &volumes, &layers, a.cap, cfg.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_embeddings_csv(&batch, &a.out)?;
    print_json(json!({"embeddings": a.out, "rows": batch.len(), "dim": batch.dim()}));
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let base = a.cfg.resolve(&manifest)?;
    let seeds = if a.seeds.is_empty() {
        vec![base.seed]
    } else {
        a.seeds.clone()
    };
    create_dir(&a.out)?;
    write_text(&a.out.join("config.toml"), &base.to_toml()?)?;
    let summary = run_sweep(&manifest, &base, a.preset, &a.fractions, &seeds, &a.out)?;
    let rows: Vec<_> = summary
        .entries
        .iter()
        .map(|e| json!({"label": e.label, "stem": e.stem, "average_dsc": e.average_dsc}))
        .collect();
    print_json(json!({"summary": a.out.join(SUMMARY_FILE), "runs": rows}));
    Ok(())
}

fn cmd_plot(a: &PlotArgs) -> Result<()> {
    let mut reports = Vec::new();
    let mut entries = Vec::new();
    for p in &a.inputs {
        let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(p.clone()),
            _ => Error::io(p, e),
        })?;
        if let Ok(s) = serde_json::from_str::<SweepSummary>(&text) {
            for e in &s.entries {
                reports.push(MetricReport::load(&e.report)?);
            }
            if s.preset == Preset::Fractions {
                entries.extend(s.entries);
            }
        } else {
            reports.push(serde_json::from_str::<MetricReport>(&text).map_err(|e| {
                Error::InvalidInput(format!("{}: neither a report nor a sweep summary: {e}", p.display()))
            })?);
        }
    }
    create_dir(&a.out)?;
    let mut written = Vec::new();
    let box_path = a.out.join("dsc_boxplot.svg");
    dsc_box_plot(&reports, &box_path)?;
    written.push(box_path);
    if !entries.is_empty() {
        let curve = a.out.join("label_fraction.svg");
        fraction_curve(&entries, &curve)?;
        written.push(curve);
    }
    print_json(json!({"plots": written}));
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::EmbedExport(a) => cmd_embed(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Plot(a) => cmd_plot(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Failures print a single JSON line on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", json!({"error": "usage", "message": first, "exit_code": 2}));
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            eprintln!(
                "{}",
                json!({"error": e.kind(), "message": e.to_string(), "exit_code": code})
            );
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_parse() {
        assert_eq!(parse_shape("32, 32,16").unwrap(), [32, 32, 16]);
        assert!(parse_shape("32,32").is_err());
        assert!(parse_shape("a,b,c").is_err());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cli = Cli::try_parse_from([
            "voxelsim",
            "train",
            "--manifest",
            "m.json",
            "--lambda",
            "0",
            "--hidden-dim",
            "128",
            "--unweighted",
            "--patch-shape",
            "16,16,8",
            "--upsampling",
            "trilinear-conv",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let mut c = TrainConfig::default();
        a.cfg.overrides(&mut c);
        assert_eq!(c.lambda, Some(0.0));
        assert_eq!(c.heads.hidden_dim, 128);
        assert!(!c.feature_loss.weighted);
        assert_eq!(c.patch_shape, Some([16, 16, 8]));
        assert_eq!(c.unet.upsampling, Upsampling::TrilinearConv);
        assert_eq!(c.method_label(), "3D U-Net");
        assert!(!a.cfg.is_empty());
    }

    #[test]
    fn unknown_flags_rejected() {
        assert!(Cli::try_parse_from(["voxelsim", "synth", "--out", "x", "--bogus"]).is_err());
        assert_eq!(main_with_args(["voxelsim", "synth", "--out", "x", "--bogus"]), 2);
    }

    #[test]
    fn run_dir_name_embeds_config_hash() {
        let a = run_dir_name("epochs = 1\n");
        let b = run_dir_name("epochs = 2\n");
        assert_eq!(a.len(), "20260101-000000-".len() + 8);
        assert_ne!(a[16..], b[16..]);
    }
}
