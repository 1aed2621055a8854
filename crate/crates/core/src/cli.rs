//! Command-line interface: `train`, `eval`, `predict`, `gradcheck`, `synth`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{ensure_modalities, load_checkpoint, parse_dims, save_checkpoint, CheckpointMeta};
use crate::config::{apply_all, KeyValues};
use crate::data::{dataset_dims, load_manifest, read_features, write_dataset, VideoSample};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::gradcheck::toy_model_check;
use crate::modality::{parse_modalities, Modality};
use crate::model::{Model, ModelConfig};
use crate::synth::{generate_synthetic, SynthConfig};
use crate::trainer::{train_with, write_loss_csv, TrainConfig};

/// Tolerance on the full-model gradient check.
pub const GRADCHECK_TOL: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "msbt", version, about = "Multi-scale bottleneck transformer for weakly supervised violence detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a manifest; writes checkpoint.msbc and loss.csv under --out.
    Train(TrainArgs),
    /// Evaluate a checkpoint; writes report.json and per-video frame CSVs under --out.
    Eval(EvalArgs),
    /// Score videos with a checkpoint and write a snippet score CSV.
    Predict(PredictArgs),
    /// Finite-difference check of the full model's gradient.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset with a manifest.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// `key = value` file with model and training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting configuration: default, reduced or toy.
    #[arg(long, default_value = "default")]
    pub preset: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated modalities, e.g. `r,f,a`.
    #[arg(long)]
    pub modalities: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub no_cross_transformer: bool,
    #[arg(long)]
    pub no_weighting: bool,
    /// Use N bottleneck tokens at every fusion layer.
    #[arg(long, value_name = "N")]
    pub fixed_tokens: Option<usize>,
    #[arg(long, value_name = "N")]
    pub bottleneck_n1: Option<usize>,
    #[arg(long, value_name = "N")]
    pub layers_msbt: Option<usize>,
    /// Drop the contrast term from the objective.
    #[arg(long)]
    pub no_tcc: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

impl ModelArgs {
    pub fn resolve(&self) -> Result<(ModelConfig, TrainConfig)> {
        let mut model = ModelConfig::preset(&self.preset)?;
        let mut train = TrainConfig::default();
        if let Some(path) = &self.config {
            apply_all(&KeyValues::read(path)?, &mut model, &mut train)?;
        }
        if let Some(s) = self.seed {
            train.seed = s;
        }
        if let Some(m) = &self.modalities {
            model.modalities = parse_modalities(m)?;
        }
        if let Some(l) = self.lambda {
            model.loss.lambda = l;
        }
        if let Some(k) = self.topk {
            model.loss.k = k;
        }
        if self.no_cross_transformer {
            model.cross_transformer = false;
        }
        if self.no_weighting {
            model.weighting = false;
        }
        if self.fixed_tokens.is_some() {
            model.fixed_tokens = self.fixed_tokens;
        }
        if let Some(n) = self.bottleneck_n1 {
            model.bottleneck_tokens = n;
        }
        if let Some(n) = self.layers_msbt {
            model.fusion_layers = n;
        }
        if self.no_tcc {
            model.tcc = false;
        }
        if let Some(e) = self.epochs {
            train.epochs = e;
        }
        if let Some(b) = self.batch_size {
            train.batch_size = b;
        }
        if let Some(lr) = self.lr {
            train.learning_rate = lr;
        }
        model.validate()?;
        train.validate()?;
        Ok((model, train))
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fail unless the checkpoint uses exactly these modalities.
    #[arg(long)]
    pub modalities: Option<String>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Score every video in a manifest.
    #[arg(long, conflicts_with_all = ["rgb", "flow", "audio"])]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub rgb: Option<PathBuf>,
    #[arg(long)]
    pub flow: Option<PathBuf>,
    #[arg(long)]
    pub audio: Option<PathBuf>,
    /// Output CSV `video_id,snippet_index,score`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub modalities: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "toy")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub num_videos: Option<usize>,
    #[arg(long)]
    pub t_min: Option<usize>,
    #[arg(long)]
    pub t_max: Option<usize>,
    /// Input widths, e.g. `r:8,f:8,a:8`.
    #[arg(long)]
    pub dims: Option<String>,
    #[arg(long)]
    pub anomaly_rate: Option<f64>,
    #[arg(long)]
    pub event_len_min: Option<usize>,
    #[arg(long)]
    pub event_len_max: Option<usize>,
    #[arg(long)]
    pub signal_strength: Option<f64>,
    #[arg(long)]
    pub async_min: Option<usize>,
    #[arg(long)]
    pub async_max: Option<usize>,
    #[arg(long)]
    pub frames_per_snippet: Option<usize>,
}

/// Prints to stdout, ignoring a closed pipe.
fn print_line(s: &str) {
    let _ = writeln!(std::io::stdout(), "{s}");
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(format!("creating {}", p.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let (config, train_cfg) = args.model.resolve()?;
    let (_, data) = load_manifest(&args.manifest)?;
    let dims = dataset_dims(&data);
    create_dir(&args.out)?;
    let mut model = Model::<f64>::new(config, &dims, train_cfg.seed)?;
    log::info!(
        "training {} parameters on {} videos",
        model.num_parameters(),
        data.len()
    );
    let log = train_with(&mut model, &data, &train_cfg, |e| {
        eprintln!("epoch {} mil {:.6} tcc {:.6} total {:.6}", e.epoch, e.mil, e.tcc, e.total);
    })?;
    let csv = args.out.join("loss.csv");
    let file = fs::File::create(&csv).map_err(|e| Error::io(format!("creating {}", csv.display()), e))?;
    write_loss_csv(BufWriter::new(file), &log).map_err(|e| Error::io(format!("writing {}", csv.display()), e))?;
    let meta = CheckpointMeta {
        epoch: train_cfg.epochs,
        seed: train_cfg.seed,
    };
    save_checkpoint(&args.out.join("checkpoint.msbc"), &model, meta)?;
    let mut kv = KeyValues::default();
    model.config.to_key_values(&mut kv);
    train_cfg.to_key_values(&mut kv);
    write_text(&args.out.join("config.txt"), &kv.to_text())
}

fn check_requested(model: &Model<f64>, requested: &Option<String>) -> Result<()> {
    match requested {
        Some(m) => ensure_modalities(model, &parse_modalities(m)?),
        None => Ok(()),
    }
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let (model, _) = load_checkpoint::<f64>(&args.checkpoint)?;
    check_requested(&model, &args.modalities)?;
    let (_, data) = load_manifest(&args.manifest)?;
    create_dir(&args.out)?;
    let report = evaluate(&model, &data, Some(&args.out.join("scores")))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&args.out.join("report.json"), &(json.clone() + "\n"))?;
    print_line(&json);
    Ok(())
}

fn run_predict(args: &PredictArgs) -> Result<()> {
    let (model, _) = load_checkpoint::<f64>(&args.checkpoint)?;
    check_requested(&model, &args.modalities)?;
    let samples: Vec<VideoSample> = match &args.manifest {
        Some(m) => load_manifest(m)?.1,
        None => {
            let given = [
                (Modality::Rgb, &args.rgb),
                (Modality::Flow, &args.flow),
                (Modality::Audio, &args.audio),
            ];
            let mut features = Vec::new();
            for (m, p) in given {
                if let Some(p) = p {
                    features.push((m, read_features(p, "input")?));
                }
            }
            if features.is_empty() {
                return Err(Error::config("give --manifest or at least one of --rgb, --flow, --audio"));
            }
            let sample = VideoSample {
                id: "input".into(),
                features,
                label: false,
                frame_labels: None,
            };
            sample.validate()?;
            vec![sample]
        }
    };
    let file = fs::File::create(&args.out).map_err(|e| Error::io(format!("creating {}", args.out.display()), e))?;
    let mut w = BufWriter::new(file);
    let ctx = || format!("writing {}", args.out.display());
    writeln!(w, "video_id,snippet_index,score").map_err(|e| Error::io(ctx(), e))?;
    for s in &samples {
        for (i, score) in model.predict(s)?.iter().enumerate() {
            writeln!(w, "{},{i},{score}", s.id).map_err(|e| Error::io(ctx(), e))?;
        }
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    if args.preset != "toy" {
        return Err(Error::config(format!("unknown gradcheck preset `{}` (toy)", args.preset)));
    }
    let report = toy_model_check(args.seed, GRADCHECK_TOL)?;
    let (name, index) = report.worst.clone().unwrap_or_default();
    print_line(&format!(
        "max relative error {:.3e} over {} components (worst: {name}[{index}]); tolerance {:.0e}: {}",
        report.max_rel_err,
        report.checked,
        report.tol,
        if report.passed { "PASS" } else { "FAIL" }
    ));
    Ok(report.passed)
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        num_videos: args.num_videos.unwrap_or(d.num_videos),
        t_min: args.t_min.unwrap_or(d.t_min),
        t_max: args.t_max.unwrap_or(d.t_max),
        dims: args.dims.as_deref().map(parse_dims).transpose()?.unwrap_or(d.dims),
        anomaly_rate: args.anomaly_rate.unwrap_or(d.anomaly_rate),
        event_len_min: args.event_len_min.unwrap_or(d.event_len_min),
        event_len_max: args.event_len_max.unwrap_or(d.event_len_max),
        signal_strength: args.signal_strength.unwrap_or(d.signal_strength),
        async_min: args.async_min.unwrap_or(d.async_min),
        async_max: args.async_max.unwrap_or(d.async_max),
        frames_per_snippet: args.frames_per_snippet.unwrap_or(d.frames_per_snippet),
        seed: args.seed,
        ..d
    };
    let samples = generate_synthetic(&cfg)?;
    let manifest = write_dataset(&args.out, &samples, cfg.frames_per_snippet)?;
    print_line(&manifest.display().to_string());
    Ok(())
}

/// Runs a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Eval(a) => run_eval(a).map(|_| true),
        Command::Predict(a) => run_predict(a).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Synth(a) => run_synth(a).map(|_| true),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
