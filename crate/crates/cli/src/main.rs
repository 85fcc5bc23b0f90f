use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use auxft::eval::colorize::ColorizeConfig;
use auxft::eval::synth::{LinearOracleConfig, SynthConfig};
use auxft::fsl::{parse_distances, FallbackMode, FslConfig, DEFAULT_EPSILON};
use auxft::pipeline::{
    cmd_eval, cmd_fsl_fit, cmd_fsl_predict, cmd_pool, cmd_synth, cmd_train, cmd_viz,
    parse_residual, EvalOptions, FeatureSource, PoolBoxes, SynthKind, WeightsChoice,
};
use auxft::trainer::TrainConfig;
use auxft::translator::{Variant, DEFAULT_DELTA};
use auxft::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "auxft",
    version,
    about = "Auxiliary feature translation for few-shot detector personalization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distill a translator from oracle features and write raw and EMA checkpoints.
    Train(TrainArgs),
    /// Run few-shot episodes and write per-episode results plus a mean ± std summary.
    Eval(EvalArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Render auxiliary and oracle features of one image as color images.
    Viz(VizArgs),
    /// Pool one embedding per box and dump them with their metadata.
    Pool(PoolArgs),
    /// Fit a prototype store from fine-labeled embedding dumps.
    FslFit(FslFitArgs),
    /// Relabel embedding dumps with a fitted prototype store.
    FslPredict(FslPredictArgs),
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_residual_flag(s: &str) -> Result<usize, String> {
    parse_residual(s).map_err(|e| e.to_string())
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// linear-1x1, linear-3x3, linear-5x5 or nonlinear-3x3.
    #[arg(long, default_value = "linear-3x3", value_parser = parse_variant)]
    variant: Variant,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1000)]
    warmup: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    wd: f64,
    #[arg(long, default_value_t = 0.999)]
    ema_decay: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Resampler switching band around a resize factor of 1.
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeatureKind {
    Aux,
    Raw,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightsArg {
    Raw,
    Ema,
}

#[derive(Clone, Copy, ValueEnum)]
enum FallbackArg {
    Prototypes,
    SupportVectors,
}

#[derive(Args)]
struct FeatureArgs {
    /// Map that embeddings are pooled from.
    #[arg(long, value_enum, default_value = "aux")]
    features: FeatureKind,
    /// Auxiliary level to pool from (R1 uses every pyramid level).
    #[arg(long, default_value = "R1", value_parser = parse_residual_flag)]
    ablate_residual: usize,
    /// Detector level (1 = shallowest) used with --features raw.
    #[arg(long, default_value_t = 1)]
    raw_level: usize,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl FeatureArgs {
    fn source(&self) -> Result<FeatureSource, Error> {
        Ok(match self.features {
            FeatureKind::Aux => FeatureSource::Aux(self.ablate_residual),
            FeatureKind::Raw => {
                if self.raw_level == 0 {
                    return Err(Error::Config("--raw-level counts from 1".into()));
                }
                FeatureSource::Raw(self.raw_level - 1)
            }
            FeatureKind::Oracle => FeatureSource::Oracle,
        })
    }
}

#[derive(Args)]
struct FslArgs {
    /// Comma-separated subset of cos, l1, l2.
    #[arg(long, default_value = "cos,l1,l2")]
    distances: String,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    /// How the per-coarse-class fallback centroid is formed.
    #[arg(long, value_enum, default_value = "prototypes")]
    fallback: FallbackArg,
}

impl FslArgs {
    fn config(&self) -> Result<FslConfig, Error> {
        Ok(FslConfig {
            distances: parse_distances(&self.distances)?,
            epsilon: self.epsilon,
            fallback: match self.fallback {
                FallbackArg::Prototypes => FallbackMode::Prototypes,
                FallbackArg::SupportVectors => FallbackMode::SupportVectors,
            },
        })
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory receiving results.csv, summary.json and summary.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    features: FeatureArgs,
    #[arg(long, value_enum, default_value = "ema")]
    weights: WeightsArg,
    #[command(flatten)]
    fsl: FslArgs,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKindArg {
    /// Collapsed detector features with a descriptive oracle.
    Collapse,
    /// Single-level features with an exactly linear oracle.
    LinearOracle,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "collapse")]
    kind: SynthKindArg,
    /// JSON file with generator settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sigma_c: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    num_coarse: Option<usize>,
    #[arg(long)]
    fine_per_coarse: Option<usize>,
    #[arg(long)]
    samples_per_fine: Option<usize>,
    #[arg(long)]
    nuisance: Option<f64>,
    #[arg(long)]
    cell_noise: Option<f64>,
    #[arg(long)]
    det_jitter: Option<f64>,
    /// Number of images for the linear-oracle generator.
    #[arg(long)]
    images: Option<usize>,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Image id; defaults to the first image of the manifest.
    #[arg(long)]
    image: Option<String>,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Nearest-neighbor upscaling factor of the written images.
    #[arg(long, default_value_t = 8)]
    scale: u32,
}

#[derive(Clone, Copy, ValueEnum)]
enum BoxesArg {
    Detections,
    Gt,
}

#[derive(Args)]
struct PoolArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    features: FeatureArgs,
    #[arg(long, value_enum, default_value = "detections")]
    boxes: BoxesArg,
}

#[derive(Args)]
struct FslFitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of embedding dumps pooled from ground-truth boxes.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    fsl: FslArgs,
}

#[derive(Args)]
struct FslPredictArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Shape(_) => 3,
        Error::Validation(_)
        | Error::Config(_)
        | Error::Schema(_)
        | Error::Reference(_)
        | Error::Domain(_)
        | Error::Dataset(_)
        | Error::Label(_) => 2,
        _ => 1,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn synth_kind(a: &SynthArgs) -> Result<SynthKind, Error> {
    match a.kind {
        SynthKindArg::Collapse => {
            let mut c: SynthConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => SynthConfig::default(),
            };
            macro_rules! set {
                ($($f:ident),*) => { $(if let Some(v) = a.$f { c.$f = v; })* };
            }
            set!(
                seed,
                sigma_c,
                margin,
                num_coarse,
                fine_per_coarse,
                samples_per_fine,
                nuisance,
                cell_noise,
                det_jitter
            );
            if a.images.is_some() {
                return Err(Error::Config(
                    "--images applies to the linear-oracle generator".into(),
                ));
            }
            c.validate()?;
            Ok(SynthKind::Collapse(c))
        }
        SynthKindArg::LinearOracle => {
            let mut c: LinearOracleConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => LinearOracleConfig::default(),
            };
            if let Some(v) = a.seed {
                c.seed = v;
            }
            if let Some(v) = a.images {
                c.images = v;
            }
            Ok(SynthKind::LinearOracle(c))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(a) => {
            let config = TrainConfig {
                variant: a.variant,
                epochs: a.epochs,
                warmup_iters: a.warmup,
                lr_max: a.lr,
                wd_max: a.wd,
                ema_decay: a.ema_decay,
                batch_size: a.batch_size,
                seed: a.seed,
                delta: a.delta,
                threads: a.threads,
            };
            eprintln!("training {} translator", config.variant);
            let report = cmd_train(&a.manifest, &a.out, &config)?;
            eprintln!(
                "{} iterations; final loss {:.6} (raw), {:.6} (ema); checkpoint in {}",
                report.trace.len(),
                report.final_loss,
                report.final_ema_loss,
                a.out.display()
            );
        }
        Command::Eval(a) => {
            let options = EvalOptions {
                shots: a.shots,
                episodes: a.episodes,
                seed: a.seed,
                source: a.features.source()?,
                weights: match a.weights {
                    WeightsArg::Raw => WeightsChoice::Raw,
                    WeightsArg::Ema => WeightsChoice::Ema,
                },
                fsl: a.fsl.config()?,
                threads: a.threads,
            };
            eprintln!(
                "evaluating {} episodes, {}-shot",
                options.episodes, options.shots
            );
            let outcome = cmd_eval(
                &a.manifest,
                a.features.checkpoint.as_deref(),
                &a.out,
                &options,
            )?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            eprint!("{}", outcome.summary.summary_text());
        }
        Command::Synth(a) => {
            let kind = synth_kind(&a)?;
            let m = cmd_synth(&kind, &a.out)?;
            eprintln!(
                "wrote {} images to {}",
                m.images.len(),
                a.out.join("manifest.json").display()
            );
        }
        Command::Viz(a) => {
            let config = ColorizeConfig {
                iterations: a.iterations,
                lr: a.lr,
                seed: a.seed,
            };
            let written = cmd_viz(
                &a.manifest,
                &a.checkpoint,
                a.image.as_deref(),
                &a.out,
                &config,
                a.scale,
            )?;
            for p in written {
                eprintln!("wrote {}", p.display());
            }
        }
        Command::Pool(a) => {
            let boxes = match a.boxes {
                BoxesArg::Detections => PoolBoxes::Detections,
                BoxesArg::Gt => PoolBoxes::GroundTruth,
            };
            let n = cmd_pool(
                &a.manifest,
                a.features.checkpoint.as_deref(),
                a.features.source()?,
                boxes,
                &a.out,
            )?;
            eprintln!("pooled {n} boxes into {}", a.out.display());
        }
        Command::FslFit(a) => {
            let store = cmd_fsl_fit(&a.manifest, &a.embeddings, &a.fsl.config()?, &a.out)?;
            eprintln!(
                "fitted {} coarse classes of dimension {} into {}",
                store.coarse_classes().count(),
                store.dim(),
                a.out.display()
            );
        }
        Command::FslPredict(a) => {
            let n = cmd_fsl_predict(&a.store, &a.embeddings, &a.out)?;
            eprintln!("relabeled {n} embeddings into {}", a.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
