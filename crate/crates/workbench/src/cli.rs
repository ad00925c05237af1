//! Command-line front end.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fissura::backend::{load_backend, BackendDescriptor, ReferenceBackend};
use fissura::detector::DetectionConfig;
use fissura::evaluator::{evaluate_directory, metrics};
use fissura::trainer::{load_model, TrainConfig};

use crate::commands;
use crate::extract::extract_features;
use crate::layout::ProjectLayout;
use crate::service::{self, ServiceConfig};

/// Environment variable naming the project root; takes precedence over `--project`.
pub const PROJECT_ENV: &str = "FISSURA_PROJECT";

#[derive(Debug, Parser)]
#[command(name = "fissura", version, about = "Crack detection workbench")]
pub struct Cli {
    /// Project root.
    #[arg(long, global = true, value_name = "DIR")]
    pub project: Option<PathBuf>,

    /// Log progress as well as warnings.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create the project directories.
    Init {
        /// Comma-separated class labels to create under datapoints/.
        #[arg(long, value_delimiter = ',', default_value = "Background,Crack")]
        labels: Vec<String>,
    },
    /// Serve the annotation API and UI.
    Annotate {
        #[arg(long)]
        serve: bool,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Directory of the built annotator UI.
        #[arg(long, value_name = "DIR")]
        ui_dir: Option<PathBuf>,
        /// Side of the saved crops.
        #[arg(long, default_value_t = 224)]
        tile_size: u32,
    },
    /// Embed every crop under datapoints/ into a feature store.
    ExtractFeatures {
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(1..))]
        batch_size: u64,
        /// Scale factor to record when crop names carry none.
        #[arg(long)]
        scale: Option<f64>,
        /// Store path [default: features/dataset.kfs].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid-search the classifier head and save the best model.
    Train {
        /// Store path [default: features/dataset.kfs].
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,1,10,100,1000,10000")]
        c_grid: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        folds: usize,
        #[arg(long, default_value_t = 0.75)]
        split: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        max_iterations: usize,
        /// Model path [default: models/model.klm].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Slide the model over images and write masks, overlays and predictions.
    Detect {
        #[command(flatten)]
        detection: DetectionArgs,
        /// Read PNG inputs row by row instead of decoding them whole.
        #[arg(long)]
        stream: bool,
    },
    /// Detect, then refine each stage-1 label with its own model.
    DetectStaged {
        #[command(flatten)]
        detection: DetectionArgs,
        /// Directory of `<label>.klm` second-stage models [default: models/stages].
        #[arg(long)]
        stage2_dir: Option<PathBuf>,
    },
    /// Score a model on a directory of labelled crops.
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directory with one subdirectory of crops per label.
        #[arg(long)]
        dataset_dir: PathBuf,
        #[arg(long, default_value_t = 0.5, value_parser = probability)]
        threshold: f64,
        /// Label whose recall and precision are reported [default: the last label].
        #[arg(long)]
        positive: Option<String>,
        #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(1..))]
        batch_size: u64,
        /// Also write the confusion matrix as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Built-in backend: `reference` or `vgg16`.
    #[arg(long)]
    pub backend: Option<String>,
    /// ONNX file of the convolutional base.
    #[arg(long, value_name = "FILE")]
    pub model_asset: Option<PathBuf>,
    /// JSON backend descriptor; overrides the two flags above.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["backend", "model_asset"])]
    pub backend_config: Option<PathBuf>,
}

impl BackendArgs {
    /// The descriptor the flags name, if any.
    pub fn descriptor(&self) -> anyhow::Result<Option<BackendDescriptor>> {
        if let Some(path) = &self.backend_config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let d = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            return Ok(Some(d));
        }
        match (self.backend.as_deref(), &self.model_asset) {
            (None, None) => Ok(None),
            (Some(ReferenceBackend::NAME), None) => Ok(Some(BackendDescriptor::reference())),
            (Some(ReferenceBackend::NAME), Some(_)) => {
                bail!("the reference backend takes no model asset")
            }
            (Some("vgg16") | None, Some(asset)) => Ok(Some(BackendDescriptor::vgg16(asset))),
            (Some("vgg16"), None) => bail!("--backend vgg16 needs --model-asset"),
            (Some(other), _) => {
                bail!("unknown backend `{other}`; use reference, vgg16 or --backend-config")
            }
        }
    }
}

#[derive(Debug, Args)]
pub struct DetectionArgs {
    /// Model path [default: models/model.klm].
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Image file or directory of images.
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    /// Output root; each image gets a subdirectory [default: output].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95, value_parser = probability)]
    pub threshold: f64,
    /// Window step as a fraction of the window side.
    #[arg(long, default_value_t = 0.60, value_parser = probability)]
    pub step: f64,
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: u64,
    #[command(flatten)]
    pub backend: BackendArgs,
}

impl DetectionArgs {
    fn config(&self) -> DetectionConfig {
        DetectionConfig {
            confidence_threshold: self.threshold,
            step_fraction: self.step,
            batch_size: self.batch_size as usize,
        }
    }
}

/// A value in (0, 1].
fn probability(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1]"))
    }
}

/// `FISSURA_PROJECT` if set, else `--project`, else the working directory.
pub fn project_root(flag: Option<&Path>, env: Option<OsString>) -> PathBuf {
    match env.filter(|v| !v.is_empty()) {
        Some(v) => PathBuf::from(v),
        None => flag.map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    }
}

fn init_logging(verbose: bool) {
    let level = if verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let root = project_root(cli.project.as_deref(), std::env::var_os(PROJECT_ENV));
    let or_default = |p: Option<PathBuf>, default: &str| p.unwrap_or_else(|| root.join(default));
    match cli.command {
        Command::Init { labels } => {
            let layout = ProjectLayout::init(&root, &labels)?;
            println!("initialised project at {}", layout.root().display());
        }
        Command::Annotate {
            serve,
            bind,
            ui_dir,
            tile_size,
        } => {
            let layout = ProjectLayout::open(&root)?;
            if !serve {
                for id in layout.pending_images()? {
                    println!("{id}");
                }
                eprintln!("pass --serve to start the annotation service");
                return Ok(());
            }
            let config = ServiceConfig { tile_size, ui_dir };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = service::bind(bind).await?;
                println!(
                    "serving {} on http://{}",
                    layout.root().display(),
                    listener.local_addr()?
                );
                service::serve(listener, layout, config).await
            })?;
        }
        Command::ExtractFeatures {
            backend,
            batch_size,
            scale,
            out,
        } => {
            let layout = ProjectLayout::open(&root)?;
            let descriptor = backend
                .descriptor()?
                .unwrap_or_else(BackendDescriptor::reference);
            let backend = load_backend(&descriptor)?;
            let out = or_default(out, "features/dataset.kfs");
            let summary =
                extract_features(&layout, backend.as_ref(), &out, batch_size as usize, scale)?;
            for (label, n) in summary
                .meta
                .label_names
                .iter()
                .zip(&summary.meta.label_counts)
            {
                println!("{label}: {n} crops");
            }
            if !summary.skipped.is_empty() {
                println!("skipped {} unreadable crops", summary.skipped.len());
            }
            println!("wrote {}", out.display());
        }
        Command::Train {
            features,
            c_grid,
            folds,
            split,
            seed,
            max_iterations,
            out,
        } => {
            let config = TrainConfig {
                c_grid,
                folds,
                split_ratio: split,
                shuffle_seed: seed,
                max_iterations,
                ..TrainConfig::default()
            };
            let features = or_default(features, "features/dataset.kfs");
            let out = or_default(out, "models/model.klm");
            let (model, report) = commands::train(&features, &config, &out)?;
            print!("{report}");
            println!("chosen C: {}", model.c);
            if let Some(acc) = report.holdout_accuracy().value() {
                println!("holdout accuracy: {acc:.4}");
            }
            println!("wrote {}", out.display());
        }
        Command::Detect { detection, stream } => {
            let model = load_model(or_default(detection.model.clone(), "models/model.klm"))?;
            let backend = commands::backend_for_model(&model, detection.backend.descriptor()?)?;
            let out = or_default(detection.out.clone(), "output");
            let config = detection.config();
            for input in commands::detection_inputs(&detection.input)? {
                let d =
                    commands::detect_file(&model, backend.as_ref(), &config, &input, &out, stream)
                        .with_context(|| input.display().to_string())?;
                report_detection(&d.input, &d.dir, &d.result);
            }
        }
        Command::DetectStaged {
            detection,
            stage2_dir,
        } => {
            let model = load_model(or_default(detection.model.clone(), "models/model.klm"))?;
            let stages = commands::load_stage_models(&or_default(stage2_dir, "models/stages"))?;
            let backend = commands::backend_for_model(&model, detection.backend.descriptor()?)?;
            let out = or_default(detection.out.clone(), "output");
            let config = detection.config();
            for input in commands::detection_inputs(&detection.input)? {
                let (d, refined) = commands::detect_staged_file(
                    &model,
                    &stages,
                    backend.as_ref(),
                    &config,
                    &input,
                    &out,
                )
                .with_context(|| input.display().to_string())?;
                report_detection(&d.input, &d.dir, &d.result);
                for (label, r) in &refined {
                    report_detection(Path::new(label), &d.dir.join(label), r);
                }
            }
        }
        Command::Evaluate {
            model,
            dataset_dir,
            threshold,
            positive,
            batch_size,
            csv,
            backend,
        } => {
            let model = load_model(or_default(model, "models/model.klm"))?;
            let backend = commands::backend_for_model(&model, backend.descriptor()?)?;
            let report = evaluate_directory(
                &model,
                backend.as_ref(),
                &dataset_dir,
                threshold,
                batch_size as usize,
            )?;
            let positive = match positive {
                Some(label) => model.label_index(&label).with_context(|| {
                    format!("`{label}` is not a model label {:?}", model.label_names)
                })?,
                None => model.num_classes() - 1,
            };
            let m = metrics(&report.confusion, positive)?;
            print!("{}", report.confusion.render_table());
            let show = |r: fissura::evaluator::Ratio| {
                r.value().map_or("n/a".to_string(), |v| format!("{v:.4}"))
            };
            println!("accuracy: {}", show(m.accuracy));
            let label = &model.label_names[positive];
            println!("{label} recall: {}", show(m.recall));
            println!("{label} precision: {}", show(m.precision));
            if report.rejected > 0 {
                println!("below threshold: {}", report.rejected);
            }
            if !report.skipped.is_empty() {
                println!("skipped unreadable: {}", report.skipped.len());
            }
            if let Some(path) = csv {
                std::fs::write(&path, report.confusion.to_csv())?;
            }
        }
    }
    Ok(())
}

fn report_detection(input: &Path, dir: &Path, r: &fissura::detector::DetectionResult) {
    let boxes: Vec<String> = r
        .classes
        .iter()
        .map(|c| format!("{} {}", c.label, c.boxes.len()))
        .collect();
    println!(
        "{}: {} windows of {} px, boxes: {} -> {}",
        input.display(),
        r.windows.len(),
        r.window,
        boxes.join(", "),
        dir.display()
    );
}

/// Parses the process arguments and runs. Usage errors exit with 2, failures
/// with 1 after a one-line message on stderr.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
