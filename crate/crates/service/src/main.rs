use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use lesionscreen_core::classifier::BackboneSource;
use lesionscreen_core::dataset::{
    self, augment_records, balance, ingest, originals_only_pool, split, FsStore, SplitRatio,
};
use lesionscreen_core::evaluation::{evaluate, standard_runs};
use lesionscreen_core::locator::WeightsLocator;
use lesionscreen_core::pipeline::train_on_manifests;
use lesionscreen_core::synthetic::texture_records;
use lesionscreen_core::{
    build_model, run_ablation, BackboneSpec, DatasetManifest, HeadSpec, ImageClassifier, Model,
    PipelineConfig, ScreeningImage, Screener, Split, Stages, TrainConfig,
};
use lesionscreen_service::config::ServiceConfig;
use lesionscreen_service::server::{router, serve};
use lesionscreen_service::{build_state, load_stages, BoxError};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "lesionscreen", version, about = "Staged skin-lesion screening")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and inspect dataset manifests.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Write a synthetic two-class texture dataset.
    Synth(SynthArgs),
    /// Train the classifier head and save a model directory.
    Train(TrainArgs),
    /// Screen one image and print the result as JSON.
    Screen(ScreenArgs),
    /// Weighted metrics of a model on a manifest.
    Evaluate(EvaluateArgs),
    /// The nine-row stage ablation.
    Ablate(AblateArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct ManifestIo {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory that manifest paths are relative to.
    #[arg(long, default_value = ".")]
    root: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Validate records against their files and fill in checksums.
    Ingest(ManifestIo),
    /// Add augmented children of the given records.
    Augment {
        #[command(flatten)]
        io: ManifestIo,
        #[arg(long, required = true)]
        id: Vec<String>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Augment the minority class of one split until both classes match.
    Balance {
        #[command(flatten)]
        io: ManifestIo,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Partition the val/test pool into validation and test.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.65)]
        validation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Drop augmented records from the pool first.
        #[arg(long)]
        original_only: bool,
    },
    /// Combine negatives and original monkeypox records into an external set.
    AssembleExternal {
        #[arg(long)]
        negatives: PathBuf,
        #[arg(long)]
        positives: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-split counts, lineage and leakage checks.
    Audit {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    root: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 224)]
    side: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "tex")]
    prefix: String,
}

#[derive(Args)]
struct BackendArgs {
    /// Salient-object segmentation weights (path or URL).
    #[arg(long, env = "LESIONSCREEN_BACKGROUND_WEIGHTS")]
    background_weights: Option<String>,
    /// Skin-region segmentation weights (path or URL).
    #[arg(long, env = "LESIONSCREEN_SKIN_WEIGHTS")]
    skin_weights: Option<String>,
}

impl BackendArgs {
    fn stages(&self) -> Result<Stages, BoxError> {
        let bg = self.background_weights.as_deref().map(WeightsLocator::new);
        let skin = self.skin_weights.as_deref().map(WeightsLocator::new);
        Ok(load_stages(bg.as_ref(), skin.as_ref())?)
    }
}

#[derive(Args)]
struct StageToggles {
    #[arg(long)]
    no_restoration: bool,
    #[arg(long)]
    no_bg_removal: bool,
    #[arg(long)]
    no_skin_seg: bool,
}

impl StageToggles {
    fn config(&self) -> PipelineConfig {
        PipelineConfig::with_stages(!self.no_restoration, !self.no_bg_removal, !self.no_skin_seg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long, default_value = ".")]
    root: PathBuf,
    /// Output model directory.
    #[arg(long)]
    out: PathBuf,
    /// Pretrained backbone weights; a seeded random backbone otherwise.
    #[arg(long)]
    backbone_weights: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Train on raw images instead of segmented ones.
    #[arg(long)]
    no_segment_training: bool,
    #[command(flatten)]
    backends: BackendArgs,
    #[command(flatten)]
    toggles: StageToggles,
}

#[derive(Args)]
struct ScreenArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    toggles: StageToggles,
    #[command(flatten)]
    backends: BackendArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = ".")]
    root: PathBuf,
    /// Only records of this split.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    toggles: StageToggles,
    #[command(flatten)]
    backends: BackendArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Model for the first row (all stages off).
    #[arg(long)]
    alternate_model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = ".")]
    root: PathBuf,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    backends: BackendArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    port: Option<u16>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn,lesionscreen_service=info")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), BoxError> {
    match cli.command {
        Command::Dataset(cmd) => run_dataset(cmd),
        Command::Synth(a) => {
            let mut store = FsStore::new(&a.root);
            let records = texture_records(&mut store, &a.prefix, Split::parse(&a.split)?, a.n, a.seed, a.side)?;
            let manifest = ingest(records, &store)?.manifest;
            manifest.save(&a.out)?;
            println!("wrote {} records to {}", manifest.len(), a.out.display());
            Ok(())
        }
        Command::Train(a) => run_train(a),
        Command::Screen(a) => {
            let model = Arc::new(Model::load(&a.model)?);
            let screener = Screener::new(model, a.backends.stages()?, a.toggles.config())?;
            let bytes = std::fs::read(&a.image).map_err(|e| format!("{}: {e}", a.image.display()))?;
            let image = ScreeningImage::decode(&bytes, a.image.display().to_string())?;
            let result = screener.screen(&image)?;
            println!("{}", serde_json::to_string(&result)?);
            Ok(())
        }
        Command::Evaluate(a) => {
            let model = Arc::new(Model::load(&a.model)?);
            let screener = Screener::new(model, a.backends.stages()?, a.toggles.config())?;
            let manifest = select_split(DatasetManifest::load(&a.manifest)?, a.split.as_deref())?;
            let report = evaluate(&screener, &manifest, &FsStore::new(&a.root))?;
            if a.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{report}");
            }
            Ok(())
        }
        Command::Ablate(a) => run_ablate(a),
        Command::Serve(a) => {
            let mut cfg = ServiceConfig::load(a.config.as_deref())?;
            if let Some(p) = a.port {
                cfg.port = p;
            }
            let state = Arc::new(build_state(&cfg)?);
            let app = router(state, cfg.ui_dir.as_deref());
            let addr = format!("{}:{}", cfg.bind, cfg.port);
            tokio::runtime::Runtime::new()?.block_on(serve(app, &addr))?;
            Ok(())
        }
    }
}

fn select_split(manifest: DatasetManifest, split: Option<&str>) -> Result<DatasetManifest, BoxError> {
    match split {
        None => Ok(manifest),
        Some(s) => {
            let s = Split::parse(s)?;
            Ok(DatasetManifest::new(manifest.in_split(s).cloned().collect())?)
        }
    }
}

fn run_dataset(cmd: DatasetCommand) -> Result<(), BoxError> {
    let save = |m: &DatasetManifest, out: &Path| -> Result<(), BoxError> {
        m.save(out)?;
        println!("wrote {} records to {}", m.len(), out.display());
        Ok(())
    };
    match cmd {
        DatasetCommand::Ingest(io) => {
            let records = DatasetManifest::read_jsonl(std::io::BufReader::new(std::fs::File::open(&io.manifest)?))?;
            let ingested = ingest(records, &FsStore::new(&io.root))?;
            for group in &ingested.duplicate_checksums {
                eprintln!("warning: identical content: {}", group.join(", "));
            }
            save(&ingested.manifest, &io.out)
        }
        DatasetCommand::Augment { io, id, count, seed } => {
            let manifest = DatasetManifest::load(&io.manifest)?;
            let out = augment_records(&manifest, &id, count, seed, &mut FsStore::new(&io.root))?;
            save(&out, &io.out)
        }
        DatasetCommand::Balance { io, split, seed } => {
            let manifest = DatasetManifest::load(&io.manifest)?;
            let out = balance(&manifest, Split::parse(&split)?, seed, &mut FsStore::new(&io.root))?;
            save(&out, &io.out)
        }
        DatasetCommand::Split {
            manifest,
            out,
            validation,
            seed,
            original_only,
        } => {
            let mut m = DatasetManifest::load(&manifest)?;
            if original_only {
                m = originals_only_pool(&m)?;
            }
            let result = split(&m, SplitRatio::new(validation, 1.0 - validation)?, seed)?;
            save(&result, &out)
        }
        DatasetCommand::AssembleExternal {
            negatives,
            positives,
            out,
        } => {
            let neg = DatasetManifest::load(&negatives)?.into_records();
            let pos = DatasetManifest::load(&positives)?.into_records();
            save(&dataset::assemble_external(neg, pos)?, &out)
        }
        DatasetCommand::Audit { manifest, json } => {
            let records = DatasetManifest::read_jsonl(std::io::BufReader::new(std::fs::File::open(&manifest)?))?;
            let report = dataset::audit(&records);
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{report}");
            }
            if report.is_clean() {
                Ok(())
            } else {
                Err("audit found lineage problems".into())
            }
        }
    }
}

fn run_train(a: TrainArgs) -> Result<(), BoxError> {
    let mut cfg = TrainConfig {
        seed: a.seed,
        segment_training_images: !a.no_segment_training,
        ..TrainConfig::default()
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    let source = match &a.backbone_weights {
        Some(loc) => BackboneSource::Pretrained(WeightsLocator::new(loc)),
        None => {
            tracing::warn!("no --backbone-weights given; using a seeded random backbone");
            BackboneSource::Random {
                spec: BackboneSpec::default(),
                seed: a.seed,
            }
        }
    };
    let model = build_model(&HeadSpec::default(), source, a.seed)?;
    let store = FsStore::new(&a.root);
    let trained = train_on_manifests(
        model,
        &DatasetManifest::load(&a.train)?,
        &DatasetManifest::load(&a.val)?,
        &store,
        &cfg,
        &a.backends.stages()?,
        &a.toggles.config(),
    )?;
    for e in &trained.history.epochs {
        println!(
            "epoch {:>2}  lr {:.6}  loss {:.4}  acc {:.4}  val_loss {:.4}  val_acc {:.4}",
            e.epoch, e.learning_rate, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy
        );
    }
    let meta = trained.save(&a.out)?;
    println!("saved {} to {}", meta.model_version, a.out.display());
    Ok(())
}

fn run_ablate(a: AblateArgs) -> Result<(), BoxError> {
    let stages = a.backends.stages()?;
    let primary = Arc::new(Model::load(&a.model)?);
    let alternate = Arc::new(Model::load(&a.alternate_model)?);
    let primary_name = a.model.display().to_string();
    let alternate_name = a.alternate_model.display().to_string();
    let runs = standard_runs(&primary_name, &alternate_name);
    let manifest = select_split(DatasetManifest::load(&a.manifest)?, a.split.as_deref())?;
    let report = run_ablation(
        &runs,
        |run| {
            let model = if run.model == alternate_name && run.config == PipelineConfig::classifier_only() {
                alternate.clone()
            } else {
                primary.clone()
            };
            let screener = Screener::new(model, stages.clone(), run.config.clone())?;
            Ok(Arc::new(screener) as Arc<dyn ImageClassifier>)
        },
        &manifest,
        &FsStore::new(&a.root),
    )?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{report}");
    }
    Ok(())
}
