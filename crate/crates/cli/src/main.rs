//! `mgflow`: inference, training, verification and box statistics.
//!
//! Exit codes: 0 ok, 1 usage or configuration error, 2 data error,
//! 3 verification failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mgflow::boxes::TagSpec;
use mgflow::{FusionStrategy, MergeMethod, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "mgflow",
    version,
    about = "Multi-granularity vision token flow toolkit"
)]
struct Cli {
    /// Log more (repeatable); RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the full pipeline on a scene, box file or video and print a JSON report.
    Infer(InferArgs),
    /// Two-stage training on a JSONL dataset; writes a checkpoint and loss CSV.
    Train(TrainArgs),
    /// Run the self-check battery.
    Verify(VerifyArgs),
    /// Histogram of boxes per image over a corpus of box files.
    Stats(StatsArgs),
    /// Write synthetic scenes, videos, datasets or box corpora.
    GenData(GenDataArgs),
}

/// Config file and flag overrides; flags win over the file, the file over
/// built-in defaults.
#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    nms_iou: Option<f64>,
    #[arg(long)]
    score_floor: Option<f64>,
    #[arg(long)]
    max_boxes: Option<usize>,
    /// Let boxes of different labels suppress each other.
    #[arg(long)]
    class_agnostic: bool,
    /// Tag source: synthetic, coco80 or file:PATH.
    #[arg(long)]
    tags: Option<TagSpec>,
    #[arg(long)]
    strategy: Option<FusionStrategy>,
    #[arg(long)]
    merge: Option<MergeMethod>,
    /// Worker threads for per-frame and per-sample work.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

impl ConfigArgs {
    fn resolve(&self) -> mgflow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.nms_iou {
            cfg.boxes.nms_iou = v;
        }
        if let Some(v) = self.score_floor {
            cfg.boxes.score_floor = v;
        }
        if let Some(v) = self.max_boxes {
            cfg.boxes.max_boxes = v;
        }
        if self.class_agnostic {
            cfg.boxes.class_aware = false;
        }
        if let Some(t) = &self.tags {
            cfg.boxes.tags = t.clone();
        }
        if let Some(s) = self.strategy {
            cfg.fusion.strategy = s;
        }
        if let Some(m) = self.merge {
            cfg.model.merge = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Scene descriptor JSON.
    #[arg(long, group = "input")]
    scene: Option<PathBuf>,
    /// Generate a random scene from this seed.
    #[arg(long, group = "input")]
    scene_seed: Option<u64>,
    /// JSON array of scene descriptors, one per frame.
    #[arg(long, group = "input")]
    video: Option<PathBuf>,
    /// Precomputed detections; alone, they are paired with a noise image.
    #[arg(long)]
    boxes: Option<PathBuf>,
    /// Objects in a generated scene.
    #[arg(long, default_value_t = 3)]
    objects: usize,
    /// Prompt token ids, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "40")]
    text: Vec<usize>,
    /// Score this answer (comma separated ids) instead of decoding.
    #[arg(long, value_delimiter = ',')]
    answer: Option<Vec<usize>>,
    /// Tokens to decode greedily when no answer is given.
    #[arg(long, default_value_t = 4)]
    decode: usize,
    /// Trained checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Leave stage timings out so reruns are byte-identical.
    #[arg(long)]
    no_timings: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    /// Stop after stage one.
    Pretrain,
    /// Both stages.
    Both,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// JSONL dataset.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV; defaults to OUT/loss.csv.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = StageArg::Both)]
    stage: StageArg,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    finetune_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run only these suites (repeatable).
    #[arg(long = "suite")]
    suites: Vec<String>,
    /// Seeded instances per gradient case.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Test hook: perturb one analytic gradient.
    #[arg(long, value_enum)]
    inject_fault: Option<FaultArg>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FaultArg {
    Gradient,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Box files or directories of them.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
    /// Also write the histogram as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DataKind {
    /// JSONL training set.
    Dataset,
    /// One scene descriptor.
    Scene,
    /// JSON array of frames with drifting objects.
    Video,
    /// Directory of box files produced by the box pipeline.
    Boxes,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(value_enum)]
    kind: DataKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples, frames or box files.
    #[arg(long, default_value_t = 32)]
    count: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 256)]
    extent: usize,
    /// Objects per scene (scene and video kinds).
    #[arg(long, default_value_t = 3)]
    objects: usize,
}

/// Classified failure carrying its exit code.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Verify,
}

impl From<mgflow::Error> for Failure {
    fn from(e: mgflow::Error) -> Self {
        if is_usage(&e) {
            Failure::Usage(e.into())
        } else {
            Failure::Data(e.into())
        }
    }
}

fn is_usage(e: &mgflow::Error) -> bool {
    match e {
        mgflow::Error::Config(_) => true,
        mgflow::Error::Stage { source, .. } => is_usage(source),
        _ => false,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Infer(a) => commands::infer(a),
        Command::Train(a) => commands::train(a),
        Command::Verify(a) => commands::verify(a),
        Command::Stats(a) => commands::stats(a),
        Command::GenData(a) => commands::gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Verify) => ExitCode::from(3),
    }
}
