mod commands;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tplconv::pruning::SaliencyMeasure;
use tplconv::TransformFamily;

use config::{ConvertSection, DataSection, FileConfig};

#[derive(Debug, Parser)]
#[command(name = "tplconv", version, about = "Template convolution toolkit")]
struct Cli {
    /// JSON config file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the rayon default.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Numeric precision; only f64 is supported.
    #[arg(long, global = true)]
    precision: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare the reference and two-stage forward passes on random layers.
    EquivCheck(EquivArgs),
    /// Train a small CNN, optionally with progressive pruning.
    Train(TrainArgs),
    /// Convert a checkpoint to template layers in one shot.
    Prune(PruneArgs),
    /// Time the dense and two-stage paths across pruning rates.
    Bench(BenchArgs),
    /// Per-layer MAC and parameter report.
    CostReport(ConvertArgs),
    /// Render original, reconstructed and pruned filters as PGM images.
    VizFilters(ConvertArgs),
}

#[derive(Debug, Args)]
struct EquivArgs {
    #[arg(long)]
    configs: Option<usize>,
    /// Perturb the two-stage path so that every case must fail.
    #[arg(long)]
    inject_fault: bool,
}

#[derive(Debug, Args)]
struct PruneFlags {
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    min_templates: Option<usize>,
    /// Saliency measure: mag or taylor.
    #[arg(long)]
    measure: Option<SaliencyMeasure>,
    /// Transform family: scalar, rotation or affine.
    #[arg(long)]
    family: Option<TransformFamily>,
    #[arg(long)]
    groups: Option<usize>,
    /// Give every group its own templates.
    #[arg(long)]
    independent: bool,
}

#[derive(Debug, Args)]
struct DataFlags {
    /// Use the synthetic dataset.
    #[arg(long, conflicts_with = "data")]
    synthetic: bool,
    /// CIFAR-10 binary directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    prune: PruneFlags,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    ramp_epochs: Option<usize>,
    /// Enable flip, crop and rotation augmentation.
    #[arg(long)]
    augment: bool,
    /// Convolution widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    prune: PruneFlags,
    #[arg(long)]
    probe_batch: Option<usize>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Pruning rates, comma separated.
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    prune: PruneFlags,
    #[arg(long)]
    in_channels: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
}

/// Failure classes, mapped to process exit codes.
#[derive(Debug)]
pub enum Failure {
    Assertion(String),
    Usage(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Assertion(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Assertion(m) | Failure::Usage(m) | Failure::Io(m) => m,
        }
    }
}

impl From<tplconv::Error> for Failure {
    fn from(e: tplconv::Error) -> Self {
        match e {
            tplconv::Error::Io(_) | tplconv::Error::Format(_) => Failure::Io(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

pub type Outcome = Result<(), Failure>;

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn apply_data(section: &mut DataSection, flags: DataFlags) {
    if flags.synthetic {
        section.synthetic = true;
        section.dir = None;
    }
    if let Some(dir) = flags.data {
        section.synthetic = false;
        section.dir = Some(dir);
    }
    if let Some(n) = flags.samples {
        section.samples = n;
    }
    if let Some(c) = flags.classes {
        section.classes = c;
    }
}

fn apply_convert(section: &mut ConvertSection, args: ConvertArgs) {
    let f = args.prune;
    section.checkpoint = args.checkpoint.or(section.checkpoint.take());
    section.rate = f.rate.unwrap_or(section.rate);
    section.min_templates = f.min_templates.unwrap_or(section.min_templates);
    section.measure = f.measure.unwrap_or(section.measure);
    section.convert.family = f.family.unwrap_or(section.convert.family);
    section.convert.groups = f.groups.unwrap_or(section.convert.groups);
    section.convert.independent_group_templates |= f.independent;
    section.in_channels = args.in_channels.unwrap_or(section.in_channels);
    section.image_size = args.image_size.unwrap_or(section.image_size);
    section.classes = args.classes.unwrap_or(section.classes);
    if let Some(w) = args.widths {
        section.widths = w;
    }
}

fn load_file(path: Option<&Path>) -> Result<FileConfig, Failure> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Outcome {
    let file = load_file(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let threads = cli.threads.or(file.threads);
    let out = cli.out.or(file.out.clone()).unwrap_or_else(|| PathBuf::from("tplconv-out"));
    let precision = cli.precision.or(file.precision.clone()).unwrap_or_else(|| "f64".into());
    if precision != "f64" {
        return Err(Failure::Usage(format!("unsupported precision `{precision}`; only f64 is available")));
    }
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    fs::create_dir_all(&out).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;

    let mut resolved = FileConfig {
        seed: Some(seed),
        threads,
        out: Some(out.clone()),
        precision: Some(precision),
        ..FileConfig::default()
    };
    match cli.command {
        Command::EquivCheck(args) => {
            let mut s = file.equiv_check.unwrap_or_default();
            s.configs = args.configs.unwrap_or(s.configs);
            s.inject_fault |= args.inject_fault;
            resolved.equiv_check = Some(s.clone());
            write_resolved(&out, &resolved)?;
            commands::equiv_check(&s, seed, &out)
        }
        Command::Train(args) => {
            let mut s = file.train.unwrap_or_default();
            apply_data(&mut s.data, args.data);
            let t = &mut s.training;
            let f = args.prune;
            t.seed = seed;
            t.epochs = args.epochs.unwrap_or(t.epochs);
            t.batch_size = args.batch.unwrap_or(t.batch_size);
            t.lr = args.lr.unwrap_or(t.lr);
            t.schedule.target_rate = f.rate.unwrap_or(t.schedule.target_rate);
            t.schedule.ramp_epochs = args.ramp_epochs.unwrap_or(t.schedule.ramp_epochs);
            t.schedule.min_templates = f.min_templates.unwrap_or(t.schedule.min_templates);
            t.measure = f.measure.unwrap_or(t.measure);
            t.convert.family = f.family.unwrap_or(t.convert.family);
            t.convert.groups = f.groups.unwrap_or(t.convert.groups);
            t.convert.independent_group_templates |= f.independent;
            if args.augment {
                t.augment = tplconv::nn::AugmentFlags::all();
            }
            if let Some(w) = args.widths {
                s.model.widths = w;
            }
            resolved.train = Some(s.clone());
            write_resolved(&out, &resolved)?;
            commands::train(&s, seed, &out)
        }
        Command::Prune(args) => {
            let mut s = file.prune.unwrap_or_default();
            apply_data(&mut s.data, args.data);
            let f = args.prune;
            s.checkpoint = args.checkpoint.or(s.checkpoint);
            s.rate = f.rate.unwrap_or(s.rate);
            s.min_templates = f.min_templates.unwrap_or(s.min_templates);
            s.measure = f.measure.unwrap_or(s.measure);
            s.convert.family = f.family.unwrap_or(s.convert.family);
            s.convert.groups = f.groups.unwrap_or(s.convert.groups);
            s.convert.independent_group_templates |= f.independent;
            s.probe_batch = args.probe_batch.unwrap_or(s.probe_batch);
            resolved.prune = Some(s.clone());
            write_resolved(&out, &resolved)?;
            commands::prune(&s, seed, &out)
        }
        Command::Bench(args) => {
            let mut s = file.bench.unwrap_or_default();
            s.seed = seed;
            if let Some(r) = args.rates {
                s.rates = r;
            }
            s.repetitions = args.repetitions.unwrap_or(s.repetitions);
            s.warmup = args.warmup.unwrap_or(s.warmup);
            resolved.bench = Some(s.clone());
            write_resolved(&out, &resolved)?;
            commands::bench(&s, &out)
        }
        Command::CostReport(args) => {
            let mut s = file.cost_report.unwrap_or_default();
            apply_convert(&mut s, args);
            resolved.cost_report = Some(s.clone());
            write_resolved(&out, &resolved)?;
            commands::cost_report(&s, seed, &out)
        }
        Command::VizFilters(args) => {
            let mut s = file.viz_filters.unwrap_or_default();
            apply_convert(&mut s, args);
            resolved.viz_filters = Some(s.clone());
            write_resolved(&out, &resolved)?;
            commands::viz_filters(&s, seed, &out)
        }
    }
}

fn write_resolved(out: &Path, resolved: &FileConfig) -> Outcome {
    let json = serde_json::to_string_pretty(resolved).map_err(|e| Failure::Io(e.to_string()))?;
    write_file(&out.join("resolved_config.json"), json + "\n")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
