use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use orn_core::config::ExperimentConfig;
use orn_core::dataset::{load_mnist_dir, DatasetVariant};
use orn_core::error::Error;
use orn_core::experiment::{self, Split};
use orn_core::image::Gray;
use orn_core::network::{gradcheck_network, tiny_specs, Checkpoint, NetworkSpec};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "orn", version, about = "Oriented response networks on rotated MNIST")]
struct Cli {
    /// Worker threads for matrix products (1 is fully deterministic).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset variant and write it as IDX files with metadata.
    BuildData(BuildData),
    /// Train a network and evaluate the selected epoch.
    Train(Train),
    /// Evaluate a checkpoint on a dataset split.
    Eval(Eval),
    /// Render a layer's orientation channels as a PGM grid.
    Visualize(Visualize),
    /// Compare analytic and finite-difference gradients of small networks.
    Gradcheck(Gradcheck),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BuildData {
    #[command(flatten)]
    common: Common,
    /// Use only the first N base images of each split.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    network: Option<String>,
    #[arg(long)]
    encoding: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Any other configuration key, as `key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from the run directory's last checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// `test` (default) or `train`.
    #[arg(long, default_value = "test")]
    split: String,
    /// Use only the first N samples of the split.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct Visualize {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image (binary PGM); otherwise `--index` into the test split.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Layer whose output is rendered (default: the first ORConv).
    #[arg(long)]
    layer: Option<usize>,
    /// Render only this feature (one row of N tiles).
    #[arg(long)]
    feature: Option<usize>,
    /// Also record the dominant orientation of the 1×1 descriptor for the
    /// input rotated through eight 45° steps.
    #[arg(long)]
    sweep: bool,
}

#[derive(Args)]
struct Gradcheck {
    /// Network description to check; defaults to the built-in small networks.
    #[arg(long)]
    spec: Option<String>,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::CountMismatch { .. }
            | Error::LabelOutOfRange { .. }
            | Error::Checkpoint(_) => EXIT_DATA,
            Error::NonFinite { .. } => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type Outcome = Result<(), Failure>;

fn resolve(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => Failure::from(e),
            e => usage(e.to_string()),
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(v) = &common.variant {
        cfg.set("variant", v)?;
    }
    if let Some(d) = &common.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn build_data(args: BuildData) -> Outcome {
    let cfg = resolve(&args.common)?;
    let written = experiment::build_data(&cfg.data_dir, cfg.variant, cfg.seed, &cfg.out, args.limit)?;
    for w in written {
        println!("{}  {}", w.images_sha256, w.images.display());
        println!("{}  {}", w.labels_sha256, w.labels.display());
        println!("metadata  {}", w.metadata.display());
    }
    Ok(())
}

fn train(args: Train) -> Outcome {
    let mut cfg = resolve(&args.common)?;
    if let Some(n) = &args.network {
        cfg.set("network", n)?;
    }
    if let Some(e) = &args.encoding {
        cfg.set("encoding", e)?;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k, v)?;
    }
    if args.common.out.is_none() && !args.set.iter().any(|kv| kv.starts_with("out=")) && args.common.config.is_none() {
        cfg.out = PathBuf::from(format!("runs/{}-{}-{}-s{}", cfg.network, cfg.encoding, cfg.variant, cfg.seed));
    }
    cfg.validate()?;
    let summary = experiment::run_experiment(&cfg, args.resume, &mut |line| eprintln!("{line}"))?;
    println!("run directory: {}", summary.out.display());
    println!("parameters: {}", summary.parameter_count);
    println!("{}", summary.evaluation);
    match summary.aborted {
        Some(reason) => Err(Failure {
            code: EXIT_NUMERICAL,
            message: format!("training aborted: {reason}"),
        }),
        None => Ok(()),
    }
}

fn eval(args: Eval) -> Outcome {
    let cfg = resolve(&args.common)?;
    let split = match args.split.as_str() {
        "test" => Split::Test,
        "train" => Split::Train,
        s => return Err(usage(format!("unknown split '{s}' (expected test or train)"))),
    };
    let out = args.common.out.as_deref();
    let ev = experiment::evaluate_checkpoint(&args.checkpoint, &cfg.data_dir, cfg.variant, split, cfg.seed, args.limit, out)?;
    println!("{ev}");
    Ok(())
}

fn load_image(args: &Visualize, cfg: &ExperimentConfig, h: usize, w: usize) -> Result<Vec<f32>, Failure> {
    if let Some(p) = &args.image {
        let g = Gray::load(p)?;
        if (g.height, g.width) != (h, w) {
            return Err(Failure {
                code: EXIT_DATA,
                message: format!("{}: image is {}×{}, network expects {h}×{w}", p.display(), g.width, g.height),
            });
        }
        return Ok(g.to_unit());
    }
    let (train_base, test_base) = load_mnist_dir(&cfg.data_dir)?;
    let variant = if args.common.variant.is_some() { cfg.variant } else { DatasetVariant::Original };
    let split = experiment::evaluation_split(variant, cfg.seed, &train_base, &test_base, Some(args.index + 1))?;
    if args.index >= split.len() {
        return Err(usage(format!("index {} outside the {}-sample split", args.index, split.len())));
    }
    Ok(split.image(args.index).to_vec())
}

fn visualize(args: Visualize) -> Outcome {
    let cfg = resolve(&args.common)?;
    let net = Checkpoint::load(&args.checkpoint)?.network::<f32>()?;
    let (_, h, w) = net.spec().input;
    let image = load_image(&args, &cfg, h, w)?;
    let out: &Path = args.common.out.as_deref().unwrap_or(Path::new("."));
    let layer = match args.layer {
        Some(l) => l,
        None => net
            .spec()
            .layers
            .iter()
            .position(|l| matches!(l, orn_core::network::LayerSpec::OrConv { .. } | orn_core::network::LayerSpec::Conv { .. }))
            .ok_or_else(|| usage("network has no convolution layer"))?,
    };
    let r = experiment::render_layer(&net, &image, layer, args.feature, out)?;
    println!("{}: {} row(s) × {} orientation tile(s)", r.path.display(), r.rows, r.cols);
    if args.sweep {
        let sweep = experiment::write_sweep(&net, &image, out)?;
        for (m, row) in sweep.iter().enumerate() {
            let shown: Vec<String> = row.iter().take(8).map(usize::to_string).collect();
            println!("rotation {:>3}°  dominant orientation {}", m * 45, shown.join(" "));
        }
        println!("{}", out.join("sweep.csv").display());
    }
    Ok(())
}

fn gradcheck(args: Gradcheck) -> Outcome {
    let specs: Vec<(String, NetworkSpec)> = match &args.spec {
        Some(text) => vec![("custom".into(), text.parse()?)],
        None => tiny_specs().into_iter().map(|(n, s)| (n.to_string(), s)).collect(),
    };
    let mut failed = false;
    for (name, spec) in specs {
        let report = gradcheck_network(&spec, args.tolerance)?;
        println!("== {name}: {spec}\n{report}\n");
        failed |= !report.passed();
    }
    if failed {
        Err(Failure {
            code: EXIT_NUMERICAL,
            message: "gradient check failed".into(),
        })
    } else {
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = cli.threads.unwrap_or(1);
    if threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(EXIT_USAGE);
    }
    // Read by the matrix-product kernels on first use.
    std::env::set_var("MATMUL_NUM_THREADS", threads.to_string());
    let result = match cli.command {
        Command::BuildData(a) => build_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Visualize(a) => visualize(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            if f.code == EXIT_USAGE {
                eprintln!("run `orn --help` for usage");
            }
            ExitCode::from(f.code)
        }
    }
}
