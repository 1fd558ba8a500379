//! Run-level plumbing shared by the command-line tool and the test suites:
//! split preparation, training runs with on-disk outputs, evaluation and
//! feature-map rendering.

use std::f64::consts::FRAC_PI_4;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::dataset::{build_variant, load_mnist_dir, rotate_plane, write_variant, DatasetVariant, LabeledImageSet, WrittenVariant};
use crate::error::{Error, Result};
use crate::image::{tile_grid, Gray};
use crate::network::{
    evaluate, train, Checkpoint, EpochMetrics, Evaluation, LayerSpec, Network, Precision, Shape, TrainState,
};
use crate::tensor::{Scalar, Tensor};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Seed used for evaluation-split angles, distinct from the training stream.
pub fn test_seed(seed: u64) -> u64 {
    seed ^ 0x7e57_5eed_0000_0001
}

fn prefix(set: LabeledImageSet, limit: Option<usize>) -> Result<LabeledImageSet> {
    match limit {
        Some(n) if n < set.len() => set.slice(0, n),
        _ => Ok(set),
    }
}

fn is_12k(v: DatasetVariant) -> bool {
    matches!(v, DatasetVariant::Rot12kTrain | DatasetVariant::Rot12kTest)
}

/// Training split: `variant` applied to the first `limit` training images
/// (the 12k variants draw from the pooled training and test images).
pub fn training_split(
    variant: DatasetVariant,
    seed: u64,
    train_base: &LabeledImageSet,
    test_base: &LabeledImageSet,
    limit: Option<usize>,
) -> Result<LabeledImageSet> {
    if is_12k(variant) {
        let pool = train_base.concat(test_base)?;
        return prefix(build_variant(&pool, DatasetVariant::Rot12kTrain, seed)?, limit);
    }
    build_variant(&prefix(train_base.clone(), limit)?, variant, seed)
}

/// Evaluation split: `variant` applied to the first `limit` test images (the
/// 12k variants yield the pooled 50,000-sample test split).
pub fn evaluation_split(
    variant: DatasetVariant,
    seed: u64,
    train_base: &LabeledImageSet,
    test_base: &LabeledImageSet,
    limit: Option<usize>,
) -> Result<LabeledImageSet> {
    if is_12k(variant) {
        let pool = train_base.concat(test_base)?;
        return prefix(build_variant(&pool, DatasetVariant::Rot12kTest, seed)?, limit);
    }
    build_variant(&prefix(test_base.clone(), limit)?, variant, test_seed(seed))
}

/// Writes the training and evaluation splits of `variant` as IDX files with
/// metadata sidecars under `out`.
pub fn build_data(
    data_dir: &Path,
    variant: DatasetVariant,
    seed: u64,
    out: &Path,
    limit: Option<usize>,
) -> Result<Vec<WrittenVariant>> {
    let (train_base, test_base) = load_mnist_dir(data_dir)?;
    let (train_variant, test_variant) = if is_12k(variant) {
        (DatasetVariant::Rot12kTrain, DatasetVariant::Rot12kTest)
    } else {
        (variant, variant)
    };
    let train_set = training_split(train_variant, seed, &train_base, &test_base, limit)?;
    let test_set = evaluation_split(test_variant, seed, &train_base, &test_base, limit)?;
    Ok(vec![
        write_variant(&train_set, out, &format!("{}-train", train_variant.name()))?,
        write_variant(&test_set, out, &format!("{}-test", test_variant.name()))?,
    ])
}

/// Outcome of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out: PathBuf,
    pub parameter_count: usize,
    /// Epochs run by this invocation.
    pub metrics: Vec<EpochMetrics>,
    pub selected_epoch: usize,
    pub evaluation: Evaluation,
    pub aborted: Option<String>,
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

/// Keeps the header and the rows up to `epoch` of an existing metrics file.
fn truncate_metrics(path: &Path, epoch: usize) -> Result<()> {
    let text = io(path, fs::read_to_string(path)).unwrap_or_default();
    let mut keep = String::from(EpochMetrics::CSV_HEADER);
    keep.push('\n');
    for line in text.lines().skip(1) {
        if line.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e <= epoch) {
            keep.push_str(line);
            keep.push('\n');
        }
    }
    io(path, fs::write(path, keep))
}

fn write_evaluation(dir: &Path, stem: &str, ev: &Evaluation) -> Result<()> {
    let txt = dir.join(format!("{stem}.txt"));
    io(&txt, fs::write(&txt, format!("{ev}\n")))?;
    let csv = dir.join(format!("{stem}-confusion.csv"));
    io(&csv, fs::write(&csv, ev.confusion_csv()))
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig, resume: bool, log: &mut dyn FnMut(&str)) -> Result<RunSummary> {
    let out = cfg.out.clone();
    io(&out, fs::create_dir_all(&out))?;
    let cfg_path = out.join(CONFIG_FILE);
    io(&cfg_path, fs::write(&cfg_path, cfg.to_string()))?;

    let (train_base, test_base) = load_mnist_dir(&cfg.data_dir)?;
    let train_set = training_split(cfg.variant, cfg.seed, &train_base, &test_base, cfg.train_samples)?;
    let eval_set = evaluation_split(cfg.evaluation_variant(), cfg.seed, &train_base, &test_base, cfg.test_samples)?;
    log(&format!(
        "{} {} on {} ({} samples, {} held out), evaluating on {} ({} samples)",
        cfg.network,
        cfg.encoding,
        cfg.variant,
        train_set.len(),
        cfg.validation_size,
        cfg.evaluation_variant(),
        eval_set.len()
    ));

    let spec = cfg.spec()?;
    let net = Network::<T>::new(&spec, cfg.seed)?;
    let parameter_count = net.parameter_count();
    let last_path = out.join(LAST_CHECKPOINT);
    let best_path = out.join(BEST_CHECKPOINT);
    let metrics_path = out.join(METRICS_FILE);
    let state = if resume && last_path.exists() {
        let last = Checkpoint::load(&last_path)?;
        let best = if best_path.exists() { Some(Checkpoint::load(&best_path)?) } else { None };
        log(&format!("resuming after epoch {}", last.epoch));
        truncate_metrics(&metrics_path, last.epoch)?;
        Some(TrainState { last, best })
    } else {
        io(&metrics_path, fs::write(&metrics_path, format!("{}\n", EpochMetrics::CSV_HEADER)))?;
        None
    };

    let mut csv = io(&metrics_path, OpenOptions::new().append(true).open(&metrics_path))?;
    let outcome = train(net, &train_set, &cfg.train_config(), state, |m, st| {
        io(&metrics_path, writeln!(csv, "{}", m.csv_row()))?;
        st.last.save(&last_path)?;
        if let Some(b) = &st.best {
            if b.epoch == m.epoch {
                b.save(&best_path)?;
            }
        }
        log(&format!(
            "epoch {:>3}  train loss {:.4} err {:.2}%{}  {:.1}s",
            m.epoch,
            m.train_loss,
            100.0 * m.train_err,
            match (m.val_loss, m.val_err) {
                (Some(l), Some(e)) => format!("  val loss {l:.4} err {:.2}%", 100.0 * e),
                _ => String::new(),
            },
            m.wall_seconds
        ));
        Ok(())
    })?;
    drop(csv);
    if outcome.state.last.epoch > 0 && !last_path.exists() {
        outcome.state.last.save(&last_path)?;
    }
    if let Some(reason) = &outcome.aborted {
        log(&format!("aborted: {reason}"));
    }

    let selected = outcome.selected();
    let net = selected.network::<T>()?;
    let evaluation = evaluate(&net, &eval_set, cfg.batch_size)?;
    write_evaluation(&out, "eval", &evaluation)?;
    log(&format!(
        "epoch {} selected; {} error {:.2}%",
        selected.epoch,
        cfg.evaluation_variant(),
        100.0 * evaluation.error_rate()
    ));
    Ok(RunSummary {
        out,
        parameter_count,
        metrics: outcome.metrics.clone(),
        selected_epoch: selected.epoch,
        evaluation,
        aborted: outcome.aborted.clone(),
    })
}

/// Trains the configured network and evaluates the selected epoch. The run
/// directory receives `config.txt`, `metrics.csv`, `last.ckpt`, `best.ckpt`
/// (with validation), `eval.txt` and `eval-confusion.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, resume: bool, log: &mut dyn FnMut(&str)) -> Result<RunSummary> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, resume, log),
        Precision::F64 => run_typed::<f64>(cfg, resume, log),
    }
}

/// Which split [`evaluate_checkpoint`] rebuilds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Evaluates a checkpoint on a rebuilt split; writes `<stem>.txt` and
/// `<stem>-confusion.csv` into `out` when given.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    data_dir: &Path,
    variant: DatasetVariant,
    split: Split,
    seed: u64,
    limit: Option<usize>,
    out: Option<&Path>,
) -> Result<Evaluation> {
    let ck = Checkpoint::load(checkpoint)?;
    let net = ck.network::<f32>()?;
    let (train_base, test_base) = load_mnist_dir(data_dir)?;
    let data = match split {
        Split::Train => training_split(variant, seed, &train_base, &test_base, limit)?,
        Split::Test => evaluation_split(variant, seed, &train_base, &test_base, limit)?,
    };
    let ev = evaluate(&net, &data, 256)?;
    if let Some(dir) = out {
        io(dir, fs::create_dir_all(dir))?;
        let stem = format!("eval-{}-{}", variant.name(), if split == Split::Train { "train" } else { "test" });
        write_evaluation(dir, &stem, &ev)?;
    }
    Ok(ev)
}

/// Index of the 1×1 oriented descriptor layer: the first layer after the
/// last ORConv whose output is a `1×1×N` map, before any encoding.
pub fn descriptor_layer<T: Scalar>(net: &Network<T>) -> Option<usize> {
    let spec = net.spec();
    let last = spec.layers.iter().rposition(|l| matches!(l, LayerSpec::OrConv { .. }))?;
    (last..spec.layers.len()).find(|&i| {
        matches!(net.plan()[i], Shape::Map { h: 1, w: 1, n, .. } if n == spec.orientations && n > 1)
            && !matches!(spec.layers[i], LayerSpec::OrAlign)
    })
}

/// Per-feature dominant orientation of the descriptor layer for `image`
/// rotated clockwise by `m · 45°`, `m = 0..steps`.
pub fn orientation_sweep<T: Scalar>(net: &Network<T>, image: &[f32], steps: usize) -> Result<Vec<Vec<usize>>> {
    let layer = descriptor_layer(net)
        .ok_or_else(|| Error::invalid("orientation_sweep", "network has no 1×1 oriented descriptor layer"))?;
    let (_, h, w) = net.spec().input;
    let n = net.spec().orientations;
    let mut out = Vec::with_capacity(steps);
    for m in 0..steps {
        let rotated = rotate_plane(image, h, w, m as f64 * FRAC_PI_4);
        let x = Tensor::new(&[1, 1, h, w], rotated.iter().map(|&v| T::of(v as f64)).collect())?;
        let desc = net.trace(&x)?.swap_remove(layer);
        out.push(desc.data().chunks(n).map(crate::encoding::dominant_orientation).collect());
    }
    Ok(out)
}

/// Rendered feature map of one layer.
#[derive(Debug, Clone)]
pub struct Rendering {
    pub path: PathBuf,
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub grid: Gray,
}

/// Renders layer `layer`'s response to `image` as a grid with one tile per
/// orientation channel (columns) for each selected feature (rows).
pub fn render_layer<T: Scalar>(
    net: &Network<T>,
    image: &[f32],
    layer: usize,
    feature: Option<usize>,
    out: &Path,
) -> Result<Rendering> {
    let (_, h, w) = net.spec().input;
    let Some(&Shape::Map { c, n, h: lh, w: lw }) = net.plan().get(layer) else {
        return Err(Error::invalid("visualize", format!("layer {layer} has no spatial feature map")));
    };
    if feature.is_some_and(|f| f >= c) {
        return Err(Error::invalid("visualize", format!("layer {layer} has {c} features")));
    }
    let x = Tensor::new(&[1, 1, h, w], image.iter().map(|&v| T::of(v as f64)).collect())?;
    let act = net.trace(&x)?.swap_remove(layer);
    let plane = lh * lw;
    let features: Vec<usize> = feature.map_or_else(|| (0..c).collect(), |f| vec![f]);
    let mut tiles = Vec::with_capacity(features.len() * n);
    for &f in &features {
        for k in 0..n {
            let ch = f * n + k;
            tiles.push(act.data()[ch * plane..(ch + 1) * plane].iter().map(|v| v.as_f64() as f32).collect());
        }
    }
    let grid = tile_grid(&tiles, features.len(), n, lh, lw);
    io(out, fs::create_dir_all(out))?;
    let path = out.join(match feature {
        Some(f) => format!("layer{layer}-feature{f}.pgm"),
        None => format!("layer{layer}.pgm"),
    });
    grid.save(&path)?;
    Ok(Rendering {
        path,
        layer,
        rows: features.len(),
        cols: n,
        grid,
    })
}

/// Writes `sweep.csv` (`step,angle_deg,feature,dominant`) for
/// [`orientation_sweep`] and returns the sweep.
pub fn write_sweep<T: Scalar>(net: &Network<T>, image: &[f32], out: &Path) -> Result<Vec<Vec<usize>>> {
    let sweep = orientation_sweep(net, image, 8)?;
    io(out, fs::create_dir_all(out))?;
    let path = out.join("sweep.csv");
    let mut f = io(&path, File::create(&path))?;
    io(&path, writeln!(f, "step,angle_deg,feature,dominant"))?;
    for (m, row) in sweep.iter().enumerate() {
        for (feat, d) in row.iter().enumerate() {
            io(&path, writeln!(f, "{m},{},{feat},{d}", m * 45))?;
        }
    }
    Ok(sweep)
}
