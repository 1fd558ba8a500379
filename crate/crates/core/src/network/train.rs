use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{BestRecord, Checkpoint};
use super::model::Network;
use crate::dataset::LabeledImageSet;
use crate::error::{Error, Result};
use crate::ops::softmax_cross_entropy;
use crate::optim::{adadelta_step, AdadeltaState};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision '{s}' (expected f32 or f64)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Rate applied to every dropout layer during training.
    pub dropout: f64,
    /// Trailing samples of the training set held out for model selection.
    pub validation_size: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            dropout: 0.5,
            validation_size: 0,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_err: f64,
    pub val_loss: Option<f64>,
    pub val_err: Option<f64>,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_err,val_loss,val_err,wall_seconds";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        format!(
            "{},{:.6},{:.6},{},{},{:.3}",
            self.epoch,
            self.train_loss,
            self.train_err,
            opt(self.val_loss),
            opt(self.val_err),
            self.wall_seconds
        )
    }
}

/// Checkpoints kept while training: the latest epoch and the best epoch by
/// validation error.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub last: Checkpoint,
    pub best: Option<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters after the last completed epoch.
    pub network: Network<T>,
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
    /// Set when training stopped on a non-finite loss or gradient; `state`
    /// then holds the last good epoch.
    pub aborted: Option<String>,
}

impl<T> TrainOutcome<T> {
    /// The selected model: best validation epoch, else the last epoch.
    pub fn selected(&self) -> &Checkpoint {
        self.state.best.as_ref().unwrap_or(&self.state.last)
    }
}

/// Copies samples `indices` of `data` into a `[B, 1, H, W]` batch.
pub fn to_batch<T: Scalar>(data: &LabeledImageSet, indices: &[usize]) -> Tensor<T> {
    let (h, w) = (data.height(), data.width());
    let mut out = Vec::with_capacity(indices.len() * h * w);
    for &i in indices {
        out.extend(data.image(i).iter().map(|&x| T::of(x as f64)));
    }
    Tensor::new(&[indices.len(), 1, h, w], out).expect("batch length")
}

fn check_data<T: Scalar>(net: &Network<T>, data: &LabeledImageSet) -> Result<()> {
    let (c, h, w) = net.spec().input;
    if c != 1 || (h, w) != (data.height(), data.width()) {
        return Err(Error::invalid(
            "train",
            format!("network expects {c}×{h}×{w} inputs, data holds 1×{}×{}", data.height(), data.width()),
        ));
    }
    if let Some(&l) = data.labels.iter().find(|&&l| l as usize >= net.classes()) {
        return Err(Error::invalid("train", format!("label {l} outside the {} output classes", net.classes())));
    }
    Ok(())
}

/// Top-1 error and confusion matrix over a split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub samples: usize,
    pub errors: usize,
    pub mean_loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn error_rate(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.errors as f64 / self.samples as f64
        }
    }

    pub fn confusion_csv(&self) -> String {
        let k = self.confusion.len();
        let mut s = String::from("true");
        for p in 0..k {
            s.push_str(&format!(",pred_{p}"));
        }
        s.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            s.push_str(&t.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for Evaluation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "samples {}  errors {}  error rate {:.2}%  mean loss {:.4}",
            self.samples,
            self.errors,
            100.0 * self.error_rate(),
            self.mean_loss
        )?;
        write!(f, "true\\pred")?;
        for p in 0..self.confusion.len() {
            write!(f, "{p:>6}")?;
        }
        for (t, row) in self.confusion.iter().enumerate() {
            write!(f, "\n{t:>9}")?;
            for v in row {
                write!(f, "{v:>6}")?;
            }
        }
        Ok(())
    }
}

/// Evaluation-mode error rate, mean loss and confusion matrix.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &LabeledImageSet, batch_size: usize) -> Result<Evaluation> {
    check_data(net, data)?;
    let k = net.classes();
    let mut confusion = vec![vec![0usize; k]; k];
    let (mut errors, mut loss_sum) = (0usize, 0.0f64);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let logits = net.predict(&to_batch::<T>(data, chunk))?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i] as usize).collect();
        let (loss, _, pred) = softmax_cross_entropy(&logits, &labels)?;
        loss_sum += loss.as_f64() * chunk.len() as f64;
        for (&t, &p) in labels.iter().zip(&pred) {
            confusion[t][p] += 1;
            errors += (t != p) as usize;
        }
    }
    Ok(Evaluation {
        samples: data.len(),
        errors,
        mean_loss: if data.is_empty() { 0.0 } else { loss_sum / data.len() as f64 },
        confusion,
    })
}

fn better(candidate: &BestRecord, current: Option<&BestRecord>) -> bool {
    match current {
        None => true,
        Some(b) => candidate.val_err < b.val_err || (candidate.val_err == b.val_err && candidate.val_loss < b.val_loss),
    }
}

/// Mini-batch Adadelta training.
///
/// The trailing `cfg.validation_size` samples of `data` are held out. Epoch
/// `e` shuffles and draws dropout masks from stream `e` of a ChaCha8
/// generator seeded with `cfg.seed`, so a run is a pure function of its
/// inputs and can resume from any epoch. `on_epoch` sees every completed
/// epoch together with the checkpoints after it.
pub fn train<T: Scalar>(
    mut net: Network<T>,
    data: &LabeledImageSet,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    mut on_epoch: impl FnMut(&EpochMetrics, &TrainState) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    net.set_dropout(cfg.dropout)?;
    check_data(&net, data)?;
    if cfg.validation_size >= data.len() {
        return Err(Error::Config(format!(
            "validation size {} leaves no training samples out of {}",
            cfg.validation_size,
            data.len()
        )));
    }
    let n_train = data.len() - cfg.validation_size;
    let train_set = data.slice(0, n_train)?;
    let val_set = if cfg.validation_size > 0 { Some(data.slice(n_train, data.len())?) } else { None };

    let (mut optimizer, mut state) = match resume {
        Some(st) => {
            if st.last.fingerprint != net.spec().fingerprint() {
                return Err(Error::Checkpoint("checkpoint was written by a different network".into()));
            }
            if st.last.seed != cfg.seed {
                return Err(Error::Config(format!("checkpoint seed {} differs from configured seed {}", st.last.seed, cfg.seed)));
            }
            net = st.last.network()?;
            net.set_dropout(cfg.dropout)?;
            (st.last.optimizer_states()?, st)
        }
        None => {
            let optimizer: Vec<AdadeltaState<T>> =
                net.parameters().iter().map(|(_, p)| AdadeltaState::new(p.shape())).collect();
            let last = Checkpoint::capture(&net, &optimizer, 0, cfg.seed, None);
            (optimizer, TrainState { last, best: None })
        }
    };

    let mut metrics = Vec::new();
    let mut aborted = None;
    'epochs: for epoch in state.last.epoch + 1..=cfg.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut errors) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let x = to_batch::<T>(&train_set, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i] as usize).collect();
            let pass = net.forward(&x, true, &mut rng)?;
            let (loss, grad, pred) = softmax_cross_entropy(&pass.logits, &labels)?;
            if !loss.is_finite() {
                aborted = Some(format!("non-finite training loss {loss} in epoch {epoch}"));
                break 'epochs;
            }
            loss_sum += loss.as_f64() * chunk.len() as f64;
            errors += labels.iter().zip(&pred).filter(|(t, p)| t != p).count();
            let grads = net.backward(&pass, &grad)?;
            for ((param, g), st) in net.parameters_mut().into_iter().zip(&grads).zip(&mut optimizer) {
                match adadelta_step(param, g, st) {
                    Ok(()) => {}
                    Err(Error::NonFinite { what, detail }) => {
                        aborted = Some(format!("non-finite {what} in epoch {epoch}: {detail}"));
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        let val = match &val_set {
            Some(v) => Some(evaluate(&net, v, cfg.batch_size)?),
            None => None,
        };
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / n_train as f64,
            train_err: errors as f64 / n_train as f64,
            val_loss: val.as_ref().map(|v| v.mean_loss),
            val_err: val.as_ref().map(Evaluation::error_rate),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        let mut best = state.last.best;
        if let (Some(val_err), Some(val_loss)) = (m.val_err, m.val_loss) {
            let cand = BestRecord { epoch, val_err, val_loss };
            if better(&cand, best.as_ref()) {
                best = Some(cand);
            }
        }
        let last = Checkpoint::capture(&net, &optimizer, epoch, cfg.seed, best);
        if best.is_some_and(|b| b.epoch == epoch) {
            state.best = Some(last.clone());
        }
        state.last = last;
        on_epoch(&m, &state)?;
        metrics.push(m);
    }
    if aborted.is_some() {
        net = state.last.network()?;
        net.set_dropout(cfg.dropout)?;
    }
    Ok(TrainOutcome {
        network: net,
        state,
        metrics,
        aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Provenance;
    use crate::network::spec::{LayerSpec, NetworkSpec};

    /// Ten classes of 8×8 images, each a bright bar at a class-specific row
    /// or column with a little noise.
    fn bars(n: usize, seed: u64) -> LabeledImageSet {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let mut data = Vec::with_capacity(n * 64);
        for &l in &labels {
            for y in 0..8 {
                for x in 0..8 {
                    let on = if l < 5 { y == l as usize + 1 } else { x == l as usize - 4 };
                    data.push(if on { 0.9 } else { 0.0 } + 0.1 * rng.random::<f32>());
                }
            }
        }
        let prov = Provenance {
            variant: "bars".into(),
            seed: Some(seed),
            source_digest: String::new(),
            angle_range: None,
            angles: Vec::new(),
        };
        LabeledImageSet::new(Tensor::new(&[n, 8, 8], data).unwrap(), labels, prov).unwrap()
    }

    fn small_spec() -> NetworkSpec {
        use LayerSpec::*;
        NetworkSpec::new(
            (1, 8, 8),
            4,
            vec![
                OrConv { out: 4, kernel: 3, padding: 1 },
                Relu,
                MaxPool,
                GlobalMaxPool,
                Linear { out: 32 },
                Relu,
                Dropout { rate: 0.5 },
                Linear { out: 10 },
                SoftmaxOutput,
            ],
        )
        .unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            dropout: 0.0,
            validation_size: 0,
            seed: 5,
            precision: Precision::F32,
        }
    }

    #[test]
    fn one_epoch_smoke() {
        let net = Network::<f32>::new(&small_spec(), 1).unwrap();
        let out = train(net, &bars(64, 1), &cfg(1), None, |_, _| Ok(())).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert!(out.metrics[0].train_loss.is_finite());
        assert!(out.aborted.is_none());
        assert_eq!(out.state.last.epoch, 1);
    }

    #[test]
    fn fixed_seed_reproduces_metrics() {
        let data = bars(96, 2);
        let mut c = cfg(2);
        c.dropout = 0.3;
        c.validation_size = 16;
        let run = || {
            let net = Network::<f32>::new(&small_spec(), 3).unwrap();
            train(net, &data, &c, None, |_, _| Ok(())).unwrap()
        };
        let (a, b) = (run(), run());
        let strip = |m: &[EpochMetrics]| m.iter().map(|x| (x.train_loss, x.train_err, x.val_loss, x.val_err)).collect::<Vec<_>>();
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn resume_continues_identically() {
        let data = bars(64, 3);
        let c = cfg(3);
        let full = train(Network::<f32>::new(&small_spec(), 4).unwrap(), &data, &c, None, |_, _| Ok(())).unwrap();
        let first = train(Network::<f32>::new(&small_spec(), 4).unwrap(), &data, &cfg(1), None, |_, _| Ok(())).unwrap();
        let resumed = train(Network::<f32>::new(&small_spec(), 4).unwrap(), &data, &c, Some(first.state), |_, _| Ok(())).unwrap();
        assert_eq!(resumed.metrics.iter().map(|m| m.epoch).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(resumed.state.last, full.state.last);
        assert_eq!(resumed.metrics[1].train_loss, full.metrics[2].train_loss);
    }

    #[test]
    fn overfits_a_tiny_split() {
        use rand::Rng;
        // global pooling discards bar position, so memorise textures instead
        let mut data = bars(10, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for x in data.images.data_mut() {
            *x = rng.random();
        }
        let net = Network::<f32>::new(&small_spec(), 5).unwrap();
        let mut c = cfg(150);
        c.batch_size = 10;
        let out = train(net, &data, &c, None, |_, _| Ok(())).unwrap();
        let ev = evaluate(&out.network, &data, 10).unwrap();
        assert_eq!(ev.error_rate(), 0.0, "{ev}");
    }

    #[test]
    fn random_network_is_near_chance() {
        let data = bars(1000, 6);
        let net = Network::<f32>::new(&small_spec(), 7).unwrap();
        let ev = evaluate(&net, &data, 100).unwrap();
        assert!((ev.error_rate() - 0.9).abs() <= 0.1, "{}", ev.error_rate());
        for (t, row) in ev.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), data.labels.iter().filter(|&&l| l as usize == t).count());
        }
    }

    #[test]
    fn best_epoch_is_selected_by_validation() {
        let data = bars(80, 8);
        let mut c = cfg(4);
        c.validation_size = 20;
        let mut seen = Vec::new();
        let out = train(Network::<f32>::new(&small_spec(), 9).unwrap(), &data, &c, None, |m, _| {
            seen.push(m.val_err.unwrap());
            Ok(())
        })
        .unwrap();
        let best = out.selected().best.unwrap();
        let min = seen.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(best.val_err, min);
        assert_eq!(out.state.best.as_ref().unwrap().epoch, best.epoch);
    }

    #[test]
    fn non_finite_input_aborts_with_last_good_state() {
        let mut data = bars(32, 9);
        let c = cfg(2);
        let good = train(Network::<f32>::new(&small_spec(), 1).unwrap(), &data, &cfg(1), None, |_, _| Ok(())).unwrap();
        data.images.data_mut()[5] = f32::INFINITY;
        let out = train(Network::<f32>::new(&small_spec(), 1).unwrap(), &data, &c, Some(good.state.clone()), |_, _| Ok(())).unwrap();
        assert!(out.aborted.is_some());
        assert_eq!(out.state.last, good.state.last);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(1);
        c.batch_size = 0;
        assert!(c.validate().is_err());
        c.batch_size = 1;
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let net = Network::<f32>::new(&small_spec(), 1).unwrap();
        let mut c = cfg(1);
        c.validation_size = 64;
        assert!(train(net, &bars(64, 1), &c, None, |_, _| Ok(())).is_err());
    }

    #[test]
    fn metrics_csv_row() {
        let m = EpochMetrics {
            epoch: 2,
            train_loss: 0.5,
            train_err: 0.25,
            val_loss: None,
            val_err: Some(0.1),
            wall_seconds: 1.5,
        };
        assert_eq!(m.csv_row(), "2,0.500000,0.250000,,0.100000,1.500");
        assert_eq!(EpochMetrics::CSV_HEADER.split(',').count(), m.csv_row().split(',').count());
    }
}
