//! Network assembly, halved-MSE loss, minibatch SGD with optional per-layer
//! clipping, and accuracy evaluation.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::datasets::Split;
use crate::error::{Error, Result};
use crate::grad_sources::{Activation, GradientSource};
use crate::layers::{
    ActivationLayer, BatchNormLayer, Conv2DLayer, DenseLayer, Flatten, Layer, LayerGrads, Mode, Pad, PoolKind,
    PoolLayer,
};
use crate::numerics::{streams, RandomStream, Tensor};

/// Samples per forward pass when only predictions are needed.
const EVAL_CHUNK: usize = 512;

/// Default clipping threshold when clipping is enabled without a value.
pub const DEFAULT_CLIP: f64 = 1.0;

/// Ordered stack of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(Tensor::len).sum()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut out = x.clone();
        for layer in &mut self.layers {
            out = layer.forward(&out, mode)?;
        }
        Ok(out)
    }

    /// Backpropagates `d` (the loss gradient at the output). Returns raw
    /// gradients aligned with [`Network::layers`]; parameterless layers get
    /// an empty list. Deltas are not propagated past the first
    /// parameterized layer.
    pub fn backward(&mut self, d: &Tensor, rng: &mut RandomStream) -> Result<Vec<LayerGrads>> {
        let first = self.layers.iter().position(Layer::has_params).unwrap_or(self.layers.len());
        let mut grads = vec![Vec::new(); self.layers.len()];
        let mut delta = d.clone();
        for i in (first..self.layers.len()).rev() {
            let (g, d_in) = self.layers[i].backward(&delta, rng, i > first)?;
            grads[i] = g;
            match d_in {
                Some(next) => delta = next,
                None => break,
            }
        }
        Ok(grads)
    }

    /// Eval-mode outputs, computed in chunks.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let n = x.rows();
        let mut shape = Vec::new();
        let mut data = Vec::new();
        for start in (0..n).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let out = self.forward(&x.select_rows(&idx), Mode::Eval)?;
            shape = out.shape().to_vec();
            data.extend_from_slice(out.data());
        }
        shape[0] = n;
        Tensor::new(shape, data)
    }

    /// Copy of the parameters and running statistics, for restoring after
    /// a diverged step.
    pub fn snapshot(&self) -> Network {
        self.clone()
    }
}

/// Network families used by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Architecture {
    /// One dense unit followed by one activation.
    Suc,
    /// Dense hidden layer then dense output, each followed by an activation.
    Mlp { hidden: usize },
    /// Two conv/pool stages and three dense layers on 32×32 input
    /// (28×28 input is zero-padded by 2).
    LeNet5,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Suc => f.write_str("suc"),
            Architecture::Mlp { hidden } => write!(f, "mlp:{hidden}"),
            Architecture::LeNet5 => f.write_str("lenet5"),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "suc" => Ok(Architecture::Suc),
            "lenet5" => Ok(Architecture::LeNet5),
            _ => match s.strip_prefix("mlp:").map(str::parse::<usize>) {
                Some(Ok(hidden)) if hidden > 0 => Ok(Architecture::Mlp { hidden }),
                _ => Err(Error::Config(format!(
                    "unknown architecture {s:?} (expected suc, mlp:<hidden>, lenet5)"
                ))),
            },
        }
    }
}

impl TryFrom<String> for Architecture {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Architecture> for String {
    fn from(a: Architecture) -> String {
        a.to_string()
    }
}

/// Everything needed to build a freshly initialized network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub architecture: Architecture,
    /// Per-sample input shape: `[features]` or `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub activation: Activation,
    pub backward: GradientSource,
    /// Batch norm before the activation of every hidden conv/dense layer.
    pub batch_norm: bool,
}

impl NetworkSpec {
    /// One output for a binary single-unit classifier, else one per class.
    pub fn output_width(&self) -> usize {
        match self.architecture {
            Architecture::Suc if self.classes == 2 => 1,
            _ => self.classes,
        }
    }
}

/// Builds and Glorot-initializes a network, drawing weights in layer order.
pub fn build_network(spec: &NetworkSpec, rs: &mut RandomStream) -> Result<Network> {
    let act = || Layer::Activation(ActivationLayer::new(spec.activation, spec.backward));
    let bn = |layers: &mut Vec<Layer>, channels: usize| {
        if spec.batch_norm {
            layers.push(Layer::BatchNorm(BatchNormLayer::new(channels)));
        }
    };
    let flat_inputs = || -> Result<usize> {
        match spec.input_shape[..] {
            [n] => Ok(n),
            _ => Err(Error::Config(format!(
                "{} takes flat feature vectors, got sample shape {:?}",
                spec.architecture, spec.input_shape
            ))),
        }
    };
    let out = spec.output_width();
    let mut layers = Vec::new();
    match spec.architecture {
        Architecture::Suc => {
            if spec.classes != 2 {
                return Err(Error::Config("a single-unit classifier needs a binary task".into()));
            }
            layers.push(Layer::Dense(DenseLayer::init(flat_inputs()?, 1, rs)));
            layers.push(act());
        }
        Architecture::Mlp { hidden } => {
            layers.push(Layer::Dense(DenseLayer::init(flat_inputs()?, hidden, rs)));
            bn(&mut layers, hidden);
            layers.push(act());
            layers.push(Layer::Dense(DenseLayer::init(hidden, out, rs)));
            layers.push(act());
        }
        Architecture::LeNet5 => {
            let channels = match spec.input_shape[..] {
                [c, 28, 28] => {
                    layers.push(Layer::Pad(Pad { amount: 2 }));
                    c
                }
                [c, 32, 32] => c,
                _ => {
                    return Err(Error::Config(format!(
                        "lenet5 takes C×28×28 or C×32×32 images, got {:?}",
                        spec.input_shape
                    )))
                }
            };
            let pool = || PoolLayer::new(PoolKind::QuadraticMean, (2, 2)).map(Layer::Pool);
            layers.push(Layer::Conv2D(Conv2DLayer::init(6, channels, 5, 5, rs)));
            bn(&mut layers, 6);
            layers.push(act());
            layers.push(pool()?);
            layers.push(Layer::Conv2D(Conv2DLayer::init(16, 6, 5, 5, rs)));
            bn(&mut layers, 16);
            layers.push(act());
            layers.push(pool()?);
            layers.push(Layer::Flatten(Flatten::default()));
            for (n_in, n_out) in [(400, 120), (120, 84)] {
                layers.push(Layer::Dense(DenseLayer::init(n_in, n_out, rs)));
                bn(&mut layers, n_out);
                layers.push(act());
            }
            layers.push(Layer::Dense(DenseLayer::init(84, out, rs)));
            layers.push(act());
        }
    }
    Ok(Network::new(layers))
}

/// How per-sample contributions combine into one minibatch update.
///
/// `Mean` follows the halved-MSE loss with its `1/m`. `Sum` applies
/// `ΔW = Σ_k ΔW_k` directly, which is the same as `Mean` with `η·m`. The
/// reported loss is always the mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        })
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            _ => Err(Error::Config(format!("unknown reduction `{s}` (expected mean or sum)"))),
        }
    }
}

/// Plain minibatch SGD settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub eta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Per-layer gradient-norm threshold.
    pub clip: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub reduction: Reduction,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let clip_ok = self.clip.is_none_or(|t| t.is_finite() && t > 0.0);
        if !(self.eta.is_finite() && self.eta >= 0.0) || self.batch_size == 0 || self.epochs == 0 || !clip_ok {
            return Err(Error::Config(format!(
                "invalid SGD settings: eta={}, batch_size={}, epochs={}, clip={:?}",
                self.eta, self.batch_size, self.epochs, self.clip
            )));
        }
        Ok(())
    }
}

/// Halved mean squared error and its gradient with respect to `y_hat`:
/// `L = Σ(Y−Ŷ)²/(2m)`, `D = (Ŷ−Y)/m`.
pub fn loss_and_delta(y_hat: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
    if y_hat.shape() != y.shape() {
        return Err(Error::Dimension(format!(
            "loss: predictions {:?} vs targets {:?}",
            y_hat.shape(),
            y.shape()
        )));
    }
    let m = y.rows() as f64;
    let residual = y_hat.zip_map(y, |a, b| a - b)?;
    let loss = residual.data().iter().map(|r| r * r).sum::<f64>() / (2.0 * m);
    Ok((loss, residual.scale(1.0 / m)))
}

/// Rescales `grads` in place to norm at most `theta`; returns whether it
/// triggered. The norm is taken over all of one layer's gradients.
pub fn clip_layer(grads: &mut [Tensor], theta: f64) -> bool {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm <= theta {
        return false;
    }
    let s = theta / norm;
    for g in grads {
        g.data_mut().iter_mut().for_each(|v| *v *= s);
    }
    true
}

/// Outcome of one minibatch step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Correctly classified samples in the batch (training-mode outputs).
    pub correct: usize,
}

/// One forward pass, one backward pass, then `W ← W − η·clip(ΔW)` for
/// every parameterized layer.
pub fn train_minibatch(
    net: &mut Network,
    x: &Tensor,
    y: &Tensor,
    labels: &[usize],
    cfg: &SgdConfig,
    rng: &mut RandomStream,
) -> Result<StepStats> {
    if x.rows() == 0 {
        return Err(Error::Precondition("empty minibatch".into()));
    }
    let y_hat = net.forward(x, Mode::Train)?;
    let (loss, mut d) = loss_and_delta(&y_hat, y)?;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("loss became {loss}")));
    }
    if cfg.reduction == Reduction::Sum {
        d = d.scale(x.rows() as f64);
    }
    let correct = count_correct(&y_hat, labels);
    let grads = net.backward(&d, rng)?;
    for (layer, mut g) in net.layers.iter_mut().zip(grads) {
        if g.is_empty() {
            continue;
        }
        if let Some(theta) = cfg.clip {
            clip_layer(&mut g, theta);
        }
        for (p, dp) in layer.params_mut().into_iter().zip(&g) {
            for (w, &dw) in p.data_mut().iter_mut().zip(dp.data()) {
                *w -= cfg.eta * dw;
            }
        }
    }
    Ok(StepStats { loss, correct })
}

/// Predicted class of one output row: argmax (first on ties), or a 0.5
/// threshold for a single output.
pub fn predicted_class(row: &[f64]) -> usize {
    if row.len() == 1 {
        return usize::from(row[0] >= 0.5);
    }
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(y_hat: &Tensor, labels: &[usize]) -> usize {
    (0..y_hat.rows())
        .filter(|&i| predicted_class(y_hat.row(i)) == labels[i])
        .count()
}

/// Fraction of `labels` matched by the network's eval-mode predictions.
pub fn evaluate(net: &mut Network, x: &Tensor, labels: &[usize]) -> Result<f64> {
    if x.rows() != labels.len() {
        return Err(Error::Dimension(format!("{} inputs but {} labels", x.rows(), labels.len())));
    }
    let y_hat = net.predict(x)?;
    Ok(count_correct(&y_hat, labels) as f64 / labels.len() as f64)
}

/// Training-set statistics of one epoch, averaged over its minibatches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub accuracy: f64,
    pub loss: f64,
}

/// Curves and final score of one training run. Equality ignores wall time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    /// Eval-mode training loss of the freshly initialized network.
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
    pub test_accuracy: f64,
    /// Set when a step produced a non-finite value; the run then reports
    /// the parameters from the end of the last completed epoch.
    pub diverged_at_epoch: Option<usize>,
    /// Excluded from serialization so archives are reproducible.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl PartialEq for RunResult {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.initial_loss.to_bits() == other.initial_loss.to_bits()
            && self.epochs == other.epochs
            && self.test_accuracy == other.test_accuracy
            && self.diverged_at_epoch == other.diverged_at_epoch
    }
}

impl RunResult {
    pub fn diverged(&self) -> bool {
        self.diverged_at_epoch.is_some()
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Diverged(_) | Error::NonFinite(_))
}

/// Trains for `cfg.epochs` epochs of `⌈n/m⌉` shuffled minibatches, then
/// scores the test set. Shuffling and jamming draw from the run's
/// training stream.
pub fn train(net: &mut Network, split: &Split, cfg: &SgdConfig) -> Result<RunResult> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = RandomStream::with_stream(cfg.seed, streams::TRAIN);
    let train = &split.train;
    let width = net
        .layers()
        .iter()
        .rev()
        .find_map(|l| match l {
            Layer::Dense(d) => Some(d.n_out()),
            _ => None,
        })
        .ok_or_else(|| Error::Config("network has no output layer".into()))?;
    let targets = train.targets(width)?;
    let initial_loss = match net.predict(train.x()) {
        Ok(y_hat) => loss_and_delta(&y_hat, &targets)?.0,
        Err(e) if is_divergence(&e) => f64::NAN,
        Err(e) => return Err(e),
    };

    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut diverged_at_epoch = None;
    let mut last_good = net.snapshot();
    'epochs: for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct, mut batches) = (0.0, 0, 0);
        for idx in order.chunks(cfg.batch_size) {
            let x = train.x().select_rows(idx);
            let y = targets.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels()[i]).collect();
            match train_minibatch(net, &x, &y, &labels, cfg, &mut rng) {
                Ok(step) => {
                    loss_sum += step.loss;
                    correct += step.correct;
                    batches += 1;
                }
                Err(e) if is_divergence(&e) => {
                    diverged_at_epoch = Some(epoch);
                    *net = last_good;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        epochs.push(EpochStats {
            epoch,
            accuracy: correct as f64 / n as f64,
            loss: loss_sum / batches as f64,
        });
        last_good = net.snapshot();
    }

    let test_accuracy = match evaluate(net, split.test.x(), split.test.labels()) {
        Ok(a) => a,
        // Finite but huge weights can still overflow on unseen inputs.
        Err(e) if is_divergence(&e) => {
            diverged_at_epoch.get_or_insert(cfg.epochs);
            0.0
        }
        Err(e) => return Err(e),
    };
    Ok(RunResult {
        seed: cfg.seed,
        initial_loss,
        epochs,
        test_accuracy,
        diverged_at_epoch,
        wall_time: start.elapsed(),
    })
}
