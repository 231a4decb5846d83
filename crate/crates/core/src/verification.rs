//! Runnable checks: finite-difference gradient agreement for tied networks,
//! sign preservation under positive backward factors, and the rank-one
//! structure of single-unit updates.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grad_sources::{Activation, GradientSource, SourceKind};
use crate::layers::{ActivationLayer, BatchNormLayer, Conv2DLayer, DenseLayer, Flatten, Layer, Mode, PoolKind, PoolLayer};
use crate::numerics::{matmul, RandomStream, Tensor};
use crate::training::{loss_and_delta, Network};

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely: relative error is
/// `|a − n| / max(|a|, |n|, REL_FLOOR)`. Central differences at `eps` lose
/// roughly `1e-16·L/eps ≈ 1e-11` to round-off, which would dominate the
/// ratio for gradients near zero.
pub const REL_FLOOR: f64 = 1e-4;

/// Location of one scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamIndex {
    pub layer: usize,
    pub tensor: usize,
    pub element: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: ParamIndex,
    pub analytic: f64,
    pub numeric: f64,
    pub eps: f64,
    pub params_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn batch_loss(net: &mut Network, x: &Tensor, y: &Tensor) -> Result<f64> {
    let y_hat = net.forward(x, Mode::Train)?;
    Ok(loss_and_delta(&y_hat, y)?.0)
}

/// Compares analytic gradients of the halved-MSE loss on `(x, y)` with
/// central differences for every parameter.
///
/// Every activation must use its tied derivative, and no ReLU or step
/// pre-activation may lie within `10·eps` of zero; otherwise a
/// precondition error asks the caller to resample.
// Negated comparisons so that NaN is rejected too.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn finite_difference_check(net: &Network, x: &Tensor, y: &Tensor, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::Precondition(format!("eps must be positive, got {eps}")));
    }
    for layer in net.layers() {
        if let Layer::Activation(a) = layer {
            if a.backward.kind != SourceKind::TiedDerivative {
                return Err(Error::Precondition(format!(
                    "finite differences need tied derivatives, found {}",
                    a.backward.kind
                )));
            }
        }
    }
    check_kinks(net, x, 10.0 * eps)?;

    let mut probe = net.clone();
    let y_hat = probe.forward(x, Mode::Train)?;
    let (_, d) = loss_and_delta(&y_hat, y)?;
    let grads = probe.backward(&d, &mut RandomStream::new(0))?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: ParamIndex {
            layer: 0,
            tensor: 0,
            element: 0,
        },
        analytic: 0.0,
        numeric: 0.0,
        eps,
        params_checked: 0,
    };
    let mut work = net.clone();
    for (li, layer_grads) in grads.iter().enumerate() {
        for (ti, g) in layer_grads.iter().enumerate() {
            for ei in 0..g.len() {
                let original = work.layers()[li].params()[ti].data()[ei];
                let set = |work: &mut Network, v: f64| work.layers_mut()[li].params_mut()[ti].data_mut()[ei] = v;
                set(&mut work, original + eps);
                let plus = batch_loss(&mut work, x, y)?;
                set(&mut work, original - eps);
                let minus = batch_loss(&mut work, x, y)?;
                set(&mut work, original);
                let numeric = (plus - minus) / (2.0 * eps);
                let analytic = g.data()[ei];
                let err = relative_error(analytic, numeric);
                report.params_checked += 1;
                if err > report.max_rel_error || report.params_checked == 1 {
                    report.max_rel_error = err;
                    report.worst = ParamIndex {
                        layer: li,
                        tensor: ti,
                        element: ei,
                    };
                    report.analytic = analytic;
                    report.numeric = numeric;
                }
            }
        }
    }
    Ok(report)
}

fn check_kinks(net: &Network, x: &Tensor, margin: f64) -> Result<()> {
    let mut probe = net.clone();
    let mut out = x.clone();
    for layer in probe.layers_mut() {
        if let Layer::Activation(a) = layer {
            if a.forward.has_kink_at_zero() {
                if let Some(z) = out.data().iter().find(|z| z.abs() < margin) {
                    return Err(Error::Precondition(format!(
                        "pre-activation {z:e} within {margin:e} of a kink"
                    )));
                }
            }
        }
        out = layer.forward(&out, Mode::Train)?;
    }
    Ok(())
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// True iff every component of `(D·W) ⊙ g` has the sign of `D·W`, where
/// `W` is `n_out × n_in` (no bias column), `D` is `m × n_out`, and `g` is
/// a strictly positive `m × n_in` factor.
// Negated comparisons so that NaN is rejected too.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn direction_invariance_check(w: &Tensor, d: &Tensor, g: &Tensor) -> Result<bool> {
    if let Some(bad) = g.data().iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Precondition(format!("backward factor must be strictly positive, found {bad}")));
    }
    let back = matmul(d, w)?;
    let modulated = back.hadamard(g)?;
    Ok(back.data().iter().zip(modulated.data()).all(|(&a, &b)| sign(a) == sign(b)))
}

/// Trains a single logistic unit on one sample `x` with output delta
/// `scalar_delta` and the given backward source, and reports whether the
/// weight gradient is collinear with the augmented input `[x; 1]`
/// (`|cos| ≥ 1 − 1e-9`). A zero gradient counts as collinear.
pub fn suc_update_direction_check(
    x: &Tensor,
    scalar_delta: f64,
    source: GradientSource,
    rng: &mut RandomStream,
) -> Result<bool> {
    let dw = suc_update(x, scalar_delta, source, rng)?;
    let aug: Vec<f64> = x.data().iter().copied().chain([1.0]).collect();
    let dot: f64 = dw.iter().zip(&aug).map(|(a, b)| a * b).sum();
    let nd = dw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nd == 0.0 {
        return Ok(true);
    }
    let na = aug.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((dot.abs() / (nd * na) - 1.0).abs() <= 1e-9)
}

/// Raw weight gradient of a randomly initialized single unit.
pub fn suc_update(x: &Tensor, scalar_delta: f64, source: GradientSource, rng: &mut RandomStream) -> Result<Vec<f64>> {
    if x.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Precondition("input must be nonzero".into()));
    }
    let n = x.len();
    let row = Tensor::new(vec![1, n], x.data().to_vec())?;
    let mut dense = DenseLayer::init(n, 1, rng);
    let mut act = ActivationLayer::new(Activation::Logistic, source);
    let z = dense.forward(&row, Mode::Train)?;
    act.forward(&z, Mode::Train)?;
    let d = act.backward(&Tensor::filled(&[1, 1], scalar_delta), Some(rng))?;
    let (dw, _) = dense.backward(&d)?;
    Ok(dw.into_data())
}

fn random(shape: &[usize], rs: &mut RandomStream, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rs.range(lo, hi)).collect()).expect("finite draws")
}

fn random_bias(net: &mut Network, rs: &mut RandomStream) {
    for layer in net.layers_mut() {
        match layer {
            Layer::Dense(d) => {
                let cols = d.weights.shape()[1];
                for o in 0..d.weights.shape()[0] {
                    d.weights.data_mut()[o * cols + cols - 1] = rs.range(-0.5, 0.5);
                }
            }
            Layer::Conv2D(c) => c.bias = random(c.bias.shape(), rs, -0.5, 0.5),
            _ => {}
        }
    }
}

/// A network with a batch of inputs and targets for gradient checking.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub name: &'static str,
    pub net: Network,
    pub x: Tensor,
    pub y: Tensor,
}

fn tied(a: Activation) -> Layer {
    Layer::Activation(ActivationLayer::tied(a))
}

/// Two-layer logistic MLP on 8 samples.
pub fn logistic_mlp_case(seed: u64) -> GradCase {
    let mut rs = RandomStream::new(seed);
    let mut net = Network::new(vec![
        Layer::Dense(DenseLayer::init(5, 4, &mut rs)),
        tied(Activation::Logistic),
        Layer::Dense(DenseLayer::init(4, 3, &mut rs)),
        tied(Activation::Logistic),
    ]);
    random_bias(&mut net, &mut rs);
    GradCase {
        name: "logistic-mlp",
        net,
        x: random(&[8, 5], &mut rs, -1.0, 1.0),
        y: random(&[8, 3], &mut rs, 0.0, 1.0),
    }
}

/// Dense/ReLU stack whose pre-activations stay clear of zero; draws are
/// repeated until that holds.
pub fn relu_stack_case(seed: u64) -> GradCase {
    let mut rs = RandomStream::new(seed);
    loop {
        let mut net = Network::new(vec![
            Layer::Dense(DenseLayer::init(5, 6, &mut rs)),
            tied(Activation::Relu),
            Layer::Dense(DenseLayer::init(6, 4, &mut rs)),
            tied(Activation::Relu),
            Layer::Dense(DenseLayer::init(4, 3, &mut rs)),
        ]);
        random_bias(&mut net, &mut rs);
        let case = GradCase {
            name: "relu-stack",
            net,
            x: random(&[8, 5], &mut rs, -1.0, 1.0),
            y: random(&[8, 3], &mut rs, 0.0, 1.0),
        };
        if check_kinks(&case.net, &case.x, 10.0 * DEFAULT_EPS).is_ok() {
            return case;
        }
    }
}

/// Convolution, logistic, quadratic-mean pooling, then a dense logistic
/// output, on 4 single-channel 8×8 images.
pub fn conv_block_case(seed: u64) -> GradCase {
    let mut rs = RandomStream::new(seed);
    let mut net = Network::new(vec![
        Layer::Conv2D(Conv2DLayer::init(3, 1, 3, 3, &mut rs)),
        tied(Activation::Logistic),
        Layer::Pool(PoolLayer::new(PoolKind::QuadraticMean, (2, 2)).expect("valid window")),
        Layer::Flatten(Flatten::default()),
        Layer::Dense(DenseLayer::init(27, 4, &mut rs)),
        tied(Activation::Logistic),
    ]);
    random_bias(&mut net, &mut rs);
    GradCase {
        name: "conv-qmpool-dense",
        net,
        x: random(&[4, 1, 8, 8], &mut rs, 0.0, 1.0),
        y: random(&[4, 4], &mut rs, 0.0, 1.0),
    }
}

/// Dense, batch norm, logistic, dense.
pub fn batch_norm_case(seed: u64) -> GradCase {
    let mut rs = RandomStream::new(seed);
    let mut bn = BatchNormLayer::new(4);
    bn.gamma = random(&[4], &mut rs, 0.5, 1.5);
    bn.beta = random(&[4], &mut rs, -0.5, 0.5);
    let mut net = Network::new(vec![
        Layer::Dense(DenseLayer::init(5, 4, &mut rs)),
        Layer::BatchNorm(bn),
        tied(Activation::Logistic),
        Layer::Dense(DenseLayer::init(4, 3, &mut rs)),
    ]);
    random_bias(&mut net, &mut rs);
    GradCase {
        name: "dense-batchnorm",
        net,
        x: random(&[8, 5], &mut rs, -1.0, 1.0),
        y: random(&[8, 3], &mut rs, 0.0, 1.0),
    }
}

/// Runs `trials` random direction-invariance checks; returns the number
/// of failures and a description of the first.
pub fn direction_invariance_trials(trials: usize, rs: &mut RandomStream) -> Result<(usize, Option<String>)> {
    let mut failures = 0;
    let mut first = None;
    for t in 0..trials {
        let n_in = 1 + (rs.next_f64() * 8.0) as usize;
        let n_out = 1 + (rs.next_f64() * 8.0) as usize;
        let m = 1 + (rs.next_f64() * 4.0) as usize;
        let w = random(&[n_out, n_in], rs, -1.0, 1.0);
        let d = random(&[m, n_out], rs, -1.0, 1.0);
        let g = random(&[m, n_in], rs, 0.1, 2.0);
        if !direction_invariance_check(&w, &d, &g)? {
            failures += 1;
            first.get_or_insert_with(|| format!("trial {t}: W={:?} D={:?} g={:?}", w.data(), d.data(), g.data()));
        }
    }
    Ok((failures, first))
}

/// Every backward source kind, jamming included.
pub fn all_source_kinds() -> Vec<SourceKind> {
    vec![
        SourceKind::TiedDerivative,
        SourceKind::Constant(1.0),
        SourceKind::LogisticDerivative,
        SourceKind::CANONICAL_RECT,
        SourceKind::CANONICAL_TRIANG,
        SourceKind::FullJam,
        SourceKind::PositiveJam,
        SourceKind::CANONICAL_RECT_JAM,
    ]
}

/// Runs `trials` random single-unit collinearity checks, cycling through
/// every source kind.
pub fn suc_direction_trials(trials: usize, rs: &mut RandomStream) -> Result<(usize, Option<String>)> {
    let kinds = all_source_kinds();
    let mut failures = 0;
    let mut first = None;
    for t in 0..trials {
        let n = 1 + (rs.next_f64() * 10.0) as usize;
        let mut x = random(&[n], rs, -2.0, 2.0);
        if x.data().iter().all(|&v| v == 0.0) {
            x = Tensor::filled(&[n], 1.0);
        }
        let delta = rs.range(-1.0, 1.0);
        let kind = kinds[t % kinds.len()];
        if !suc_update_direction_check(&x, delta, kind.into(), rs)? {
            failures += 1;
            first.get_or_insert_with(|| format!("trial {t}: {kind} x={:?} delta={delta}", x.data()));
        }
    }
    Ok((failures, first))
}

/// One line of the verification table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub check: String,
    pub seed: u64,
    pub passed: bool,
    pub detail: String,
}

/// Seeds of the standard verification suite.
pub const SUITE_SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];

/// Relative-error tolerance for tied gradient checks.
pub const GRAD_TOL: f64 = 1e-5;

/// Gradient checks on every reference case plus 100 trials of each
/// direction check, for every seed.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for case in [logistic_mlp_case(seed), relu_stack_case(seed), conv_block_case(seed), batch_norm_case(seed)] {
            let r = finite_difference_check(&case.net, &case.x, &case.y, DEFAULT_EPS)?;
            let layer = case.net.layers()[r.worst.layer].name();
            out.push(CheckOutcome {
                check: format!("gradient/{}", case.name),
                seed,
                passed: r.passes(GRAD_TOL),
                detail: format!(
                    "max rel err {:.2e} at {layer}[{}][{}] (analytic {:.6e}, numeric {:.6e})",
                    r.max_rel_error, r.worst.tensor, r.worst.element, r.analytic, r.numeric
                ),
            });
        }
        let mut rs = RandomStream::new(seed);
        for (name, (failures, first)) in [
            ("direction-invariance", direction_invariance_trials(100, &mut rs)?),
            ("suc-update-direction", suc_direction_trials(100, &mut rs)?),
        ] {
            out.push(CheckOutcome {
                check: name.to_string(),
                seed,
                passed: failures == 0,
                detail: first.unwrap_or_else(|| "100/100 trials".into()),
            });
        }
    }
    Ok(out)
}
