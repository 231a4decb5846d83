//! Forward activations and the elementwise backward factors that stand in
//! for their derivatives.
//!
//! A tied configuration multiplies the incoming delta by `f'(z)`. An untied
//! one multiplies it by some other non-negative `g(z)`: a constant, a window,
//! a triangle, the logistic derivative, or uniform noise ("jamming"). Every
//! factor is evaluated on the cached pre-activation `z`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RandomStream, Tensor};

/// Mean of U[0,1), the raw jamming draw.
const UNIFORM_MEAN: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Logistic,
    Relu,
    /// Heaviside step with `H(0) = 1`.
    HeavisideStep,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Logistic => logistic(z),
            Activation::Relu => z.max(0.0),
            Activation::HeavisideStep => step(z),
        }
    }

    /// Exact derivative. ReLU uses `H(z)` with the strict `z > 0` side; the
    /// step function's derivative is zero everywhere.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Logistic => logistic_derivative(z),
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::HeavisideStep => 0.0,
        }
    }

    /// Points where the derivative is undefined.
    pub fn has_kink_at_zero(self) -> bool {
        matches!(self, Activation::Relu | Activation::HeavisideStep)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "id",
            Activation::Logistic => "log",
            Activation::Relu => "relu",
            Activation::HeavisideStep => "step",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id" | "linear" => Ok(Activation::Identity),
            "log" => Ok(Activation::Logistic),
            "relu" => Ok(Activation::Relu),
            "step" => Ok(Activation::HeavisideStep),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn logistic_derivative(z: f64) -> f64 {
    let s = logistic(z);
    s * (1.0 - s)
}

fn step(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn activate(a: Activation, z: &Tensor) -> Tensor {
    z.map(|v| a.apply(v))
}

pub fn tied_derivative(a: Activation, z: &Tensor) -> Tensor {
    z.map(|v| a.derivative(v))
}

/// Heaviside forward pass, named separately so binary configurations read
/// as such.
pub fn binarize_forward(z: &Tensor) -> Tensor {
    activate(Activation::HeavisideStep, z)
}

/// Shape of the backward factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SourceKind {
    /// `f'(z)` of the forward activation.
    TiedDerivative,
    Constant(f64),
    /// `σ'(z)` whatever the forward activation is.
    LogisticDerivative,
    /// `height` on `lo ≤ z ≤ hi`, zero elsewhere.
    Rect { lo: f64, hi: f64, height: f64 },
    /// `peak · max(0, 1 − |z − center| / halfwidth)`.
    Triang { center: f64, halfwidth: f64, peak: f64 },
    /// U[0,1) everywhere.
    FullJam,
    /// U[0,1) where `z ≥ 0`, zero elsewhere.
    PositiveJam,
    /// U[0,1) on `lo ≤ z ≤ hi`, zero elsewhere.
    RectJam { lo: f64, hi: f64 },
}

impl SourceKind {
    pub const CANONICAL_RECT: SourceKind = SourceKind::Rect {
        lo: -5.0,
        hi: 5.0,
        height: 1.0,
    };
    pub const CANONICAL_TRIANG: SourceKind = SourceKind::Triang {
        center: 0.0,
        halfwidth: 5.0,
        peak: 1.0,
    };
    pub const CANONICAL_RECT_JAM: SourceKind = SourceKind::RectJam { lo: -5.0, hi: 5.0 };

    pub fn is_jamming(&self) -> bool {
        matches!(
            self,
            SourceKind::FullJam | SourceKind::PositiveJam | SourceKind::RectJam { .. }
        )
    }

    /// Checks that parameters are finite, non-negative and ordered.
    pub fn validate(self) -> Result<Self> {
        let ok = match self {
            SourceKind::Constant(c) => c.is_finite() && c >= 0.0,
            SourceKind::Rect { lo, hi, height } => {
                lo.is_finite() && hi.is_finite() && lo <= hi && height.is_finite() && height >= 0.0
            }
            SourceKind::Triang {
                center,
                halfwidth,
                peak,
            } => center.is_finite() && halfwidth.is_finite() && halfwidth > 0.0 && peak.is_finite() && peak >= 0.0,
            SourceKind::RectJam { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            _ => true,
        };
        if ok {
            Ok(self)
        } else {
            Err(Error::Config(format!(
                "gradient source {self} has invalid parameters (factors must be non-negative)"
            )))
        }
    }

    /// Deterministic factor at one point; jamming kinds return their mask
    /// (1 on the support, 0 off it).
    fn deterministic(&self, z: f64, tied: Activation) -> f64 {
        match *self {
            SourceKind::TiedDerivative => tied.derivative(z),
            SourceKind::Constant(c) => c,
            SourceKind::LogisticDerivative => logistic_derivative(z),
            SourceKind::Rect { lo, hi, height } => {
                if lo <= z && z <= hi {
                    height
                } else {
                    0.0
                }
            }
            SourceKind::Triang {
                center,
                halfwidth,
                peak,
            } => peak * (1.0 - (z - center).abs() / halfwidth).max(0.0),
            SourceKind::FullJam => 1.0,
            SourceKind::PositiveJam => {
                if z >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            SourceKind::RectJam { lo, hi } => {
                if lo <= z && z <= hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            SourceKind::TiedDerivative => write!(f, "d"),
            SourceKind::Constant(c) => write!(f, "const:{c}"),
            SourceKind::LogisticDerivative => write!(f, "dlog"),
            SourceKind::Rect { lo, hi, height } => write!(f, "rect:{lo}:{hi}:{height}"),
            SourceKind::Triang {
                center,
                halfwidth,
                peak,
            } => write!(f, "triang:{center}:{halfwidth}:{peak}"),
            SourceKind::FullJam => write!(f, "fj"),
            SourceKind::PositiveJam => write!(f, "pj"),
            SourceKind::RectJam { lo, hi } => write!(f, "rj:{lo}:{hi}"),
        }
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    /// Parses `d`, `const:<c>`, `dlog`, `rect:<lo>:<hi>:<h>`,
    /// `triang:<c>:<w>:<p>`, `fj`, `pj`, `rj:<lo>:<hi>`. Bare `rect`,
    /// `triang`, `rj` and `1` select the canonical parameters.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let head = parts.next().unwrap_or_default();
        let args: Vec<f64> = parts
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad number {p:?} in gradient source {s:?}")))
            })
            .collect::<Result<_>>()?;
        let arity = |n: usize| -> Result<()> {
            if args.len() == n {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "gradient source {head:?} takes {n} parameters, got {} in {s:?}",
                    args.len()
                )))
            }
        };
        let kind = match head {
            "d" => {
                arity(0)?;
                SourceKind::TiedDerivative
            }
            "1" => {
                arity(0)?;
                SourceKind::Constant(1.0)
            }
            "const" => {
                arity(1)?;
                SourceKind::Constant(args[0])
            }
            "dlog" => {
                arity(0)?;
                SourceKind::LogisticDerivative
            }
            "rect" if args.is_empty() => SourceKind::CANONICAL_RECT,
            "rect" => {
                arity(3)?;
                SourceKind::Rect {
                    lo: args[0],
                    hi: args[1],
                    height: args[2],
                }
            }
            "triang" if args.is_empty() => SourceKind::CANONICAL_TRIANG,
            "triang" => {
                arity(3)?;
                SourceKind::Triang {
                    center: args[0],
                    halfwidth: args[1],
                    peak: args[2],
                }
            }
            "fj" => {
                arity(0)?;
                SourceKind::FullJam
            }
            "pj" => {
                arity(0)?;
                SourceKind::PositiveJam
            }
            "rj" if args.is_empty() => SourceKind::CANONICAL_RECT_JAM,
            "rj" => {
                arity(2)?;
                SourceKind::RectJam {
                    lo: args[0],
                    hi: args[1],
                }
            }
            other => return Err(Error::Config(format!("unknown gradient source {other:?}"))),
        };
        kind.validate()
    }
}

/// How jammed factors are rescaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    None,
    /// Scale jammed draws so their mean over the minibatch tracks the
    /// mean of `|f'(z)|` for the forward activation, counting masked-out
    /// elements as zeros.
    MatchTiedMean,
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Normalization::None),
            "match-tied-mean" => Ok(Normalization::MatchTiedMean),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientSource {
    pub kind: SourceKind,
    pub normalization: Normalization,
}

impl GradientSource {
    pub fn new(kind: SourceKind) -> Self {
        Self {
            kind,
            normalization: Normalization::None,
        }
    }

    pub fn tied() -> Self {
        Self::new(SourceKind::TiedDerivative)
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }
}

impl From<SourceKind> for GradientSource {
    fn from(kind: SourceKind) -> Self {
        Self::new(kind)
    }
}

/// What a backward factor may look at.
pub struct BackwardContext<'a> {
    /// Cached pre-activation.
    pub z: &'a Tensor,
    /// Forward activation whose derivative `TiedDerivative` reproduces.
    pub tied_kind: Activation,
    pub rng: Option<&'a mut RandomStream>,
    /// Mean `|f'(z)|` over the minibatch; computed from `z` when absent.
    pub batch_mean_tied_grad: Option<f64>,
}

impl<'a> BackwardContext<'a> {
    pub fn new(z: &'a Tensor, tied_kind: Activation) -> Self {
        Self {
            z,
            tied_kind,
            rng: None,
            batch_mean_tied_grad: None,
        }
    }

    pub fn with_rng(mut self, rng: &'a mut RandomStream) -> Self {
        self.rng = Some(rng);
        self
    }
}

/// Mean of `|f'(z)|` over every element of `z`.
pub fn mean_abs_tied_derivative(a: Activation, z: &Tensor) -> f64 {
    z.data().iter().map(|&v| a.derivative(v).abs()).sum::<f64>() / z.len() as f64
}

/// Elementwise backward factor `m(z)` for `g`.
pub fn backward_factor(g: &GradientSource, ctx: BackwardContext<'_>) -> Result<Tensor> {
    let BackwardContext {
        z,
        tied_kind,
        rng,
        batch_mean_tied_grad,
    } = ctx;
    let kind = g.kind;
    if !kind.is_jamming() {
        return Ok(z.map(|v| kind.deterministic(v, tied_kind)));
    }
    let rng = rng.ok_or_else(|| {
        Error::Config(format!("jamming source {kind} needs a random stream"))
    })?;
    let scale = match g.normalization {
        Normalization::None => 1.0,
        Normalization::MatchTiedMean => {
            let tied = batch_mean_tied_grad.unwrap_or_else(|| mean_abs_tied_derivative(tied_kind, z));
            // Draws only land inside the mask, so its coverage enters the
            // expected mean alongside that of U[0,1).
            let inside = z.data().iter().filter(|&&v| kind.deterministic(v, tied_kind) > 0.0).count();
            if inside == 0 {
                0.0
            } else {
                tied * z.len() as f64 / (UNIFORM_MEAN * inside as f64)
            }
        }
    };
    // One draw per element, including masked-out ones, so the stream
    // advances identically whatever the pre-activations are.
    let data = z
        .data()
        .iter()
        .map(|&v| {
            let u = rng.next_f64();
            kind.deterministic(v, tied_kind) * u * scale
        })
        .collect();
    Ok(Tensor::from_parts(z.shape().to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(values: &[f64]) -> Tensor {
        Tensor::vector(values).unwrap()
    }

    fn factor(kind: SourceKind, z: &[f64]) -> Vec<f64> {
        let z = t(z);
        let mut rng = RandomStream::new(1);
        backward_factor(
            &GradientSource::new(kind),
            BackwardContext::new(&z, Activation::Logistic).with_rng(&mut rng),
        )
        .unwrap()
        .into_data()
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Logistic.apply(0.0), 0.5);
        assert_eq!(Activation::Relu.apply(-2.5), 0.0);
        assert_eq!(Activation::Relu.apply(3.0), 3.0);
        assert_eq!(Activation::HeavisideStep.apply(0.0), 1.0);
        assert_eq!(Activation::HeavisideStep.apply(-1e-300), 0.0);
    }

    #[test]
    fn tied_derivative_values() {
        assert_eq!(Activation::Logistic.derivative(0.0), 0.25);
        assert_eq!(Activation::Relu.derivative(-1.0), 0.0);
        assert_eq!(Activation::Relu.derivative(2.0), 1.0);
        let z = t(&[-3.0, 0.0, 7.5]);
        assert_eq!(tied_derivative(Activation::Identity, &z).data(), &[1.0; 3]);
        assert_eq!(tied_derivative(Activation::HeavisideStep, &z).data(), &[0.0; 3]);
    }

    #[test]
    fn binarize_values() {
        assert_eq!(binarize_forward(&t(&[-0.1, 0.0, 2.3])).data(), &[0.0, 1.0, 1.0]);
        assert_eq!(binarize_forward(&t(&[-1.0, -2.0])).data(), &[0.0, 0.0]);
    }

    #[test]
    fn logistic_is_stable_at_extremes() {
        assert_eq!(logistic(-1000.0), 0.0);
        assert_eq!(logistic(1000.0), 1.0);
        assert!(logistic(-30.0) > 0.0);
    }

    #[test]
    fn constant_rect_and_positive_jam_examples() {
        assert_eq!(factor(SourceKind::Constant(1.0), &[-4.0, 0.0, 9.0]), vec![1.0; 3]);
        assert_eq!(factor(SourceKind::CANONICAL_RECT, &[0.0, 6.0, -5.0, 5.0]), vec![1.0, 0.0, 1.0, 1.0]);
        let pj = factor(SourceKind::PositiveJam, &[-3.0, 3.0]);
        assert_eq!(pj[0], 0.0);
        assert!((0.0..1.0).contains(&pj[1]));
    }

    #[test]
    fn triangle_shape() {
        let v = factor(SourceKind::CANONICAL_TRIANG, &[0.0, 2.5, -2.5, 5.0, 7.0]);
        assert_eq!(v, vec![1.0, 0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn logistic_derivative_source_ignores_forward_kind() {
        let z = t(&[0.0, 1.0]);
        let f = backward_factor(
            &GradientSource::new(SourceKind::LogisticDerivative),
            BackwardContext::new(&z, Activation::Relu),
        )
        .unwrap();
        assert_eq!(f.data()[0], 0.25);
        assert_eq!(f.data()[1], logistic_derivative(1.0));
    }

    #[test]
    fn jamming_without_rng_is_a_config_error() {
        let z = t(&[1.0]);
        for kind in [SourceKind::FullJam, SourceKind::PositiveJam, SourceKind::CANONICAL_RECT_JAM] {
            let err = backward_factor(&kind.into(), BackwardContext::new(&z, Activation::Relu));
            assert!(matches!(err, Err(Error::Config(_))));
        }
    }

    #[test]
    fn rect_jam_support() {
        let v = factor(SourceKind::CANONICAL_RECT_JAM, &[-6.0, -5.0, 0.0, 5.0, 5.5]);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[4], 0.0);
        assert!(v[1..4].iter().all(|u| (0.0..1.0).contains(u)));
    }

    #[test]
    fn match_tied_mean_tracks_batch_mean() {
        let mut rs = RandomStream::new(17);
        let z = Tensor::vector(&(0..100_000).map(|_| rs.range(-4.0, 4.0)).collect::<Vec<_>>()).unwrap();
        for act in [Activation::Logistic, Activation::Relu] {
            let target = mean_abs_tied_derivative(act, &z);
            for kind in [SourceKind::FullJam, SourceKind::PositiveJam, SourceKind::RectJam { lo: -1.0, hi: 2.0 }] {
                let g = GradientSource::new(kind).with_normalization(Normalization::MatchTiedMean);
                let mut rng = RandomStream::new(3);
                let f = backward_factor(&g, BackwardContext::new(&z, act).with_rng(&mut rng)).unwrap();
                assert!(((f.mean() - target) / target).abs() < 0.02, "{act}/{kind}: {} vs {target}", f.mean());
            }
        }
    }

    #[test]
    fn parse_round_trips_names() {
        for name in ["d", "const:0.5", "dlog", "rect:-5:5:1", "triang:0:5:1", "fj", "pj", "rj:-5:5"] {
            let kind: SourceKind = name.parse().unwrap();
            assert_eq!(kind.to_string(), name);
        }
        assert_eq!("rect".parse::<SourceKind>().unwrap(), SourceKind::CANONICAL_RECT);
        assert_eq!("1".parse::<SourceKind>().unwrap(), SourceKind::Constant(1.0));
        assert!("const:-1".parse::<SourceKind>().is_err());
        assert!("triang:0:0:1".parse::<SourceKind>().is_err());
        assert!("rect:1:2".parse::<SourceKind>().is_err());
        assert!("bogus".parse::<SourceKind>().is_err());
        for name in ["id", "log", "relu", "step"] {
            assert_eq!(name.parse::<Activation>().unwrap().name(), name);
        }
    }

    #[test]
    fn tied_derivative_matches_central_difference() {
        let mut rs = RandomStream::new(2024);
        let h = 1e-6;
        for a in [Activation::Logistic, Activation::Relu, Activation::Identity] {
            let mut checked = 0;
            while checked < 100 {
                let z = rs.range(-6.0, 6.0);
                if a.has_kink_at_zero() && z.abs() <= 1e-3 {
                    continue;
                }
                let fd = (a.apply(z + h) - a.apply(z - h)) / (2.0 * h);
                assert!((fd - a.derivative(z)).abs() < 1e-6, "{a} at {z}");
                checked += 1;
            }
        }
    }

    fn any_kind() -> impl Strategy<Value = SourceKind> {
        prop_oneof![
            Just(SourceKind::TiedDerivative),
            (0.0..3.0f64).prop_map(SourceKind::Constant),
            Just(SourceKind::LogisticDerivative),
            (-6.0..0.0f64, 0.0..6.0f64, 0.0..2.0f64).prop_map(|(lo, hi, height)| SourceKind::Rect { lo, hi, height }),
            (-2.0..2.0f64, 0.1..6.0f64, 0.0..2.0f64)
                .prop_map(|(center, halfwidth, peak)| SourceKind::Triang { center, halfwidth, peak }),
            Just(SourceKind::FullJam),
            Just(SourceKind::PositiveJam),
            (-6.0..0.0f64, 0.0..6.0f64).prop_map(|(lo, hi)| SourceKind::RectJam { lo, hi }),
        ]
    }

    fn any_activation() -> impl Strategy<Value = Activation> {
        prop_oneof![
            Just(Activation::Identity),
            Just(Activation::Logistic),
            Just(Activation::Relu),
            Just(Activation::HeavisideStep),
        ]
    }

    proptest! {
        #[test]
        fn factors_are_non_negative(
            kind in any_kind(),
            act in any_activation(),
            zs in prop::collection::vec(-20.0..20.0f64, 1..40),
            seed in any::<u64>(),
            normalized in any::<bool>(),
        ) {
            let z = Tensor::vector(&zs).unwrap();
            let mut rng = RandomStream::new(seed);
            let norm = if normalized { Normalization::MatchTiedMean } else { Normalization::None };
            let g = GradientSource::new(kind).with_normalization(norm);
            let f = backward_factor(&g, BackwardContext::new(&z, act).with_rng(&mut rng)).unwrap();
            prop_assert!(f.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        }

        #[test]
        fn windows_vanish_outside_support(z in prop_oneof![-100.0..-5.0001f64, 5.0001..100.0f64]) {
            prop_assert_eq!(factor(SourceKind::CANONICAL_RECT, &[z])[0], 0.0);
            prop_assert_eq!(factor(SourceKind::CANONICAL_TRIANG, &[z])[0], 0.0);
            prop_assert_eq!(factor(SourceKind::CANONICAL_RECT_JAM, &[z])[0], 0.0);
        }
    }
}
