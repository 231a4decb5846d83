//! Network blocks. Every block maps a batch to a batch; the leading extent
//! is always the sample index. Backward passes return raw gradients (sums
//! over the batch), leaving the learning rate and clipping to the optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad_sources::{backward_factor, Activation, BackwardContext, GradientSource};
use crate::numerics::{kernels, RandomStream, Tensor};

/// Whether a forward pass is part of a training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Caches inputs for backward and uses batch statistics.
    Train,
    /// No caching; batch norm uses running statistics.
    Eval,
}

fn glorot(rs: &mut RandomStream, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rs.range(-limit, limit)).collect()
}

fn expect_rank(x: &Tensor, rank: usize, op: &str) -> Result<()> {
    if x.ndim() == rank {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "{op} expects a rank-{rank} batch, got shape {:?}",
            x.shape()
        )))
    }
}

fn expect_shape(x: &Tensor, shape: &[usize], op: &str) -> Result<()> {
    if x.shape() == shape {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "{op}: expected shape {shape:?}, got {:?}",
            x.shape()
        )))
    }
}

/// Fully connected layer. `weights` is `n_out × (n_in + 1)`; the last
/// column is the bias, applied to an implicit constant input of 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Tensor,
    #[serde(skip)]
    cache: Option<Tensor>,
}

impl DenseLayer {
    pub fn new(weights: Tensor) -> Result<Self> {
        let [n_out, cols] = weights.dims2("dense weights")?;
        if n_out == 0 || cols < 2 {
            return Err(Error::Dimension(format!(
                "dense weights need at least one input column plus bias, got {:?}",
                weights.shape()
            )));
        }
        Ok(Self {
            weights: weights.ensure_finite("dense weights")?,
            cache: None,
        })
    }

    pub fn init(n_in: usize, n_out: usize, rs: &mut RandomStream) -> Self {
        let limit_draws = glorot(rs, n_out * n_in, n_in, n_out);
        let mut data = Vec::with_capacity(n_out * (n_in + 1));
        for row in limit_draws.chunks(n_in) {
            data.extend_from_slice(row);
            data.push(0.0);
        }
        Self {
            weights: Tensor::from_parts(vec![n_out, n_in + 1], data),
            cache: None,
        }
    }

    pub fn n_in(&self) -> usize {
        self.weights.shape()[1] - 1
    }

    pub fn n_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn forward(&mut self, z: &Tensor, mode: Mode) -> Result<Tensor> {
        let [m, n_in] = z.dims2("dense forward")?;
        if n_in != self.n_in() {
            return Err(Error::Dimension(format!(
                "dense forward: layer takes {} inputs, batch has {n_in}",
                self.n_in()
            )));
        }
        let n_out = self.n_out();
        let w = self.weights.data();
        let mut out = vec![0.0; m * n_out];
        kernels::gemm_nt(m, n_in, n_out, z.data(), n_in, w, n_in + 1, &mut out, n_out);
        for row in out.chunks_mut(n_out) {
            for (o, v) in row.iter_mut().enumerate() {
                *v += w[o * (n_in + 1) + n_in];
            }
        }
        if mode == Mode::Train {
            self.cache = Some(z.clone());
        }
        Tensor::from_parts(vec![m, n_out], out).ensure_finite("dense forward")
    }

    /// Returns `(ΔW_raw, D_in)` with `ΔW_raw = D_outᵀ·[Z;1]` and
    /// `D_in = D_out·W` (bias column dropped).
    pub fn backward(&mut self, d_out: &Tensor) -> Result<(Tensor, Tensor)> {
        let (dw, d_in) = self.backward_inner(d_out, true)?;
        Ok((dw, d_in.expect("input gradient requested")))
    }

    pub(crate) fn backward_inner(&mut self, d_out: &Tensor, need_input: bool) -> Result<(Tensor, Option<Tensor>)> {
        let z = self.cache.take().ok_or(Error::MissingCache("dense"))?;
        let [m, n_in] = z.dims2("dense cache")?;
        let n_out = self.n_out();
        expect_shape(d_out, &[m, n_out], "dense backward")?;
        let d = d_out.data();
        let mut dw = vec![0.0; n_out * (n_in + 1)];
        kernels::gemm_tn(n_out, m, n_in, d, n_out, z.data(), n_in, &mut dw, n_in + 1);
        for row in d.chunks(n_out) {
            for (o, &v) in row.iter().enumerate() {
                dw[o * (n_in + 1) + n_in] += v;
            }
        }
        let d_in = need_input.then(|| {
            let mut d_in = vec![0.0; m * n_in];
            kernels::gemm_nn(m, n_out, n_in, d, n_out, self.weights.data(), n_in + 1, &mut d_in, n_in);
            Tensor::from_parts(vec![m, n_in], d_in)
        });
        Ok((Tensor::from_parts(vec![n_out, n_in + 1], dw), d_in))
    }
}

/// Valid, stride-1 convolution over `m × C × H × W` batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2DLayer {
    /// `F × C × kH × kW`.
    pub kernels: Tensor,
    /// `F`.
    pub bias: Tensor,
    #[serde(skip)]
    cache: Option<Tensor>,
}

/// Raw gradients of a convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub kernels: Tensor,
    pub bias: Tensor,
}

impl Conv2DLayer {
    pub fn new(kernels: Tensor, bias: Tensor) -> Result<Self> {
        expect_rank(&kernels, 4, "conv kernels")?;
        expect_shape(&bias, &[kernels.shape()[0]], "conv bias")?;
        Ok(Self {
            kernels: kernels.ensure_finite("conv kernels")?,
            bias: bias.ensure_finite("conv bias")?,
            cache: None,
        })
    }

    pub fn init(filters: usize, channels: usize, kh: usize, kw: usize, rs: &mut RandomStream) -> Self {
        let area = kh * kw;
        let data = glorot(rs, filters * channels * area, channels * area, filters * area);
        Self {
            kernels: Tensor::from_parts(vec![filters, channels, kh, kw], data),
            bias: Tensor::zeros(&[filters]),
            cache: None,
        }
    }

    fn geometry(&self, x: &Tensor) -> Result<ConvGeometry> {
        expect_rank(x, 4, "conv forward")?;
        let [f, c, kh, kw] = <[usize; 4]>::try_from(self.kernels.shape()).expect("rank checked");
        let [m, xc, h, w] = <[usize; 4]>::try_from(x.shape()).expect("rank checked");
        if xc != c {
            return Err(Error::Dimension(format!("conv: kernels expect {c} channels, input has {xc}")));
        }
        if kh > h || kw > w {
            return Err(Error::Dimension(format!("conv: kernel {kh}×{kw} larger than input {h}×{w}")));
        }
        Ok(ConvGeometry {
            m,
            f,
            c,
            h,
            w,
            kh,
            kw,
            oh: h - kh + 1,
            ow: w - kw + 1,
        })
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let g = self.geometry(x)?;
        let (ckk, p) = (g.c * g.kh * g.kw, g.oh * g.ow);
        let mut cols = vec![0.0; ckk * p];
        let mut out = vec![0.0; g.m * g.f * p];
        let in_len = g.c * g.h * g.w;
        for (s, dst) in out.chunks_mut(g.f * p).enumerate() {
            kernels::im2col(&x.data()[s * in_len..(s + 1) * in_len], g.c, g.h, g.w, g.kh, g.kw, &mut cols);
            kernels::gemm_nn(g.f, ckk, p, self.kernels.data(), ckk, &cols, p, dst, p);
            for (plane, &b) in dst.chunks_mut(p).zip(self.bias.data()) {
                plane.iter_mut().for_each(|v| *v += b);
            }
        }
        if mode == Mode::Train {
            self.cache = Some(x.clone());
        }
        Tensor::from_parts(vec![g.m, g.f, g.oh, g.ow], out).ensure_finite("conv forward")
    }

    pub fn backward(&mut self, d_out: &Tensor) -> Result<(ConvGrads, Tensor)> {
        let (grads, d_in) = self.backward_inner(d_out, true)?;
        Ok((grads, d_in.expect("input gradient requested")))
    }

    pub(crate) fn backward_inner(&mut self, d_out: &Tensor, need_input: bool) -> Result<(ConvGrads, Option<Tensor>)> {
        let x = self.cache.take().ok_or(Error::MissingCache("conv2d"))?;
        let g = self.geometry(&x)?;
        expect_shape(d_out, &[g.m, g.f, g.oh, g.ow], "conv backward")?;
        let (ckk, p, in_len) = (g.c * g.kh * g.kw, g.oh * g.ow, g.c * g.h * g.w);
        let mut cols = vec![0.0; ckk * p];
        let mut dcols = vec![0.0; ckk * p];
        let mut dk = vec![0.0; g.f * ckk];
        let mut db = vec![0.0; g.f];
        let mut d_in = if need_input { vec![0.0; g.m * in_len] } else { Vec::new() };
        for s in 0..g.m {
            let ds = &d_out.data()[s * g.f * p..(s + 1) * g.f * p];
            kernels::im2col(&x.data()[s * in_len..(s + 1) * in_len], g.c, g.h, g.w, g.kh, g.kw, &mut cols);
            kernels::gemm_nt(g.f, p, ckk, ds, p, &cols, p, &mut dk, ckk);
            for (b, plane) in db.iter_mut().zip(ds.chunks(p)) {
                *b += plane.iter().sum::<f64>();
            }
            if need_input {
                dcols.iter_mut().for_each(|v| *v = 0.0);
                kernels::gemm_tn(ckk, g.f, p, self.kernels.data(), ckk, ds, p, &mut dcols, p);
                kernels::col2im_add(&dcols, g.c, g.h, g.w, g.kh, g.kw, &mut d_in[s * in_len..(s + 1) * in_len]);
            }
        }
        let grads = ConvGrads {
            kernels: Tensor::from_parts(self.kernels.shape().to_vec(), dk),
            bias: Tensor::from_parts(vec![g.f], db),
        };
        Ok((grads, need_input.then(|| Tensor::from_parts(x.shape().to_vec(), d_in))))
    }
}

struct ConvGeometry {
    m: usize,
    f: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Average,
    /// Root mean square of the window.
    QuadraticMean,
    Max,
}

/// Non-overlapping window pooling over `m × C × H × W` batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolLayer {
    pub kind: PoolKind,
    pub window: (usize, usize),
    #[serde(skip)]
    cache: Option<PoolCache>,
}

#[derive(Debug, Clone, PartialEq)]
struct PoolCache {
    input: Tensor,
    output: Tensor,
}

impl PoolLayer {
    pub fn new(kind: PoolKind, window: (usize, usize)) -> Result<Self> {
        if window.0 == 0 || window.1 == 0 {
            return Err(Error::Config("pool window must be positive".into()));
        }
        Ok(Self {
            kind,
            window,
            cache: None,
        })
    }

    /// `[planes, H, W]` where planes = m·C.
    fn dims(&self, x: &Tensor) -> Result<[usize; 3]> {
        expect_rank(x, 4, "pool")?;
        let [m, c, h, w] = <[usize; 4]>::try_from(x.shape()).expect("rank checked");
        let (ph, pw) = self.window;
        if h % ph != 0 || w % pw != 0 {
            return Err(Error::Dimension(format!(
                "pool window {ph}×{pw} does not tile input {h}×{w}"
            )));
        }
        Ok([m * c, h, w])
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let [planes, h, w] = self.dims(x)?;
        let (ph, pw) = self.window;
        let (oh, ow) = (h / ph, w / pw);
        let area = (ph * pw) as f64;
        let mut out = Vec::with_capacity(planes * oh * ow);
        for plane in x.data().chunks(h * w) {
            for oi in 0..oh {
                for oj in 0..ow {
                    let cells = (0..ph).flat_map(|di| {
                        let row = (oi * ph + di) * w + oj * pw;
                        plane[row..row + pw].iter().copied()
                    });
                    out.push(match self.kind {
                        PoolKind::Average => cells.sum::<f64>() / area,
                        PoolKind::QuadraticMean => (cells.map(|v| v * v).sum::<f64>() / area).sqrt(),
                        PoolKind::Max => cells.fold(f64::NEG_INFINITY, f64::max),
                    });
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[2] = oh;
        shape[3] = ow;
        let output = Tensor::from_parts(shape, out).ensure_finite("pool forward")?;
        if mode == Mode::Train {
            self.cache = Some(PoolCache {
                input: x.clone(),
                output: output.clone(),
            });
        }
        Ok(output)
    }

    pub fn backward(&mut self, d_out: &Tensor) -> Result<Tensor> {
        let PoolCache { input, output } = self.cache.take().ok_or(Error::MissingCache("pool"))?;
        expect_shape(d_out, output.shape(), "pool backward")?;
        let [_, h, w] = self.dims(&input)?;
        let (ph, pw) = self.window;
        let (oh, ow) = (h / ph, w / pw);
        let area = (ph * pw) as f64;
        let mut d_in = vec![0.0; input.len()];
        let planes = input.data().chunks(h * w).zip(d_in.chunks_mut(h * w));
        for (pi, (plane, dplane)) in planes.enumerate() {
            for oi in 0..oh {
                for oj in 0..ow {
                    let k = pi * oh * ow + oi * ow + oj;
                    let (d, y) = (d_out.data()[k], output.data()[k]);
                    let window = (0..ph).flat_map(|di| {
                        let row = (oi * ph + di) * w + oj * pw;
                        row..row + pw
                    });
                    match self.kind {
                        PoolKind::Average => window.for_each(|i| dplane[i] = d / area),
                        PoolKind::QuadraticMean => {
                            // Subgradient 0 where the window is all zeros.
                            if y != 0.0 {
                                window.for_each(|i| dplane[i] = d * plane[i] / (area * y));
                            }
                        }
                        PoolKind::Max => {
                            let mut best = None;
                            for i in window {
                                if best.is_none_or(|b: usize| plane[i] > plane[b]) {
                                    best = Some(i);
                                }
                            }
                            dplane[best.expect("non-empty window")] = d;
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_parts(input.shape().to_vec(), d_in))
    }
}

/// Elementwise activation with an independent backward factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationLayer {
    pub forward: Activation,
    pub backward: GradientSource,
    #[serde(skip)]
    cache: Option<Tensor>,
}

impl ActivationLayer {
    pub fn new(forward: Activation, backward: GradientSource) -> Self {
        Self {
            forward,
            backward,
            cache: None,
        }
    }

    pub fn tied(forward: Activation) -> Self {
        Self::new(forward, GradientSource::tied())
    }

    pub fn forward(&mut self, z: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Train {
            self.cache = Some(z.clone());
        }
        Ok(z.map(|v| self.forward.apply(v)))
    }

    /// `D_in = D_out ⊙ m(z)`. The stream is needed only by jamming sources.
    pub fn backward(&mut self, d_out: &Tensor, rng: Option<&mut RandomStream>) -> Result<Tensor> {
        let z = self.cache.take().ok_or(Error::MissingCache("activation"))?;
        expect_shape(d_out, z.shape(), "activation backward")?;
        let mut ctx = BackwardContext::new(&z, self.forward);
        ctx.rng = rng;
        let factor = backward_factor(&self.backward, ctx)?;
        d_out.hadamard(&factor)
    }
}

/// Batch normalization over features (rank-2 input) or channels (rank-4
/// input, statistics over samples and pixels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
    #[serde(skip)]
    cache: Option<BnCache>,
}

#[derive(Debug, Clone, PartialEq)]
struct BnCache {
    shape: Vec<usize>,
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Raw gradients of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Iterates `(channel, flat index)` for rank-2 or rank-4 layouts.
fn channel_of(shape: &[usize]) -> impl Fn(usize) -> usize + '_ {
    move |i| {
        if shape.len() == 2 {
            i % shape[1]
        } else {
            (i / (shape[2] * shape[3])) % shape[1]
        }
    }
}

impl BatchNormLayer {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
            cache: None,
        }
    }

    // Negated comparisons so that NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn with_params(mut self, eps: f64, momentum: f64) -> Result<Self> {
        if !(eps > 0.0) || !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(format!(
                "batch norm needs eps > 0 and momentum in (0,1), got {eps}, {momentum}"
            )));
        }
        self.eps = eps;
        self.momentum = momentum;
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        if !(x.ndim() == 2 || x.ndim() == 4) || x.shape()[1] != self.channels() {
            return Err(Error::Dimension(format!(
                "batch norm over {} channels cannot take shape {:?}",
                self.channels(),
                x.shape()
            )));
        }
        Ok(x.len() / self.channels())
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let per_channel = self.check(x)?;
        let c = self.channels();
        let chan = channel_of(x.shape());
        let (mean, var) = match mode {
            Mode::Eval => (self.running_mean.data().to_vec(), self.running_var.data().to_vec()),
            Mode::Train => {
                if x.shape()[0] < 2 {
                    return Err(Error::Precondition(
                        "batch norm needs at least two samples in training mode".into(),
                    ));
                }
                let mut mean = vec![0.0; c];
                for (i, &v) in x.data().iter().enumerate() {
                    mean[chan(i)] += v;
                }
                mean.iter_mut().for_each(|v| *v /= per_channel as f64);
                let mut var = vec![0.0; c];
                for (i, &v) in x.data().iter().enumerate() {
                    let d = v - mean[chan(i)];
                    var[chan(i)] += d * d;
                }
                var.iter_mut().for_each(|v| *v /= per_channel as f64);
                let unbias = per_channel as f64 / (per_channel as f64 - 1.0);
                let mom = self.momentum;
                for k in 0..c {
                    let rm = &mut self.running_mean.data_mut()[k];
                    *rm = (1.0 - mom) * *rm + mom * mean[k];
                    let rv = &mut self.running_var.data_mut()[k];
                    *rv = (1.0 - mom) * *rv + mom * var[k] * unbias;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let x_hat: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[chan(i)]) * inv_std[chan(i)])
            .collect();
        let (g, b) = (self.gamma.data(), self.beta.data());
        let out = x_hat.iter().enumerate().map(|(i, &v)| g[chan(i)] * v + b[chan(i)]).collect();
        if mode == Mode::Train {
            self.cache = Some(BnCache {
                shape: x.shape().to_vec(),
                x_hat,
                inv_std,
            });
        }
        Tensor::from_parts(x.shape().to_vec(), out).ensure_finite("batch norm forward")
    }

    pub fn backward(&mut self, d_out: &Tensor) -> Result<(BnGrads, Tensor)> {
        let BnCache { shape, x_hat, inv_std } = self.cache.take().ok_or(Error::MissingCache("batch norm"))?;
        expect_shape(d_out, &shape, "batch norm backward")?;
        let c = self.channels();
        let n = (x_hat.len() / c) as f64;
        let chan = channel_of(&shape);
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (i, (&d, &xh)) in d_out.data().iter().zip(&x_hat).enumerate() {
            dbeta[chan(i)] += d;
            dgamma[chan(i)] += d * xh;
        }
        let g = self.gamma.data();
        let d_in = d_out
            .data()
            .iter()
            .zip(&x_hat)
            .enumerate()
            .map(|(i, (&d, &xh))| {
                let k = chan(i);
                g[k] * inv_std[k] * (d - dbeta[k] / n - xh * dgamma[k] / n)
            })
            .collect::<Vec<f64>>();
        drop(chan);
        let grads = BnGrads {
            gamma: Tensor::from_parts(vec![c], dgamma),
            beta: Tensor::from_parts(vec![c], dbeta),
        };
        Ok((grads, Tensor::from_parts(shape, d_in)))
    }
}

/// Collapses `m × …` to `m × (product of the rest)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Flatten {
    #[serde(skip)]
    cache: Option<Vec<usize>>,
}

impl Flatten {
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Train {
            self.cache = Some(x.shape().to_vec());
        }
        let m = x.shape()[0];
        x.clone().reshape(vec![m, x.len() / m])
    }

    pub fn backward(&mut self, d_out: &Tensor) -> Result<Tensor> {
        let shape = self.cache.take().ok_or(Error::MissingCache("flatten"))?;
        d_out.clone().reshape(shape)
    }
}

/// Symmetric zero padding of the two spatial extents of `m × C × H × W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pad {
    pub amount: usize,
}

impl Pad {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 4, "pad")?;
        let [m, c, h, w] = <[usize; 4]>::try_from(x.shape()).expect("rank checked");
        let p = self.amount;
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        let mut out = vec![0.0; m * c * ph * pw];
        for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(ph * pw)) {
            for i in 0..h {
                dst[(i + p) * pw + p..(i + p) * pw + p + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        Ok(Tensor::from_parts(vec![m, c, ph, pw], out))
    }
}

/// Raw gradients for one layer, in the order of [`Layer::params`].
pub type LayerGrads = Vec<Tensor>;

/// Any network block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Dense(DenseLayer),
    Conv2D(Conv2DLayer),
    Pool(PoolLayer),
    Activation(ActivationLayer),
    BatchNorm(BatchNormLayer),
    Flatten(Flatten),
    Pad(Pad),
}

impl Layer {
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.forward(x, mode),
            Layer::Conv2D(l) => l.forward(x, mode),
            Layer::Pool(l) => l.forward(x, mode),
            Layer::Activation(l) => l.forward(x, mode),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Flatten(l) => l.forward(x, mode),
            Layer::Pad(l) => l.forward(x),
        }
    }

    /// Returns the layer's raw parameter gradients (empty for
    /// parameterless layers) and, if requested, the delta for its input.
    pub fn backward(
        &mut self,
        d_out: &Tensor,
        rng: &mut RandomStream,
        need_input: bool,
    ) -> Result<(LayerGrads, Option<Tensor>)> {
        Ok(match self {
            Layer::Dense(l) => {
                let (dw, d_in) = l.backward_inner(d_out, need_input)?;
                (vec![dw], d_in)
            }
            Layer::Conv2D(l) => {
                let (g, d_in) = l.backward_inner(d_out, need_input)?;
                (vec![g.kernels, g.bias], d_in)
            }
            Layer::Pool(l) => (Vec::new(), Some(l.backward(d_out)?)),
            Layer::Activation(l) => (Vec::new(), Some(l.backward(d_out, Some(rng))?)),
            Layer::BatchNorm(l) => {
                let (g, d_in) = l.backward(d_out)?;
                (vec![g.gamma, g.beta], Some(d_in))
            }
            Layer::Flatten(l) => (Vec::new(), Some(l.backward(d_out)?)),
            Layer::Pad(_) => {
                return Err(Error::Precondition(
                    "padding has no parameters upstream and is never differentiated".into(),
                ))
            }
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(l) => vec![&l.weights],
            Layer::Conv2D(l) => vec![&l.kernels, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(l) => vec![&mut l.weights],
            Layer::Conv2D(l) => vec![&mut l.kernels, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            _ => Vec::new(),
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv2D(_) | Layer::BatchNorm(_))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2D(_) => "conv2d",
            Layer::Pool(_) => "pool",
            Layer::Activation(_) => "activation",
            Layer::BatchNorm(_) => "batch-norm",
            Layer::Flatten(_) => "flatten",
            Layer::Pad(_) => "pad",
        }
    }
}
