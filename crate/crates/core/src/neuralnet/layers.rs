//! Layer primitives with exact forward and backward passes.
//!
//! Each primitive is a pair of free functions (`*_forward`, `*_backward`);
//! [`Layer`] wraps them with their parameters so a model can be expressed as
//! a sequence and differentiated by replaying that sequence in reverse.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} does not fit input {input} with padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(input: [usize; 4], k: usize, stride: usize, padding: usize) -> Result<Self> {
        let [_, c, h, w] = input;
        Ok(ConvGeometry {
            c,
            h,
            w,
            k,
            stride,
            padding,
            ho: conv_out_dim(h, k, stride, padding)?,
            wo: conv_out_dim(w, k, stride, padding)?,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one sample into a `(c*k*k) x (ho*wo)` patch matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let n_cols = self.cols();
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src_row = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *o = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let n_cols = self.cols();
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * n_cols..(row + 1) * n_cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_params(input: &Tensor, weights_shape: [usize; 4], weights: &[f64], bias: &[f64]) -> Result<()> {
    let [c_out, c_in, kh, kw] = weights_shape;
    if kh != kw {
        return Err(Error::Shape(format!("non-square kernel {kh}x{kw}")));
    }
    if input.channels() != c_in {
        return Err(Error::Shape(format!(
            "input has {} channels, kernel expects {c_in}",
            input.channels()
        )));
    }
    if weights.len() != c_out * c_in * kh * kw || bias.len() != c_out {
        return Err(Error::Shape("kernel or bias length disagrees with kernel shape".into()));
    }
    Ok(())
}

/// Cross-correlation with zero padding. `weights` is `[c_out, c_in, k, k]`.
pub fn conv2d_forward(
    input: &Tensor,
    weights_shape: [usize; 4],
    weights: &[f64],
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    check_conv_params(input, weights_shape, weights, bias)?;
    let c_out = weights_shape[0];
    let g = ConvGeometry::new(input.shape(), weights_shape[2], stride, padding)?;
    let n = input.batch();
    let mut out = Tensor::zeros([n, c_out, g.ho, g.wo]);
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let out_len = c_out * g.cols();
    for s in 0..n {
        g.im2col(input.sample(s), &mut cols);
        let o = &mut out.data_mut()[s * out_len..(s + 1) * out_len];
        for (co, chunk) in o.chunks_exact_mut(g.cols()).enumerate() {
            chunk.fill(bias[co]);
        }
        gemm(c_out, g.rows(), g.cols(), weights, false, &cols, false, o, true);
    }
    Ok(out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weights_shape: [usize; 4],
    weights: &[f64],
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads> {
    let c_out = weights_shape[0];
    let g = ConvGeometry::new(input.shape(), weights_shape[2], stride, padding)?;
    if grad_out.shape() != [input.batch(), c_out, g.ho, g.wo] {
        return Err(Error::Shape(format!("conv gradient shape {:?}", grad_out.shape())));
    }
    let mut dx = Tensor::zeros(input.shape());
    let mut dw = vec![0.0; weights.len()];
    let mut db = vec![0.0; c_out];
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let mut dcols = vec![0.0; g.rows() * g.cols()];
    let in_len = input.sample_len();
    for s in 0..input.batch() {
        let go = grad_out.sample(s);
        for (co, chunk) in go.chunks_exact(g.cols()).enumerate() {
            db[co] += chunk.iter().sum::<f64>();
        }
        g.im2col(input.sample(s), &mut cols);
        gemm(c_out, g.cols(), g.rows(), go, false, &cols, true, &mut dw, true);
        gemm(g.rows(), c_out, g.cols(), weights, true, go, false, &mut dcols, false);
        g.col2im(&dcols, &mut dx.data_mut()[s * in_len..(s + 1) * in_len]);
    }
    Ok(ConvGrads {
        input: dx,
        weights: dw,
        bias: db,
    })
}

/// Per-channel statistics produced by a train-mode batch-norm pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance, used for normalisation.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward(
    input: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
    mode: Mode,
) -> Result<(Tensor, BatchNormCache, Option<BatchStats>)> {
    let [n, c, h, w] = input.shape();
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(Error::Shape(format!(
            "batch norm parameters for {} channels, input has {c}",
            gamma.len()
        )));
    }
    if mode == Mode::Train && n < 2 {
        return Err(Error::Shape("train-mode batch norm needs a batch of at least 2".into()));
    }
    let hw = h * w;
    let m = n * hw;
    let x = input.data();
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for s_idx in 0..n {
                    s += x[(s_idx * c + ci) * hw..(s_idx * c + ci + 1) * hw].iter().sum::<f64>();
                }
                let mu = s / m as f64;
                let mut v = 0.0;
                for s_idx in 0..n {
                    v += x[(s_idx * c + ci) * hw..(s_idx * c + ci + 1) * hw]
                        .iter()
                        .map(|&a| (a - mu) * (a - mu))
                        .sum::<f64>();
                }
                mean[ci] = mu;
                var[ci] = v / m as f64;
            }
            (mean, var)
        }
        Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = Tensor::zeros(input.shape());
    let yd = y.data_mut();
    for s_idx in 0..n {
        for ci in 0..c {
            let base = (s_idx * c + ci) * hw;
            for i in base..base + hw {
                let xh = (x[i] - mean[ci]) * inv_std[ci];
                xhat[i] = xh;
                yd[i] = gamma[ci] * xh + beta[ci];
            }
        }
    }
    let stats = (mode == Mode::Train).then(|| BatchStats { mean, var, count: m });
    Ok((y, BatchNormCache { xhat, inv_std, mode }, stats))
}

pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn batchnorm_backward(cache: &BatchNormCache, gamma: &[f64], grad_out: &Tensor) -> Result<BatchNormGrads> {
    let [n, c, h, w] = grad_out.shape();
    if cache.xhat.len() != grad_out.data().len() || gamma.len() != c {
        return Err(Error::Shape("batch norm gradient does not match cached forward".into()));
    }
    let hw = h * w;
    let m = (n * hw) as f64;
    let dy = grad_out.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for s_idx in 0..n {
        for ci in 0..c {
            let base = (s_idx * c + ci) * hw;
            for i in base..base + hw {
                dgamma[ci] += dy[i] * cache.xhat[i];
                dbeta[ci] += dy[i];
            }
        }
    }
    let mut dx = Tensor::zeros(grad_out.shape());
    let dxd = dx.data_mut();
    for s_idx in 0..n {
        for ci in 0..c {
            let base = (s_idx * c + ci) * hw;
            let scale = gamma[ci] * cache.inv_std[ci];
            for i in base..base + hw {
                dxd[i] = match cache.mode {
                    Mode::Train => scale / m * (m * dy[i] - dbeta[ci] - cache.xhat[i] * dgamma[ci]),
                    Mode::Eval => scale * dy[i],
                };
            }
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}

/// Non-overlapping 2x2 max pooling. Odd dimensions are padded on the
/// right/bottom with -inf. Returns the flat input index of every maximum;
/// ties go to the first element in row-major window order.
pub fn maxpool2x2_forward(input: &Tensor) -> (Tensor, Vec<usize>) {
    let [n, c, h, w] = input.shape();
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut argmax = vec![0usize; n * c * ho * wo];
    let x = input.data();
    let od = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                        if y < h && xx < w {
                            let idx = base + y * w + xx;
                            if best_idx == usize::MAX || x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                }
                let o = plane * ho * wo + oy * wo + ox;
                od[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2x2_backward(in_shape: [usize; 4], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    for (g, &i) in grad_out.data().iter().zip(argmax) {
        d[i] += g;
    }
    dx
}

pub fn linear_forward(input: &Tensor, weights: &[f64], bias: &[f64], out_features: usize) -> Result<Tensor> {
    let n = input.batch();
    let in_features = input.sample_len();
    if weights.len() != out_features * in_features || bias.len() != out_features {
        return Err(Error::Shape(format!(
            "linear layer {out_features}x{} applied to {in_features} features",
            weights.len() / out_features.max(1)
        )));
    }
    let mut out = Tensor::zeros([n, out_features, 1, 1]);
    for row in out.data_mut().chunks_exact_mut(out_features) {
        row.copy_from_slice(bias);
    }
    gemm(
        n,
        in_features,
        out_features,
        input.data(),
        false,
        weights,
        true,
        out.data_mut(),
        true,
    );
    Ok(out)
}

pub struct LinearGrads {
    pub input: Tensor,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn linear_backward(input: &Tensor, weights: &[f64], grad_out: &Tensor) -> LinearGrads {
    let n = input.batch();
    let in_features = input.sample_len();
    let out_features = grad_out.sample_len();
    let mut dw = vec![0.0; weights.len()];
    gemm(
        out_features,
        n,
        in_features,
        grad_out.data(),
        true,
        input.data(),
        false,
        &mut dw,
        false,
    );
    let mut db = vec![0.0; out_features];
    for row in grad_out.data().chunks_exact(out_features) {
        for (b, g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut dx = Tensor::zeros(input.shape());
    gemm(
        n,
        out_features,
        in_features,
        grad_out.data(),
        false,
        weights,
        false,
        dx.data_mut(),
        false,
    );
    LinearGrads {
        input: dx,
        weights: dw,
        bias: db,
    }
}

/// Row-wise softmax over the feature axis.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = logits.sample_len();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn softmax_backward(probs: &Tensor, grad_out: &Tensor) -> Tensor {
    let k = probs.sample_len();
    let mut dz = grad_out.clone();
    for (p, g) in probs.data().chunks_exact(k).zip(dz.data_mut().chunks_exact_mut(k)) {
        let dot: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for (gi, pi) in g.iter_mut().zip(p) {
            *gi = pi * (*gi - dot);
        }
    }
    dz
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Conv2d {
    pub shape: [usize; 4],
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// Exponential moving average of the batch statistics; the variance is
    /// stored unbiased.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        let m = self.momentum;
        for c in 0..self.gamma.len() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.var[c] * unbias;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// One step of a sequential network.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm2d(BatchNorm2d),
    MaxPool2x2,
    Relu,
    Flatten,
    Linear(Linear),
    Dropout { p: f64 },
    Softmax,
}

/// What a layer needs from its forward pass to run backward.
#[derive(Debug, Clone)]
pub enum Cache {
    Input(Tensor),
    BatchNorm(BatchNormCache),
    MaxPool { in_shape: [usize; 4], argmax: Vec<usize> },
    Relu { mask: Vec<bool> },
    Reshape { in_shape: [usize; 4] },
    Dropout { mask: Option<Vec<f64>> },
    Softmax { probs: Tensor },
}

pub struct LayerOutput {
    pub output: Tensor,
    pub cache: Cache,
    pub batch_stats: Option<BatchStats>,
}

impl Layer {
    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<LayerOutput> {
        let mut batch_stats = None;
        let (output, cache) = match self {
            Layer::Conv2d(l) => (
                conv2d_forward(x, l.shape, &l.weights, &l.bias, l.stride, l.padding)?,
                Cache::Input(x.clone()),
            ),
            Layer::BatchNorm2d(l) => {
                let (y, cache, stats) =
                    batchnorm_forward(x, &l.gamma, &l.beta, &l.running_mean, &l.running_var, l.eps, mode)?;
                batch_stats = stats;
                (y, Cache::BatchNorm(cache))
            }
            Layer::MaxPool2x2 => {
                let (y, argmax) = maxpool2x2_forward(x);
                (
                    y,
                    Cache::MaxPool {
                        in_shape: x.shape(),
                        argmax,
                    },
                )
            }
            Layer::Relu => {
                let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
                (x.map(|v| v.max(0.0)), Cache::Relu { mask })
            }
            Layer::Flatten => (
                x.clone().reshape([x.batch(), x.sample_len(), 1, 1])?,
                Cache::Reshape { in_shape: x.shape() },
            ),
            Layer::Linear(l) => (
                linear_forward(x, &l.weights, &l.bias, l.out_features)?,
                Cache::Input(x.clone()),
            ),
            Layer::Dropout { p } => match mode {
                Mode::Eval => (x.clone(), Cache::Dropout { mask: None }),
                Mode::Train => {
                    let keep = 1.0 - p;
                    let mask: Vec<f64> = (0..x.data().len())
                        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    let mut y = x.clone();
                    for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    (y, Cache::Dropout { mask: Some(mask) })
                }
            },
            Layer::Softmax => {
                let probs = softmax(x);
                (probs.clone(), Cache::Softmax { probs })
            }
        };
        Ok(LayerOutput {
            output,
            cache,
            batch_stats,
        })
    }

    /// Returns the input gradient and the gradients of [`Layer::params`], in
    /// the same order.
    pub fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Vec<f64>>)> {
        let mismatch = || Error::Shape("layer cache does not match layer kind".into());
        Ok(match (self, cache) {
            (Layer::Conv2d(l), Cache::Input(x)) => {
                let g = conv2d_backward(x, l.shape, &l.weights, grad_out, l.stride, l.padding)?;
                (g.input, vec![g.weights, g.bias])
            }
            (Layer::BatchNorm2d(l), Cache::BatchNorm(c)) => {
                let g = batchnorm_backward(c, &l.gamma, grad_out)?;
                (g.input, vec![g.gamma, g.beta])
            }
            (Layer::MaxPool2x2, Cache::MaxPool { in_shape, argmax }) => {
                (maxpool2x2_backward(*in_shape, argmax, grad_out), vec![])
            }
            (Layer::Relu, Cache::Relu { mask }) => {
                let mut g = grad_out.clone();
                for (v, &m) in g.data_mut().iter_mut().zip(mask) {
                    if !m {
                        *v = 0.0;
                    }
                }
                (g, vec![])
            }
            (Layer::Flatten, Cache::Reshape { in_shape }) => (grad_out.clone().reshape(*in_shape)?, vec![]),
            (Layer::Linear(l), Cache::Input(x)) => {
                let g = linear_backward(x, &l.weights, grad_out);
                (g.input, vec![g.weights, g.bias])
            }
            (Layer::Dropout { .. }, Cache::Dropout { mask }) => {
                let mut g = grad_out.clone();
                if let Some(mask) = mask {
                    for (v, m) in g.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                }
                (g, vec![])
            }
            (Layer::Softmax, Cache::Softmax { probs }) => (softmax_backward(probs, grad_out), vec![]),
            _ => return Err(mismatch()),
        })
    }

    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Conv2d(l) => vec![&l.weights, &l.bias],
            Layer::BatchNorm2d(l) => vec![&l.gamma, &l.beta],
            Layer::Linear(l) => vec![&l.weights, &l.bias],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::Conv2d(l) => vec![&mut l.weights, &mut l.bias],
            Layer::BatchNorm2d(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Linear(l) => vec![&mut l.weights, &mut l.bias],
            _ => vec![],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    const H: f64 = 1e-5;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Central differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut x = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = x[i];
                x[i] = orig + H;
                let up = f(&x);
                x[i] = orig - H;
                let down = f(&x);
                x[i] = orig;
                (up - down) / (2.0 * H)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            assert!(rel_err(*a, *n) < tol, "{what}[{i}]: analytic {a} vs numeric {n}");
        }
    }

    /// Weighted sum so every output element gets a distinct upstream gradient.
    fn probe(t: &Tensor, w: &[f64]) -> f64 {
        t.data().iter().zip(w).map(|(a, b)| a * b).sum()
    }

    fn conv_direct(x: &Tensor, shape: [usize; 4], w: &[f64], b: &[f64], stride: usize, pad: usize) -> Tensor {
        let [n, c, h, wd] = x.shape();
        let [co, _, k, _] = shape;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros([n, co, ho, wo]);
        for s in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w[((o * c + ci) * k + ky) * k + kx]
                                            * x.data()[((s * c + ci) * h + iy as usize) * wd + ix as usize];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((s * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = random_tensor([1, 1, 3, 3], 1);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let y = conv2d_forward(&x, [1, 1, 3, 3], &w, &[0.0], 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let x = random_tensor([2, 3, 4, 5], 2);
        let y = conv2d_forward(&x, [2, 3, 3, 3], &[0.0; 54], &[0.0, 0.75], 1, 1).unwrap();
        assert_eq!(y.shape(), [2, 2, 4, 5]);
        for s in 0..2 {
            assert!(y.sample(s)[..20].iter().all(|&v| v == 0.0));
            assert!(y.sample(s)[20..].iter().all(|&v| v == 0.75));
        }
    }

    #[test]
    fn conv_shape_mismatch_is_error() {
        let x = random_tensor([1, 2, 4, 4], 3);
        assert!(conv2d_forward(&x, [1, 3, 3, 3], &[0.0; 27], &[0.0], 1, 1).is_err());
        assert!(conv2d_forward(&x, [1, 2, 3, 3], &[0.0; 17], &[0.0], 1, 1).is_err());
    }

    #[test]
    fn conv_matches_direct_sum_and_finite_differences() {
        for (shape_in, shape_w, stride, pad) in [
            ([1, 1, 5, 5], [1, 1, 3, 3], 1, 1),
            ([2, 3, 5, 4], [4, 3, 3, 3], 1, 1),
            ([2, 2, 6, 7], [3, 2, 3, 3], 2, 0),
        ] {
            let x = random_tensor(shape_in, 10);
            let w = random_vec(shape_w.iter().product(), 11);
            let b = random_vec(shape_w[0], 12);
            let y = conv2d_forward(&x, shape_w, &w, &b, stride, pad).unwrap();
            let direct = conv_direct(&x, shape_w, &w, &b, stride, pad);
            assert_eq!(y.shape(), direct.shape());
            for (a, d) in y.data().iter().zip(direct.data()) {
                assert!((a - d).abs() < 1e-12);
            }

            let probe_w = random_vec(y.data().len(), 13);
            let g_out = Tensor::from_vec(y.shape(), probe_w.clone()).unwrap();
            let g = conv2d_backward(&x, shape_w, &w, &g_out, stride, pad).unwrap();

            let num_x = numeric_grad(x.data(), |xv| {
                let xt = Tensor::from_vec(shape_in, xv.to_vec()).unwrap();
                probe(&conv_direct(&xt, shape_w, &w, &b, stride, pad), &probe_w)
            });
            assert_close(g.input.data(), &num_x, 1e-4, "conv dx");
            let num_w = numeric_grad(&w, |wv| probe(&conv_direct(&x, shape_w, wv, &b, stride, pad), &probe_w));
            assert_close(&g.weights, &num_w, 1e-4, "conv dw");
            let num_b = numeric_grad(&b, |bv| probe(&conv_direct(&x, shape_w, &w, bv, stride, pad), &probe_w));
            assert_close(&g.bias, &num_b, 1e-4, "conv db");
        }
    }

    #[test]
    fn batchnorm_zero_variance_channel() {
        let x = Tensor::from_vec([2, 1, 2, 2], vec![3.0; 8]).unwrap();
        let (y, _, _) = batchnorm_forward(&x, &[1.0], &[0.5], &[0.0], &[1.0], BN_EPS, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn batchnorm_closed_form_pm_one() {
        let x = Tensor::from_vec([2, 1, 1, 1], vec![-1.0, 1.0]).unwrap();
        let (y, _, stats) = batchnorm_forward(&x, &[1.0], &[0.0], &[0.0], &[1.0], BN_EPS, Mode::Train).unwrap();
        let expect = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-15);
        assert!((y.data()[1] - expect).abs() < 1e-15);
        let stats = stats.unwrap();
        assert_eq!((stats.mean[0], stats.var[0]), (0.0, 1.0));

        let mut bn = BatchNorm2d::new(1);
        bn.update_running(&stats);
        assert!((bn.running_mean[0] - 0.0).abs() < 1e-15);
        // 0.9 * 1 + 0.1 * (1 * 2/1)
        assert!((bn.running_var[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_train_batch_of_one_is_error() {
        let x = random_tensor([1, 2, 3, 3], 4);
        assert!(batchnorm_forward(&x, &[1.0; 2], &[0.0; 2], &[0.0; 2], &[1.0; 2], BN_EPS, Mode::Train).is_err());
        assert!(batchnorm_forward(&x, &[1.0; 2], &[0.0; 2], &[0.0; 2], &[1.0; 2], BN_EPS, Mode::Eval).is_ok());
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let shape = [2, 3, 4, 4];
        let x = random_tensor(shape, 20);
        let gamma = random_vec(3, 21);
        let beta = random_vec(3, 22);
        let rm = random_vec(3, 23);
        let rv: Vec<f64> = random_vec(3, 24).iter().map(|v| v.abs() + 0.5).collect();
        let probe_w = random_vec(x.data().len(), 25);
        for mode in [Mode::Train, Mode::Eval] {
            let run = |xv: &[f64], g: &[f64], b: &[f64]| {
                let xt = Tensor::from_vec(shape, xv.to_vec()).unwrap();
                let (y, _, _) = batchnorm_forward(&xt, g, b, &rm, &rv, BN_EPS, mode).unwrap();
                probe(&y, &probe_w)
            };
            let (_, cache, _) = batchnorm_forward(&x, &gamma, &beta, &rm, &rv, BN_EPS, mode).unwrap();
            let g_out = Tensor::from_vec(shape, probe_w.clone()).unwrap();
            let g = batchnorm_backward(&cache, &gamma, &g_out).unwrap();
            assert_close(
                g.input.data(),
                &numeric_grad(x.data(), |v| run(v, &gamma, &beta)),
                1e-4,
                "bn dx",
            );
            assert_close(
                &g.gamma,
                &numeric_grad(&gamma, |v| run(x.data(), v, &beta)),
                1e-4,
                "bn dgamma",
            );
            assert_close(
                &g.beta,
                &numeric_grad(&beta, |v| run(x.data(), &gamma, v)),
                1e-4,
                "bn dbeta",
            );
        }
    }

    #[test]
    fn maxpool_basic_and_ties() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2x2_forward(&x);
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        let c = Tensor::from_vec([1, 1, 2, 2], vec![5.0; 4]).unwrap();
        let (y, arg) = maxpool2x2_forward(&c);
        assert_eq!(y.data(), &[5.0]);
        let g = maxpool2x2_backward([1, 1, 2, 2], &arg, &Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap());
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_odd_dims_pad_with_neg_infinity() {
        let x = Tensor::from_vec([1, 1, 3, 3], vec![-5.0, -4.0, -3.0, -2.0, -1.0, -6.0, -7.0, -8.0, -9.0]).unwrap();
        let (y, _) = maxpool2x2_forward(&x);
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[-1.0, -3.0, -7.0, -9.0]);
    }

    #[test]
    fn maxpool_matches_window_oracle() {
        let x = random_tensor([2, 2, 8, 8], 30);
        let (y, arg) = maxpool2x2_forward(&x);
        let g_out = random_tensor(y.shape(), 31);
        let dx = maxpool2x2_backward(x.shape(), &arg, &g_out);
        let mut expect_dx = vec![0.0; x.data().len()];
        for plane in 0..4 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let cells: Vec<usize> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| plane * 64 + (2 * oy + dy) * 8 + 2 * ox + dx)
                        .collect();
                    let best = cells
                        .iter()
                        .copied()
                        .reduce(|a, b| if x.data()[b] > x.data()[a] { b } else { a })
                        .unwrap();
                    let o = plane * 16 + oy * 4 + ox;
                    assert_eq!(y.data()[o], x.data()[best]);
                    expect_dx[best] += g_out.data()[o];
                }
            }
        }
        assert_eq!(dx.data(), expect_dx.as_slice());
    }

    #[test]
    fn linear_and_softmax_gradients() {
        let x = random_tensor([3, 5, 1, 1], 40);
        let w = random_vec(4 * 5, 41);
        let b = random_vec(4, 42);
        let probe_w = random_vec(12, 43);
        let y = linear_forward(&x, &w, &b, 4).unwrap();
        let g = linear_backward(&x, &w, &Tensor::from_vec(y.shape(), probe_w.clone()).unwrap());
        let f = |xv: &[f64], wv: &[f64], bv: &[f64]| {
            let xt = Tensor::from_vec([3, 5, 1, 1], xv.to_vec()).unwrap();
            probe(&linear_forward(&xt, wv, bv, 4).unwrap(), &probe_w)
        };
        assert_close(g.input.data(), &numeric_grad(x.data(), |v| f(v, &w, &b)), 1e-4, "fc dx");
        assert_close(&g.weights, &numeric_grad(&w, |v| f(x.data(), v, &b)), 1e-4, "fc dw");
        assert_close(&g.bias, &numeric_grad(&b, |v| f(x.data(), &w, v)), 1e-4, "fc db");

        let p = softmax(&y);
        for row in p.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let ds = softmax_backward(&p, &Tensor::from_vec(y.shape(), probe_w.clone()).unwrap());
        let num = numeric_grad(y.data(), |v| {
            probe(&softmax(&Tensor::from_vec(y.shape(), v.to_vec()).unwrap()), &probe_w)
        });
        assert_close(ds.data(), &num, 1e-4, "softmax");
    }
}
