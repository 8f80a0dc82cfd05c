//! The 3D convolutional offset regressor.
//!
//! Four valid 3×3×3 convolution blocks (conv, batch norm, ReLU) collapse a
//! 9³ window to a single voxel, then four fully connected layers regress a
//! 6-vector. Components 0..3 are normalized translation offsets; 3..6 are
//! angle slots trained towards zero.
//!
//! Activations inside a batch are laid out channel-major, `[C][B][D³]`, so
//! every convolution is one GEMM over an im2col matrix and batch norm works
//! on contiguous rows.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::{gemm, View};
use crate::landscape::{
    denormalize_offset, extract_subtensor, make_label, GridIndex, SimilarityTensor, SubTensor,
    DEFAULT_WINDOW, LABEL_SCALE,
};
use crate::landscape::{read_exact, read_u32};

pub const INPUT_EDGE: usize = 9;
pub const OUTPUT_DIM: usize = 6;
pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const KERNEL: usize = 27;
const INPUT_NORM_EPSILON: f64 = 1e-24;

const WEIGHT_MAGIC: &[u8; 4] = b"IRNW";
const WEIGHT_VERSION: u32 = 1;

/// Channel plan of the convolutional trunk and the dense head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// `[1, c1, c2, c3, c4]`; four valid convolutions take 9³ to 1³.
    pub conv_channels: Vec<usize>,
    /// `[c4, f1, f2, f3, 6]`.
    pub fc_sizes: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            conv_channels: vec![1, 64, 128, 256, 512],
            fc_sizes: vec![512, 256, 64, 16, 6],
        }
    }
}

impl Architecture {
    /// Two channels everywhere. Used for gradient checks.
    pub fn reduced() -> Self {
        Self {
            conv_channels: vec![1, 2, 2, 2, 2],
            fc_sizes: vec![2, 2, 2, 2, 6],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.conv_channels;
        let f = &self.fc_sizes;
        if c.len() != 5 || c[0] != 1 {
            return Err(Error::config(
                "net.conv_channels",
                "need exactly five entries starting with 1",
            ));
        }
        if f.len() < 2 || f[0] != c[4] || f[f.len() - 1] != OUTPUT_DIM {
            return Err(Error::config(
                "net.fc_sizes",
                format!("must run from {} to {OUTPUT_DIM}", c[4]),
            ));
        }
        if c.iter().chain(f).any(|&n| n == 0) {
            return Err(Error::config("net", "layer widths must be positive"));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let conv: usize = self
            .conv_channels
            .windows(2)
            .map(|w| w[1] * w[0] * KERNEL + 3 * w[1])
            .sum();
        let fc: usize = self.fc_sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        conv + fc
    }
}

/// Per-window preprocessing applied before the first convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputNorm {
    /// Feed raw similarity values.
    None,
    /// Subtract the window mean and divide by the window standard deviation.
    #[default]
    Standardize,
}

impl InputNorm {
    fn as_str(self) -> &'static str {
        match self {
            InputNorm::None => "none",
            InputNorm::Standardize => "standardize",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(InputNorm::None),
            "standardize" => Some(InputNorm::Standardize),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

/// Saved batch statistics of one train-mode normalization.
#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Normalizes `x`, laid out `[C][n]`, per channel.
///
/// Train mode uses the statistics of the `n` values of each channel and
/// folds them into the running estimates (unbiased variance).
pub fn batchnorm_forward(x: &[f64], bn: &mut BatchNorm, mode: Mode) -> Result<Vec<f64>> {
    match mode {
        Mode::Train => bn_train(x, bn).map(|(y, _)| y),
        Mode::Infer => bn_infer(x, bn),
    }
}

fn bn_rows(x: &[f64], channels: usize) -> Result<usize> {
    if channels == 0 || x.len() % channels != 0 {
        return Err(Error::Shape(format!(
            "{} values do not split into {channels} channels",
            x.len()
        )));
    }
    Ok(x.len() / channels)
}

fn bn_train(x: &[f64], bn: &mut BatchNorm) -> Result<(Vec<f64>, BnCache)> {
    let c = bn.channels();
    let n = bn_rows(x, c)?;
    if n < 2 {
        return Err(Error::InsufficientStatistics(format!(
            "{n} value per channel in train mode"
        )));
    }
    let mut xhat = vec![0.0; x.len()];
    let stats: Vec<(f64, f64)> = xhat
        .par_chunks_mut(n)
        .zip(x.par_chunks(n))
        .map(|(out, row)| {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + bn.epsilon).sqrt();
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            (mean, var)
        })
        .collect();
    let mut y = xhat.clone();
    y.par_chunks_mut(n).enumerate().for_each(|(ch, row)| {
        let (g, b) = (bn.scale[ch], bn.shift[ch]);
        row.iter_mut().for_each(|v| *v = g * *v + b);
    });
    let m = bn.momentum;
    let unbias = n as f64 / (n - 1) as f64;
    let mut inv_std = Vec::with_capacity(c);
    for (ch, (mean, var)) in stats.into_iter().enumerate() {
        bn.running_mean[ch] = (1.0 - m) * bn.running_mean[ch] + m * mean;
        bn.running_var[ch] = (1.0 - m) * bn.running_var[ch] + m * var * unbias;
        inv_std.push(1.0 / (var + bn.epsilon).sqrt());
    }
    Ok((y, BnCache { xhat, inv_std }))
}

fn bn_infer(x: &[f64], bn: &BatchNorm) -> Result<Vec<f64>> {
    let n = bn_rows(x, bn.channels())?;
    let mut y = x.to_vec();
    if n == 0 {
        return Ok(y);
    }
    y.par_chunks_mut(n).enumerate().for_each(|(ch, row)| {
        let inv = 1.0 / (bn.running_var[ch] + bn.epsilon).sqrt();
        let (g, b, mu) = (bn.scale[ch], bn.shift[ch], bn.running_mean[ch]);
        row.iter_mut().for_each(|v| *v = g * (*v - mu) * inv + b);
    });
    Ok(y)
}

/// Backward through `y = γ x̂ + β` with batch statistics. Returns
/// `(dx, dγ, dβ)`; `dy` is consumed.
fn bn_backward(
    mut dy: Vec<f64>,
    cache: &BnCache,
    scale: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = scale.len();
    let n = dy.len() / c;
    let sums: Vec<(f64, f64)> = dy
        .par_chunks_mut(n)
        .zip(cache.xhat.par_chunks(n))
        .enumerate()
        .map(|(ch, (d, xh))| {
            let sum_d: f64 = d.iter().sum();
            let sum_dx: f64 = d.iter().zip(xh).map(|(a, b)| a * b).sum();
            let k = scale[ch] * cache.inv_std[ch] / n as f64;
            for (v, x) in d.iter_mut().zip(xh) {
                *v = k * (n as f64 * *v - sum_d - x * sum_dx);
            }
            (sum_dx, sum_d)
        })
        .collect();
    let (dscale, dshift) = sums.into_iter().unzip();
    (dy, dscale, dshift)
}

/// Rearranges `[C][B][D³]` into the `[C·27][B·(D-2)³]` patch matrix.
fn im2col(input: &[f64], channels: usize, batch: usize, d: usize) -> Vec<f64> {
    let e = d - 2;
    let p = e * e * e;
    let vol = d * d * d;
    let cols_n = batch * p;
    let mut cols = vec![0.0; channels * KERNEL * cols_n];
    cols.par_chunks_mut(cols_n).enumerate().for_each(|(row, out)| {
        let (c, k) = (row / KERNEL, row % KERNEL);
        let (kz, ky, kx) = (k / 9, (k / 3) % 3, k % 3);
        for b in 0..batch {
            let src = &input[(c * batch + b) * vol..][..vol];
            let dst = &mut out[b * p..][..p];
            for z in 0..e {
                for y in 0..e {
                    let s = ((z + kz) * d + y + ky) * d + kx;
                    dst[(z * e + y) * e..][..e].copy_from_slice(&src[s..s + e]);
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the volume.
fn col2im(cols: &[f64], channels: usize, batch: usize, d: usize) -> Vec<f64> {
    let e = d - 2;
    let p = e * e * e;
    let vol = d * d * d;
    let cols_n = batch * p;
    let mut out = vec![0.0; channels * batch * vol];
    out.par_chunks_mut(batch * vol).enumerate().for_each(|(c, dst)| {
        for k in 0..KERNEL {
            let (kz, ky, kx) = (k / 9, (k / 3) % 3, k % 3);
            let row = &cols[(c * KERNEL + k) * cols_n..][..cols_n];
            for b in 0..batch {
                let src = &row[b * p..][..p];
                let vol_out = &mut dst[b * vol..][..vol];
                for z in 0..e {
                    for y in 0..e {
                        let s = ((z + kz) * d + y + ky) * d + kx;
                        let line = &src[(z * e + y) * e..][..e];
                        for (o, v) in vol_out[s..s + e].iter_mut().zip(line) {
                            *o += v;
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv_batch(
    input: &[f64],
    c_in: usize,
    batch: usize,
    d: usize,
    kernels: &[f64],
    bias: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if d < 3 {
        return Err(Error::Shape(format!("volume edge {d} is below the kernel size 3")));
    }
    let c_out = bias.len();
    if input.len() != c_in * batch * d * d * d || kernels.len() != c_out * c_in * KERNEL {
        return Err(Error::Shape(format!(
            "conv input {} / kernels {} inconsistent with {c_in}->{c_out} at edge {d}",
            input.len(),
            kernels.len()
        )));
    }
    let cols = im2col(input, c_in, batch, d);
    let n = batch * (d - 2).pow(3);
    let mut out = vec![0.0; c_out * n];
    for (row, &b) in out.chunks_mut(n).zip(bias) {
        row.fill(b);
    }
    gemm(
        View::new(kernels, c_out, c_in * KERNEL),
        View::new(&cols, c_in * KERNEL, n),
        1.0,
        &mut out,
    );
    Ok((out, cols))
}

/// Valid 3×3×3 cross-correlation of one `[C_in][D³]` volume with stride 1.
///
/// `kernels` is `[C_out][C_in][3][3][3]`; the result is `[C_out][(D-2)³]`.
pub fn conv3d_valid(
    input: &[f64],
    c_in: usize,
    d: usize,
    kernels: &[f64],
    bias: &[f64],
) -> Result<Vec<f64>> {
    conv_batch(input, c_in, 1, d, kernels, bias).map(|(out, _)| out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `[out][in]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    cols: Vec<f64>,
    bn: BnCache,
    /// Post-ReLU output; its sign is the ReLU mask.
    out: Vec<f64>,
}

#[derive(Debug, Clone)]
struct DenseCache {
    input: Vec<f64>,
    pre: Vec<f64>,
}

/// Everything a backward pass needs from a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    revision: u64,
    batch: usize,
    arch: Architecture,
    input: Option<BnCache>,
    conv: Vec<ConvCache>,
    fc: Vec<DenseCache>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// `(channels, edge)` of every convolution output.
    pub fn conv_shapes(&self) -> Vec<(usize, usize)> {
        self.conv
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let edge = INPUT_EDGE - 2 * (i + 1);
                debug_assert_eq!(c.out.len(), self.arch.conv_channels[i + 1] * self.batch * edge.pow(3));
                (self.arch.conv_channels[i + 1], edge)
            })
            .collect()
    }
}

/// Gradients in the order of [`IronModel::parameter_names`], plus the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<Vec<f64>>,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IronModel {
    arch: Architecture,
    pub input_norm: InputNorm,
    pub conv: Vec<ConvBlock>,
    pub fc: Vec<Dense>,
    revision: u64,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let a = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

impl IronModel {
    /// Fresh model: weights uniform in `±1/√fan_in`, biases zero, BN identity.
    pub fn new(arch: Architecture, input_norm: InputNorm, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = arch
            .conv_channels
            .windows(2)
            .map(|w| ConvBlock {
                in_ch: w[0],
                out_ch: w[1],
                weight: uniform(&mut rng, w[1] * w[0] * KERNEL, w[0] * KERNEL),
                bias: vec![0.0; w[1]],
                bn: BatchNorm::new(w[1]),
            })
            .collect();
        let fc = arch
            .fc_sizes
            .windows(2)
            .map(|w| Dense {
                in_dim: w[0],
                out_dim: w[1],
                weight: uniform(&mut rng, w[1] * w[0], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(Self {
            arch,
            input_norm,
            conv,
            fc,
            revision: 0,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// Names of the trainable tensors, in gradient order.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.conv.len() {
            for p in ["weight", "bias", "bn_scale", "bn_shift"] {
                names.push(format!("conv{i}.{p}"));
            }
        }
        for i in 0..self.fc.len() {
            for p in ["weight", "bias"] {
                names.push(format!("fc{i}.{p}"));
            }
        }
        names
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for c in &self.conv {
            out.extend([&c.weight[..], &c.bias, &c.bn.scale, &c.bn.shift]);
        }
        for f in &self.fc {
            out.extend([&f.weight[..], &f.bias]);
        }
        out
    }

    /// Mutable trainable tensors. Invalidates outstanding forward caches.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.revision += 1;
        let mut out: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.conv {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
            out.push(&mut c.bn.scale);
            out.push(&mut c.bn.shift);
        }
        for f in &mut self.fc {
            out.push(&mut f.weight);
            out.push(&mut f.bias);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().all(|p| p.iter().all(|v| v.is_finite()))
            && self
                .conv
                .iter()
                .all(|c| c.bn.running_mean.iter().chain(&c.bn.running_var).all(|v| v.is_finite()))
    }

    fn check_input(&self, input: &[f64], batch: usize) -> Result<()> {
        let per = INPUT_EDGE.pow(3);
        if batch == 0 || input.len() != batch * per {
            return Err(Error::Shape(format!(
                "expected {batch} × 1×{INPUT_EDGE}×{INPUT_EDGE}×{INPUT_EDGE} = {} values, got {}",
                batch * per,
                input.len()
            )));
        }
        Ok(())
    }

    /// Standardizes each window (rows of the `[1][B][729]` input).
    fn normalize_input(&self, input: &[f64], batch: usize) -> (Vec<f64>, Option<BnCache>) {
        match self.input_norm {
            InputNorm::None => (input.to_vec(), None),
            InputNorm::Standardize => {
                let per = INPUT_EDGE.pow(3);
                let mut xhat = vec![0.0; input.len()];
                let inv_std: Vec<f64> = xhat
                    .par_chunks_mut(per)
                    .zip(input.par_chunks(per))
                    .map(|(out, row)| {
                        let mean = row.iter().sum::<f64>() / per as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
                        let inv = 1.0 / (var + INPUT_NORM_EPSILON).sqrt();
                        for (o, v) in out.iter_mut().zip(row) {
                            *o = (v - mean) * inv;
                        }
                        inv
                    })
                    .collect();
                debug_assert_eq!(inv_std.len(), batch);
                let cache = BnCache {
                    xhat: xhat.clone(),
                    inv_std,
                };
                (xhat, Some(cache))
            }
        }
    }

    /// Infer-mode forward pass over `batch` windows of 729 values each.
    /// Returns `batch × 6` outputs. Pure: running statistics are only read.
    pub fn infer(&self, input: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check_input(input, batch)?;
        let (mut x, _) = self.normalize_input(input, batch);
        let mut d = INPUT_EDGE;
        for block in &self.conv {
            let (z, _) = conv_batch(&x, block.in_ch, batch, d, &block.weight, &block.bias)?;
            let mut y = bn_infer(&z, &block.bn)?;
            y.iter_mut().for_each(|v| *v = v.max(0.0));
            x = y;
            d -= 2;
        }
        assert_eq!(d, 1, "trunk must collapse the window to one voxel");
        let mut h = transpose(&x, self.arch.conv_channels[4], batch);
        let last = self.fc.len() - 1;
        for (i, layer) in self.fc.iter().enumerate() {
            h = dense_forward(layer, &h, batch);
            if i < last {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Train-mode forward pass. Uses batch statistics, updates the running
    /// estimates and returns the cache for [`IronModel::backward`].
    pub fn forward_train(&mut self, input: &[f64], batch: usize) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(input, batch)?;
        let (mut x, input_cache) = self.normalize_input(input, batch);
        let mut d = INPUT_EDGE;
        let mut conv_caches = Vec::with_capacity(self.conv.len());
        for block in &mut self.conv {
            let (z, cols) = conv_batch(&x, block.in_ch, batch, d, &block.weight, &block.bias)?;
            let (mut y, bn) = bn_train(&z, &mut block.bn)?;
            y.iter_mut().for_each(|v| *v = v.max(0.0));
            d -= 2;
            assert_eq!(y.len(), block.out_ch * batch * d.pow(3));
            conv_caches.push(ConvCache {
                cols,
                bn,
                out: y.clone(),
            });
            x = y;
        }
        assert_eq!(d, 1, "trunk must collapse the window to one voxel");
        let mut h = transpose(&x, self.arch.conv_channels[4], batch);
        let last = self.fc.len() - 1;
        let mut fc_caches = Vec::with_capacity(self.fc.len());
        for (i, layer) in self.fc.iter().enumerate() {
            let pre = dense_forward(layer, &h, batch);
            let mut out = pre.clone();
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            fc_caches.push(DenseCache { input: h, pre });
            h = out;
        }
        let cache = ForwardCache {
            revision: self.revision,
            batch,
            arch: self.arch.clone(),
            input: input_cache,
            conv: conv_caches,
            fc: fc_caches,
        };
        Ok((h, cache))
    }

    /// Exact reverse-mode gradients of the train-mode forward pass that
    /// produced `cache`, for output gradient `dout` (`batch × 6`).
    pub fn backward(&self, cache: &ForwardCache, dout: &[f64]) -> Result<Gradients> {
        if cache.revision != self.revision || cache.arch != self.arch {
            return Err(Error::Cache(
                "parameters changed since the forward pass".into(),
            ));
        }
        let batch = cache.batch;
        if dout.len() != batch * OUTPUT_DIM {
            return Err(Error::Shape(format!(
                "output gradient has {} values, expected {}",
                dout.len(),
                batch * OUTPUT_DIM
            )));
        }
        let n_fc = self.fc.len();
        let mut fc_grads = vec![(Vec::new(), Vec::new()); n_fc];
        let mut delta = dout.to_vec();
        for i in (0..n_fc).rev() {
            let layer = &self.fc[i];
            let c = &cache.fc[i];
            if i < n_fc - 1 {
                for (g, p) in delta.iter_mut().zip(&c.pre) {
                    if *p <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let (dw, db, dx) = dense_backward(layer, &c.input, &delta, batch);
            fc_grads[i] = (dw, db);
            delta = dx;
        }

        let mut grad = transpose(&delta, batch, self.arch.conv_channels[4]);
        let mut conv_grads = vec![Default::default(); self.conv.len()];
        let mut d = 1;
        for i in (0..self.conv.len()).rev() {
            let block = &self.conv[i];
            let c = &cache.conv[i];
            for (g, o) in grad.iter_mut().zip(&c.out) {
                if *o <= 0.0 {
                    *g = 0.0;
                }
            }
            let (dz, dscale, dshift) = bn_backward(grad, &c.bn, &block.bn.scale);
            let n = dz.len() / block.out_ch;
            let dbias: Vec<f64> = dz.chunks(n).map(|r| r.iter().sum()).collect();
            let k = block.in_ch * KERNEL;
            let mut dw = vec![0.0; block.out_ch * k];
            gemm(
                View::new(&dz, block.out_ch, n),
                View::new(&c.cols, k, n).t(),
                0.0,
                &mut dw,
            );
            let mut dcols = vec![0.0; k * n];
            gemm(
                View::new(&block.weight, block.out_ch, k).t(),
                View::new(&dz, block.out_ch, n),
                0.0,
                &mut dcols,
            );
            d += 2;
            grad = col2im(&dcols, block.in_ch, batch, d);
            conv_grads[i] = (dw, dbias, dscale, dshift);
        }

        let input = match &cache.input {
            None => grad,
            Some(ic) => {
                let ones = vec![1.0; batch];
                bn_backward(grad, ic, &ones).0
            }
        };

        let mut params = Vec::with_capacity(4 * self.conv.len() + 2 * n_fc);
        for (w, b, s, t) in conv_grads {
            params.extend([w, b, s, t]);
        }
        for (w, b) in fc_grads {
            params.extend([w, b]);
        }
        Ok(Gradients { params, input })
    }

    /// Writes the weight file: manifest header then f32 parameters.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let manifest = self.manifest();
        w.write_all(WEIGHT_MAGIC)?;
        w.write_all(&WEIGHT_VERSION.to_le_bytes())?;
        w.write_all(&(manifest.len() as u32).to_le_bytes())?;
        w.write_all(manifest.as_bytes())?;
        let mut buf = Vec::with_capacity(4 * self.arch.parameter_count() + 64);
        for t in self.stored_tensors() {
            for v in t {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a weight file and checks its plan against `expected`.
    pub fn load<R: Read>(mut r: R, expected: &Architecture) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != WEIGHT_MAGIC {
            return Err(Error::Format("not an IRNW weight file".into()));
        }
        let version = read_u32(&mut r, "version")?;
        if version != WEIGHT_VERSION {
            return Err(Error::Format(format!("unsupported weight file version {version}")));
        }
        let len = read_u32(&mut r, "manifest length")? as usize;
        if len > 1 << 20 {
            return Err(Error::Format("weight manifest too long".into()));
        }
        let mut text = vec![0u8; len];
        read_exact(&mut r, &mut text, "manifest")?;
        let text = String::from_utf8(text)
            .map_err(|_| Error::Format("weight manifest is not UTF-8".into()))?;
        let (arch, input_norm, epsilon, momentum) = parse_manifest(&text)?;
        if &arch != expected {
            return Err(Error::Format(format!(
                "weight file plan {:?}/{:?} differs from expected {:?}/{:?}",
                arch.conv_channels, arch.fc_sizes, expected.conv_channels, expected.fc_sizes
            )));
        }
        let mut model = IronModel::new(arch, input_norm, 0)?;
        for block in &mut model.conv {
            block.bn.epsilon = epsilon;
            block.bn.momentum = momentum;
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let mut values = rest.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let expected_len: usize = model.stored_tensors().iter().map(|t| t.len()).sum();
        if rest.len() != 4 * expected_len {
            return Err(Error::Format(format!(
                "weight payload has {} bytes, expected {}",
                rest.len(),
                4 * expected_len
            )));
        }
        for t in model.stored_tensors_mut() {
            for v in t.iter_mut() {
                *v = values.next().unwrap() as f64;
            }
        }
        if !model.is_finite() || model.conv.iter().any(|c| c.bn.running_var.iter().any(|v| *v < 0.0)) {
            return Err(Error::Format("weight file holds non-finite or negative-variance values".into()));
        }
        Ok(model)
    }

    fn manifest(&self) -> String {
        let eps = self.conv.first().map_or(BN_EPSILON, |c| c.bn.epsilon);
        let mom = self.conv.first().map_or(BN_MOMENTUM, |c| c.bn.momentum);
        let mut s = format!(
            "iron-net\ninput_edge {INPUT_EDGE}\ninput_norm {}\nbn_epsilon {eps:e}\nbn_momentum {mom:e}\n",
            self.input_norm.as_str()
        );
        for c in &self.conv {
            s += &format!("conv {} {} weight bias bn_scale bn_shift bn_running_mean bn_running_var\n", c.in_ch, c.out_ch);
        }
        for f in &self.fc {
            s += &format!("fc {} {} weight bias\n", f.in_dim, f.out_dim);
        }
        s
    }

    fn stored_tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for c in &self.conv {
            out.extend([
                &c.weight[..],
                &c.bias,
                &c.bn.scale,
                &c.bn.shift,
                &c.bn.running_mean,
                &c.bn.running_var,
            ]);
        }
        for f in &self.fc {
            out.extend([&f.weight[..], &f.bias]);
        }
        out
    }

    fn stored_tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for c in &mut self.conv {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
            out.push(&mut c.bn.scale);
            out.push(&mut c.bn.shift);
            out.push(&mut c.bn.running_mean);
            out.push(&mut c.bn.running_var);
        }
        for f in &mut self.fc {
            out.push(&mut f.weight);
            out.push(&mut f.bias);
        }
        out
    }
}

fn parse_manifest(text: &str) -> Result<(Architecture, InputNorm, f64, f64)> {
    let bad = |what: &str| Error::Format(format!("weight manifest: {what}"));
    let mut lines = text.lines();
    if lines.next() != Some("iron-net") {
        return Err(bad("missing header line"));
    }
    let mut conv_channels = vec![];
    let mut fc_sizes = vec![];
    let mut norm = None;
    let (mut eps, mut mom) = (None, None);
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["input_edge", e] if *e == INPUT_EDGE.to_string() => {}
            ["input_edge", _] => return Err(bad("unsupported input edge")),
            ["input_norm", n] => norm = InputNorm::parse(n),
            ["bn_epsilon", v] => eps = v.parse::<f64>().ok(),
            ["bn_momentum", v] => mom = v.parse::<f64>().ok(),
            ["conv", i, o, ..] | ["fc", i, o, ..] => {
                let i: usize = i.parse().map_err(|_| bad("bad layer width"))?;
                let o: usize = o.parse().map_err(|_| bad("bad layer width"))?;
                let plan = if f[0] == "conv" { &mut conv_channels } else { &mut fc_sizes };
                match plan.last() {
                    None => plan.push(i),
                    Some(&prev) if prev == i => {}
                    Some(_) => return Err(bad("layer widths do not chain")),
                }
                plan.push(o);
            }
            [] => {}
            _ => return Err(bad(&format!("unrecognized line {line:?}"))),
        }
    }
    let arch = Architecture {
        conv_channels,
        fc_sizes,
    };
    arch.validate().map_err(|e| bad(&e.to_string()))?;
    let eps = eps.filter(|e| *e > 0.0).ok_or_else(|| bad("missing bn_epsilon"))?;
    let mom = mom
        .filter(|m| (0.0..=1.0).contains(m))
        .ok_or_else(|| bad("missing bn_momentum"))?;
    Ok((arch, norm.ok_or_else(|| bad("missing input_norm"))?, eps, mom))
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `x` is `[B][in]`; returns `[B][out]`.
fn dense_forward(layer: &Dense, x: &[f64], batch: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * layer.out_dim);
    for _ in 0..batch {
        out.extend_from_slice(&layer.bias);
    }
    gemm(
        View::new(x, batch, layer.in_dim),
        View::new(&layer.weight, layer.out_dim, layer.in_dim).t(),
        1.0,
        &mut out,
    );
    out
}

/// Returns `(dW, db, dx)` for `delta = ∂L/∂(xWᵀ + b)`.
fn dense_backward(layer: &Dense, x: &[f64], delta: &[f64], batch: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dw = vec![0.0; layer.out_dim * layer.in_dim];
    gemm(
        View::new(delta, batch, layer.out_dim).t(),
        View::new(x, batch, layer.in_dim),
        0.0,
        &mut dw,
    );
    let mut db = vec![0.0; layer.out_dim];
    for row in delta.chunks(layer.out_dim) {
        for (a, b) in db.iter_mut().zip(row) {
            *a += b;
        }
    }
    let mut dx = vec![0.0; batch * layer.in_dim];
    gemm(
        View::new(delta, batch, layer.out_dim),
        View::new(&layer.weight, layer.out_dim, layer.in_dim),
        0.0,
        &mut dx,
    );
    (dw, db, dx)
}

/// Anything that maps a window to the six raw network outputs.
pub trait OffsetPredictor {
    fn predict_raw(&self, window: &SubTensor) -> Result<[f64; OUTPUT_DIM]>;
}

impl OffsetPredictor for IronModel {
    fn predict_raw(&self, window: &SubTensor) -> Result<[f64; OUTPUT_DIM]> {
        let out = self.infer(&window.values, 1)?;
        Ok(std::array::from_fn(|i| out[i]))
    }
}

/// Test hook: answers every window with the exact label towards `optimum`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerfectStub {
    pub optimum: GridIndex,
}

impl OffsetPredictor for PerfectStub {
    fn predict_raw(&self, window: &SubTensor) -> Result<[f64; OUTPUT_DIM]> {
        let l = make_label(window.center_index, self.optimum, LABEL_SCALE);
        Ok([l[0], l[1], l[2], 0.0, 0.0, 0.0])
    }
}

/// One-shot estimate of the optimal translation from one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub init_center: GridIndex,
    pub init_translation: [f64; 3],
    pub raw_output: [f64; OUTPUT_DIM],
    /// `(Δθx, Δθy, Δθz)` in metres.
    pub offset: [f64; 3],
    pub translation: [f64; 3],
    pub evaluation_count: usize,
}

/// Reads the window at `init_center`, runs the predictor once and turns its
/// first three outputs into a translation estimate.
pub fn predict_optimum<P: OffsetPredictor + ?Sized>(
    predictor: &P,
    tensor: &SimilarityTensor,
    init_center: GridIndex,
    scale: f64,
) -> Result<Prediction> {
    let window = extract_subtensor(tensor, init_center, DEFAULT_WINDOW)?;
    let raw = predictor.predict_raw(&window)?;
    let offset = denormalize_offset([raw[0], raw[1], raw[2]], scale, tensor.grid());
    let init = tensor.grid().node_params(init_center);
    Ok(Prediction {
        init_center,
        init_translation: init,
        raw_output: raw,
        offset,
        translation: std::array::from_fn(|a| init[a] + offset[a]),
        evaluation_count: 1,
    })
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name (or `input`) and flat index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
    /// Smallest |ReLU input| of the instance.
    pub relu_margin: f64,
}

/// Smallest |pre-activation| over every ReLU of a train-mode forward pass.
fn relu_margin(m: &IronModel, x: &[f64], batch: usize) -> Result<f64> {
    let mut scratch = m.clone();
    let (_, cache) = scratch.forward_train(x, batch)?;
    let mut margin = f64::INFINITY;
    for (block, c) in m.conv.iter().zip(&cache.conv) {
        let n = c.bn.xhat.len() / block.out_ch;
        for (ch, row) in c.bn.xhat.chunks(n).enumerate() {
            let (g, b) = (block.bn.scale[ch], block.bn.shift[ch]);
            for v in row {
                margin = margin.min((g * v + b).abs());
            }
        }
    }
    for c in &cache.fc[..cache.fc.len() - 1] {
        for v in &c.pre {
            margin = margin.min(v.abs());
        }
    }
    Ok(margin)
}

/// Compares backward-pass gradients of the reduced network against central
/// differences with step `h`, for every parameter and every input value.
///
/// The loss is `Σ out ⊙ r` for a random `r`, a batch of four random windows.
/// Central differences only approximate a derivative where the function is
/// smooth across `[θ-h, θ+h]`, so the random instance keeps every ReLU input
/// well clear of zero: each block has one channel shifted far into the
/// active region and one shifted far into the active or the dead region, and
/// dense biases are redrawn until the dense ReLU inputs clear a margin.
pub fn gradient_check(seed: u64, h: f64) -> Result<GradCheckReport> {
    const BATCH: usize = 4;
    const MARGIN: f64 = 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = IronModel::new(Architecture::reduced(), InputNorm::Standardize, rng.gen())?;
    for block in &mut m.conv {
        for ch in 0..block.out_ch {
            block.bn.scale[ch] = rng.gen_range(0.5..1.0);
            let sign = if ch == 0 || rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            block.bn.shift[ch] = sign * rng.gen_range(4.5..6.0);
        }
        for b in &mut block.bias {
            *b = rng.gen_range(-0.2..0.2);
        }
    }
    let x: Vec<f64> = (0..BATCH * 729).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r: Vec<f64> = (0..BATCH * OUTPUT_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut margin = 0.0;
    for _ in 0..1000 {
        for layer in &mut m.fc {
            for b in &mut layer.bias {
                *b = rng.gen_range(-0.5..0.5);
            }
        }
        margin = relu_margin(&m, &x, BATCH)?;
        if margin > MARGIN {
            break;
        }
    }
    if margin <= MARGIN {
        return Err(Error::Generation("no smooth gradient-check instance found".into()));
    }

    let loss = |model: &IronModel, input: &[f64]| -> Result<f64> {
        let mut scratch = model.clone();
        let (out, _) = scratch.forward_train(input, BATCH)?;
        Ok(out.iter().zip(&r).map(|(a, b)| a * b).sum())
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);

    let mut probe = m.clone();
    let (_, cache) = probe.forward_train(&x, BATCH)?;
    let grads = probe.backward(&cache, &r)?;
    let names = m.parameter_names();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
        relu_margin: margin,
    };
    let mut record = |name: &str, i: usize, e: f64| {
        report.checked += 1;
        if e >= report.max_rel_error {
            report.max_rel_error = e;
            report.worst = (name.to_string(), i);
        }
    };
    for (t, name) in names.iter().enumerate() {
        for i in 0..m.parameters()[t].len() {
            let mut plus = m.clone();
            plus.parameters_mut()[t][i] += h;
            let mut minus = m.clone();
            minus.parameters_mut()[t][i] -= h;
            let num = (loss(&plus, &x)? - loss(&minus, &x)?) / (2.0 * h);
            record(name, i, rel(grads.params[t][i], num));
        }
    }
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp[i] += h;
        let mut xm = x.clone();
        xm[i] -= h;
        let num = (loss(&m, &xp)? - loss(&m, &xm)?) / (2.0 * h);
        record("input", i, rel(grads.input[i], num));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscape::{make_label, GridSpec, LABEL_SCALE};
    use approx::assert_abs_diff_eq;

    fn random(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn naive_conv(x: &[f64], c_in: usize, d: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
        let e = d - 2;
        let c_out = b.len();
        let mut out = vec![0.0; c_out * e * e * e];
        for o in 0..c_out {
            for z in 0..e {
                for y in 0..e {
                    for xx in 0..e {
                        let mut s = b[o];
                        for c in 0..c_in {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        s += w[((o * c_in + c) * 3 + kz) * 9 + ky * 3 + kx]
                                            * x[((c * d + z + kz) * d + y + ky) * d + xx + kx];
                                    }
                                }
                            }
                        }
                        out[((o * e + z) * e + y) * e + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_of_ones_is_27() {
        let out = conv3d_valid(&[1.0; 27], 1, 3, &[1.0; 27], &[0.0]).unwrap();
        assert_eq!(out, vec![27.0]);
    }

    #[test]
    fn centre_tap_kernel_crops() {
        let x = random(1, 125);
        let mut k = vec![0.0; 27];
        k[13] = 1.0;
        let out = conv3d_valid(&x, 1, 5, &k, &[0.0]).unwrap();
        for z in 0..3 {
            for y in 0..3 {
                for xx in 0..3 {
                    assert_eq!(out[(z * 3 + y) * 3 + xx], x[((z + 1) * 5 + y + 1) * 5 + xx + 1]);
                }
            }
        }
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x = random(2, 2 * 125);
        let w = random(3, 3 * 2 * 27);
        let b = random(4, 3);
        let fast = conv3d_valid(&x, 2, 5, &w, &b).unwrap();
        let slow = naive_conv(&x, 2, 5, &w, &b);
        for (a, e) in fast.iter().zip(&slow) {
            assert_abs_diff_eq!(*a, *e, epsilon = 1e-12);
        }
        let x1 = random(5, 125);
        let w1 = random(6, 2 * 27);
        let fast = conv3d_valid(&x1, 1, 5, &w1, &[0.0, 0.0]).unwrap();
        for (a, e) in fast.iter().zip(naive_conv(&x1, 1, 5, &w1, &[0.0, 0.0])) {
            assert_abs_diff_eq!(*a, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn conv_rejects_small_volume() {
        assert!(matches!(
            conv3d_valid(&[1.0; 8], 1, 2, &[1.0; 27], &[0.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, b, d) = (2, 3, 5);
        let x = random(7, c * b * d * d * d);
        let cols = im2col(&x, c, b, d);
        let y = random(8, cols.len());
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, c, b, d)).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
    }

    #[test]
    fn batchnorm_cases() {
        let mut bn = BatchNorm::new(2);
        let zeros = vec![0.0; 10];
        assert_eq!(batchnorm_forward(&zeros, &mut bn, Mode::Train).unwrap(), zeros);
        assert_eq!(batchnorm_forward(&zeros, &mut bn, Mode::Infer).unwrap(), zeros);

        let x = random(9, 2 * 40);
        let mut bn = BatchNorm::new(2);
        bn.scale = vec![0.0, 0.0];
        bn.shift = vec![0.5, -2.0];
        let y = batchnorm_forward(&x, &mut bn, Mode::Train).unwrap();
        assert!(y[..40].iter().all(|v| *v == 0.5));
        assert!(y[40..].iter().all(|v| *v == -2.0));

        let mut bn = BatchNorm::new(2);
        let y = batchnorm_forward(&x, &mut bn, Mode::Train).unwrap();
        for row in y.chunks(40) {
            let m = row.iter().sum::<f64>() / 40.0;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 40.0;
            assert_abs_diff_eq!(m, 0.0, epsilon = 1e-6);
            // ε in the denominator shrinks the variance by var / (var + ε).
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-3);
        }
        // Running statistics move a tenth of the way towards the batch.
        let row = &x[..40];
        let m = row.iter().sum::<f64>() / 40.0;
        assert_abs_diff_eq!(bn.running_mean[0], 0.1 * m, epsilon = 1e-15);
    }

    #[test]
    fn batchnorm_output_is_standardized_for_large_spread() {
        let x: Vec<f64> = random(10, 3 * 50).iter().map(|v| 100.0 * v + 7.0).collect();
        let mut bn = BatchNorm::new(3);
        let y = batchnorm_forward(&x, &mut bn, Mode::Train).unwrap();
        for row in y.chunks(50) {
            let m = row.iter().sum::<f64>() / 50.0;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 50.0;
            assert_abs_diff_eq!(m, 0.0, epsilon = 1e-6);
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn batchnorm_single_value_rejected() {
        let mut bn = BatchNorm::new(2);
        assert!(matches!(
            batchnorm_forward(&[1.0, 2.0], &mut bn, Mode::Train),
            Err(Error::InsufficientStatistics(_))
        ));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut m = IronModel::new(Architecture::reduced(), InputNorm::None, 1).unwrap();
        for p in m.parameters_mut() {
            p.fill(0.0);
        }
        for c in &mut m.conv {
            c.bn.scale.fill(1.0);
        }
        let out = m.infer(&random(11, 2 * 729), 2).unwrap();
        assert_eq!(out, vec![0.0; 12]);
    }

    #[test]
    fn paper_plan_shapes_and_determinism() {
        let arch = Architecture::default();
        assert_eq!(arch.conv_channels, vec![1, 64, 128, 256, 512]);
        let mut a = IronModel::new(arch.clone(), InputNorm::Standardize, 3).unwrap();
        let mut b = IronModel::new(arch, InputNorm::Standardize, 3).unwrap();
        let x = random(12, 2 * 729);
        let (ya, cache) = a.forward_train(&x, 2).unwrap();
        let (yb, _) = b.forward_train(&x, 2).unwrap();
        assert_eq!(ya, yb);
        assert_eq!(
            cache.conv_shapes(),
            vec![(64, 7), (128, 5), (256, 3), (512, 1)]
        );
        assert_eq!(ya.len(), 2 * OUTPUT_DIM);
        assert_eq!(a.infer(&x, 2).unwrap(), b.infer(&x, 2).unwrap());
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let m = IronModel::new(Architecture::reduced(), InputNorm::None, 1).unwrap();
        assert!(matches!(m.infer(&[0.0; 728], 1), Err(Error::Shape(_))));
    }

    #[test]
    fn infer_is_pure() {
        let m = IronModel::new(Architecture::reduced(), InputNorm::Standardize, 4).unwrap();
        let before = m.clone();
        let x = random(13, 729);
        let first = m.infer(&x, 1).unwrap();
        assert_eq!(m, before);
        assert_eq!(m.infer(&x, 1).unwrap(), first);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut m = IronModel::new(Architecture::reduced(), InputNorm::Standardize, 5).unwrap();
        let (_, cache) = m.forward_train(&random(14, 4 * 729), 4).unwrap();
        let g = m.backward(&cache, &[0.0; 24]).unwrap();
        assert!(g.params.iter().flatten().all(|v| *v == 0.0));
        assert!(g.input.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dense_gradient_is_outer_product() {
        let layer = Dense {
            in_dim: 3,
            out_dim: 2,
            weight: random(15, 6),
            bias: vec![0.0; 2],
        };
        let x = [1.0, -2.0, 0.5];
        let g = [0.3, -1.5];
        let (dw, db, _) = dense_backward(&layer, &x, &g, 1);
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(dw[o * 3 + i], g[o] * x[i]);
            }
        }
        assert_eq!(db, g.to_vec());
    }

    #[test]
    fn stale_cache_rejected() {
        let mut m = IronModel::new(Architecture::reduced(), InputNorm::None, 6).unwrap();
        let (_, cache) = m.forward_train(&random(16, 4 * 729), 4).unwrap();
        m.parameters_mut()[0][0] += 1.0;
        assert!(matches!(m.backward(&cache, &[0.0; 24]), Err(Error::Cache(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let report = gradient_check(seed, 1e-4).unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
            assert_eq!(report.checked, Architecture::reduced().parameter_count() + 4 * 729);
        }
    }

    #[test]
    fn weight_file_round_trip() {
        let mut m = IronModel::new(Architecture::reduced(), InputNorm::Standardize, 7).unwrap();
        m.forward_train(&random(17, 3 * 729), 3).unwrap();
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        let back = IronModel::load(&buf[..], &Architecture::reduced()).unwrap();
        for (a, b) in m.stored_tensors().iter().zip(back.stored_tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        assert_eq!(back.input_norm, InputNorm::Standardize);
        assert!(matches!(
            IronModel::load(&buf[..], &Architecture::default()),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            IronModel::load(&buf[..buf.len() - 1], &Architecture::reduced()),
            Err(Error::Format(_))
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(IronModel::load(&bad[..], &Architecture::reduced()).is_err());
    }

    struct Oracle(GridIndex);
    impl OffsetPredictor for Oracle {
        fn predict_raw(&self, w: &SubTensor) -> Result<[f64; 6]> {
            let l = make_label(w.center_index, self.0, LABEL_SCALE);
            Ok([l[0], l[1], l[2], 0.0, 0.0, 0.0])
        }
    }

    struct Zero;
    impl OffsetPredictor for Zero {
        fn predict_raw(&self, _: &SubTensor) -> Result<[f64; 6]> {
            Ok([0.0; 6])
        }
    }

    fn ramp_tensor() -> SimilarityTensor {
        let grid = GridSpec::default();
        let values = (0..grid.len()).map(|i| i as f64).collect();
        SimilarityTensor::new(grid, values).unwrap()
    }

    #[test]
    fn stubbed_predictions() {
        let t = ramp_tensor();
        let truth = [20, 3, 28];
        let p = predict_optimum(&Oracle(truth), &t, [10, 12, 14], LABEL_SCALE).unwrap();
        let expect = t.grid().node_params(truth);
        for a in 0..3 {
            assert_abs_diff_eq!(p.translation[a], expect[a], epsilon = 1e-9);
        }
        assert_eq!(p.evaluation_count, 1);
        let z = predict_optimum(&Zero, &t, [10, 12, 14], LABEL_SCALE).unwrap();
        assert_eq!(z.translation, t.grid().node_params([10, 12, 14]));
        assert!(matches!(
            predict_optimum(&Zero, &t, [3, 12, 14], LABEL_SCALE),
            Err(Error::Boundary { axis: 'x', .. })
        ));
    }

    #[test]
    fn model_prediction_counts_one_evaluation() {
        let t = ramp_tensor();
        let m = IronModel::new(Architecture::reduced(), InputNorm::Standardize, 8).unwrap();
        for c in [[4, 4, 4], [15, 15, 15], [26, 20, 9]] {
            assert_eq!(predict_optimum(&m, &t, c, LABEL_SCALE).unwrap().evaluation_count, 1);
        }
    }
}
