//! Forward and backward kernels for the network operations.
//!
//! Every kernel here is a pure function of its inputs (plus an explicit state
//! object for batch normalization and an explicit RNG for dropout). The
//! autodiff graph dispatches to the `*_backward` functions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Result};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Geometry of a 3D (or per-frame 2D, when `temporal_kernel == 1`) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub spatial_kernel: usize,
    pub temporal_kernel: usize,
    pub spatial_stride: usize,
    pub temporal_stride: usize,
    pub out_channels: usize,
    pub spatial_pad: usize,
    pub temporal_pad: usize,
}

impl ConvSpec {
    /// Kernel `k x k x t` with "same"-style padding `(t/2, k/2, k/2)`.
    pub fn new(k: usize, t: usize, spatial_stride: usize, temporal_stride: usize, out_channels: usize) -> Self {
        ConvSpec {
            spatial_kernel: k,
            temporal_kernel: t,
            spatial_stride,
            temporal_stride,
            out_channels,
            spatial_pad: k / 2,
            temporal_pad: t / 2,
        }
    }

    pub fn with_pad(mut self, temporal_pad: usize, spatial_pad: usize) -> Self {
        self.temporal_pad = temporal_pad;
        self.spatial_pad = spatial_pad;
        self
    }

    /// 1x1x1 convolution with unit stride.
    pub fn pointwise(out_channels: usize) -> Self {
        Self::new(1, 1, 1, 1, out_channels)
    }

    pub fn is_2d(&self) -> bool {
        self.temporal_kernel == 1
    }

    pub fn weight_shape(&self, in_channels: usize) -> [usize; 5] {
        [
            self.out_channels,
            in_channels,
            self.temporal_kernel,
            self.spatial_kernel,
            self.spatial_kernel,
        ]
    }

    pub fn kernel_volume(&self) -> usize {
        self.temporal_kernel * self.spatial_kernel * self.spatial_kernel
    }

    /// Output `[T', H', W']` for input `[T, H, W]`.
    pub fn out_extents(&self, [t, h, w]: [usize; 3]) -> Result<[usize; 3]> {
        let check = |what, stride| {
            if stride == 0 {
                Err(shape_err!("{what} stride must be >= 1"))
            } else {
                Ok(())
            }
        };
        check("spatial", self.spatial_stride)?;
        check("temporal", self.temporal_stride)?;
        if self.spatial_kernel == 0 || self.temporal_kernel == 0 || self.out_channels == 0 {
            return Err(shape_err!("kernel extents and output channels must be >= 1: {:?}", self));
        }
        let ot = out_extent(t, self.temporal_kernel, self.temporal_stride, self.temporal_pad)?;
        let oh = out_extent(h, self.spatial_kernel, self.spatial_stride, self.spatial_pad)?;
        let ow = out_extent(w, self.spatial_kernel, self.spatial_stride, self.spatial_pad)?;
        Ok([ot, oh, ow])
    }
}

/// `floor((n + 2 pad - k) / stride) + 1`, rejecting kernels larger than the padded input.
pub fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        return Err(shape_err!("kernel {k} larger than padded extent {padded}"));
    }
    Ok((padded - k) / stride + 1)
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
#[inline]
fn valid_range(out: usize, input: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < input
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if input + pad > k {
        ((input + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn check_conv(input: &Tensor, weight: &Tensor, spec: &ConvSpec) -> Result<([usize; 5], [usize; 3])> {
    let [n, c, t, h, w] = input.dims5()?;
    let expected = spec.weight_shape(c);
    if weight.shape() != expected {
        return Err(shape_err!(
            "conv weight {:?} does not match spec/input (expected {:?})",
            weight.shape(),
            expected
        ));
    }
    let out = spec.out_extents([t, h, w])?;
    Ok(([n, c, t, h, w], out))
}

/// Cross-correlation over `(T, H, W)` with strides `(s_t, s_s, s_s)`.
pub fn conv3d(input: &Tensor, weight: &Tensor, bias: Option<&[f64]>, spec: &ConvSpec) -> Result<Tensor> {
    let ([n, c, t, h, w], [ot, oh, ow]) = check_conv(input, weight, spec)?;
    let co = spec.out_channels;
    if let Some(b) = bias {
        if b.len() != co {
            return Err(shape_err!("conv bias has {} entries, expected {co}", b.len()));
        }
    }
    let (kt, kk) = (spec.temporal_kernel, spec.spatial_kernel);
    let (st, ss) = (spec.temporal_stride, spec.spatial_stride);
    let (pt, ps) = (spec.temporal_pad, spec.spatial_pad);
    let x = input.data();
    let wt = weight.data();
    let in_plane = t * h * w;
    let out_plane = ot * oh * ow;
    let mut out = vec![0.0; n * co * out_plane];

    for b in 0..n {
        for o in 0..co {
            let y = &mut out[(b * co + o) * out_plane..(b * co + o + 1) * out_plane];
            if let Some(bias) = bias {
                y.iter_mut().for_each(|v| *v = bias[o]);
            }
            for i in 0..c {
                let xin = &x[(b * c + i) * in_plane..(b * c + i + 1) * in_plane];
                let wbase = (o * c + i) * kt * kk * kk;
                for dt in 0..kt {
                    let (t_lo, t_hi) = valid_range(ot, t, st, pt, dt);
                    for dh in 0..kk {
                        let (h_lo, h_hi) = valid_range(oh, h, ss, ps, dh);
                        for dw in 0..kk {
                            let wv = wt[wbase + (dt * kk + dh) * kk + dw];
                            let (w_lo, w_hi) = valid_range(ow, w, ss, ps, dw);
                            for a in t_lo..t_hi {
                                let it = a * st + dt - pt;
                                for r in h_lo..h_hi {
                                    let ih = r * ss + dh - ps;
                                    let yrow = &mut y[(a * oh + r) * ow..(a * oh + r + 1) * ow];
                                    let xrow = &xin[(it * h + ih) * w..(it * h + ih + 1) * w];
                                    if ss == 1 {
                                        let off = w_lo + dw - ps;
                                        for (yv, xv) in yrow[w_lo..w_hi].iter_mut().zip(&xrow[off..]) {
                                            *yv += wv * xv;
                                        }
                                    } else {
                                        for q in w_lo..w_hi {
                                            yrow[q] += wv * xrow[q * ss + dw - ps];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, co, ot, oh, ow], out)
}

/// Gradients of [`conv3d`] with respect to input, weight and bias.
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

pub fn conv3d_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor, spec: &ConvSpec) -> Result<ConvGrads> {
    let ([n, c, t, h, w], [ot, oh, ow]) = check_conv(input, weight, spec)?;
    let co = spec.out_channels;
    if grad_out.shape() != [n, co, ot, oh, ow] {
        return Err(shape_err!("conv upstream gradient has shape {:?}", grad_out.shape()));
    }
    let (kt, kk) = (spec.temporal_kernel, spec.spatial_kernel);
    let (st, ss) = (spec.temporal_stride, spec.spatial_stride);
    let (pt, ps) = (spec.temporal_pad, spec.spatial_pad);
    let x = input.data();
    let wt = weight.data();
    let gy = grad_out.data();
    let in_plane = t * h * w;
    let out_plane = ot * oh * ow;
    let mut gx = vec![0.0; input.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; co];

    for b in 0..n {
        for o in 0..co {
            let dy = &gy[(b * co + o) * out_plane..(b * co + o + 1) * out_plane];
            gb[o] += dy.iter().sum::<f64>();
            for i in 0..c {
                let xin = &x[(b * c + i) * in_plane..(b * c + i + 1) * in_plane];
                let dx = &mut gx[(b * c + i) * in_plane..(b * c + i + 1) * in_plane];
                let wbase = (o * c + i) * kt * kk * kk;
                for dt in 0..kt {
                    let (t_lo, t_hi) = valid_range(ot, t, st, pt, dt);
                    for dh in 0..kk {
                        let (h_lo, h_hi) = valid_range(oh, h, ss, ps, dh);
                        for dw in 0..kk {
                            let widx = wbase + (dt * kk + dh) * kk + dw;
                            let wv = wt[widx];
                            let (w_lo, w_hi) = valid_range(ow, w, ss, ps, dw);
                            let mut acc = 0.0;
                            for a in t_lo..t_hi {
                                let it = a * st + dt - pt;
                                for r in h_lo..h_hi {
                                    let ih = r * ss + dh - ps;
                                    let yrow = &dy[(a * oh + r) * ow..(a * oh + r + 1) * ow];
                                    let xo = (it * h + ih) * w;
                                    if ss == 1 {
                                        let off = xo + w_lo + dw - ps;
                                        let len = w_hi - w_lo;
                                        let yseg = &yrow[w_lo..w_hi];
                                        for (yv, xv) in yseg.iter().zip(&xin[off..off + len]) {
                                            acc += yv * xv;
                                        }
                                        for (yv, dv) in yseg.iter().zip(&mut dx[off..off + len]) {
                                            *dv += wv * yv;
                                        }
                                    } else {
                                        for q in w_lo..w_hi {
                                            let xi = xo + q * ss + dw - ps;
                                            acc += yrow[q] * xin[xi];
                                            dx[xi] += wv * yrow[q];
                                        }
                                    }
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), gx)?,
        weight: Tensor::from_vec(weight.shape(), gw)?,
        bias: gb,
    })
}

/// Per-frame 2D convolution: [`conv3d`] restricted to temporal kernel 1.
pub fn conv2d_frames(input: &Tensor, weight: &Tensor, bias: Option<&[f64]>, spec: &ConvSpec) -> Result<Tensor> {
    if !spec.is_2d() {
        return Err(shape_err!("conv2d_frames requires temporal kernel 1, got {}", spec.temporal_kernel));
    }
    conv3d(input, weight, bias, spec)
}

fn channel_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(shape_err!("expected a channel axis, got {:?}", x.shape()));
    }
    let n = x.shape()[0];
    let c = x.shape()[1];
    Ok((n, c, x.len() / (n * c)))
}

/// Fixed-weight pooling of consecutive channel groups: `out_g = weight * sum(u_i, i in group g)`.
pub fn cross_channel_pool(u: &Tensor, group_size: usize, weight: f64) -> Result<Tensor> {
    let (n, c, inner) = channel_layout(u)?;
    if group_size == 0 || c % group_size != 0 {
        return Err(shape_err!("{c} channels not divisible into groups of {group_size}"));
    }
    let groups = c / group_size;
    let src = u.data();
    let mut out = vec![0.0; n * groups * inner];
    for b in 0..n {
        for g in 0..groups {
            let dst = &mut out[(b * groups + g) * inner..(b * groups + g + 1) * inner];
            for m in 0..group_size {
                let ch = g * group_size + m;
                let s = &src[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d *= weight);
        }
    }
    let mut shape = u.shape().to_vec();
    shape[1] = groups;
    Tensor::from_vec(&shape, out)
}

pub fn cross_channel_pool_backward(grad_out: &Tensor, group_size: usize, weight: f64) -> Result<Tensor> {
    let (n, groups, inner) = channel_layout(grad_out)?;
    let c = groups * group_size;
    let g = grad_out.data();
    let mut out = vec![0.0; n * c * inner];
    for b in 0..n {
        for ch in 0..c {
            let grp = ch / group_size;
            let s = &g[(b * groups + grp) * inner..(b * groups + grp + 1) * inner];
            let d = &mut out[(b * c + ch) * inner..(b * c + ch + 1) * inner];
            for (dv, sv) in d.iter_mut().zip(s) {
                *dv = weight * sv;
            }
        }
    }
    let mut shape = grad_out.shape().to_vec();
    shape[1] = c;
    Tensor::from_vec(&shape, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch-normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
    pub mode: Mode,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
            mode: Mode::Train,
        }
    }
}

/// Saved forward quantities needed by [`batch_norm_backward`].
#[derive(Clone, Debug)]
pub struct BnCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub mode: Mode,
}

/// Normalizes per channel over every non-channel axis.
///
/// In train mode the batch statistics are used; in eval mode the supplied
/// running statistics. Returns the output and the cache for the backward pass.
pub fn batch_norm_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    epsilon: f64,
    mode: Mode,
) -> Result<(Tensor, BnCache)> {
    let (n, c, inner) = channel_layout(x)?;
    if [gamma.len(), beta.len(), running_mean.len(), running_var.len()]
        .iter()
        .any(|&l| l != c)
    {
        return Err(shape_err!("batch norm state does not have {c} channels"));
    }
    let d = x.data();
    let count = (n * inner) as f64;
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += d[(b * c + ch) * inner..(b * c + ch + 1) * inner].iter().sum::<f64>();
                }
                let m = s / count;
                let mut v = 0.0;
                for b in 0..n {
                    v += d[(b * c + ch) * inner..(b * c + ch + 1) * inner]
                        .iter()
                        .map(|x| (x - m) * (x - m))
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = v / count;
            }
            (mean, var)
        }
        Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
            for ((xh, yv), xv) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&d[r]) {
                *xh = (xv - mean[ch]) * inv_std[ch];
                *yv = gamma[ch] * *xh + beta[ch];
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), y)?,
        BnCache {
            normalized: Tensor::from_vec(x.shape(), xhat)?,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            mode,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(grad_out: &Tensor, cache: &BnCache, gamma: &[f64]) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, c, inner) = channel_layout(grad_out)?;
    let dy = grad_out.data();
    let xhat = cache.normalized.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
            for (g, xh) in dy[r.clone()].iter().zip(&xhat[r]) {
                dgamma[ch] += g * xh;
                dbeta[ch] += g;
            }
        }
    }
    let count = (n * inner) as f64;
    let mut dx = vec![0.0; dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
            let k = gamma[ch] * cache.inv_std[ch];
            match cache.mode {
                Mode::Train => {
                    let mean_dy = dbeta[ch] / count;
                    let mean_dy_xhat = dgamma[ch] / count;
                    for ((d, g), xh) in dx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&xhat[r]) {
                        *d = k * (g - mean_dy - xh * mean_dy_xhat);
                    }
                }
                Mode::Eval => {
                    for (d, g) in dx[r.clone()].iter_mut().zip(&dy[r]) {
                        *d = k * g;
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(grad_out.shape(), dx)?, dgamma, dbeta))
}

/// Exponential moving average update of running statistics from a train-mode batch.
pub fn update_running_stats(running_mean: &mut [f64], running_var: &mut [f64], cache: &BnCache, momentum: f64) {
    for ((rm, rv), (m, v)) in running_mean
        .iter_mut()
        .zip(running_var.iter_mut())
        .zip(cache.batch_mean.iter().zip(&cache.batch_var))
    {
        *rm = momentum * *rm + (1.0 - momentum) * m;
        *rv = momentum * *rv + (1.0 - momentum) * v;
    }
}

/// Stateful batch normalization: train mode updates the running statistics.
pub fn batch_norm(x: &Tensor, state: &mut BatchNormState) -> Result<Tensor> {
    let (y, cache) = batch_norm_forward(
        x,
        &state.gamma,
        &state.beta,
        &state.running_mean,
        &state.running_var,
        state.epsilon,
        state.mode,
    )?;
    if state.mode == Mode::Train {
        update_running_stats(&mut state.running_mean, &mut state.running_var, &cache, state.momentum);
    }
    Ok(y)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let mask = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    grad_out.mul(&mask)
}

/// Inverted dropout. Returns the output and the multiplicative mask
/// (`0` for dropped elements, `1/(1-p)` for survivors).
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: f64, mode: Mode, rng: &mut R) -> Result<(Tensor, Tensor)> {
    if !(0.0..1.0).contains(&p) {
        return Err(contract_err!("dropout probability {p} outside [0, 1)"));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x.clone(), Tensor::full(x.shape(), 1.0)?));
    }
    let keep = 1.0 / (1.0 - p);
    let data = (0..x.len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    let mask = Tensor::from_vec(x.shape(), data)?;
    Ok((x.mul(&mask)?, mask))
}

/// Mean over `(T, H, W)`; `[N, C, T, H, W] -> [N, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [n, c, ..] = x.dims5()?;
    let inner = x.len() / (n * c);
    let data = x.data().chunks(inner).map(|ch| ch.iter().sum::<f64>() / inner as f64).collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let inner: usize = input_shape[2..].iter().product();
    let mut data = Vec::with_capacity(grad_out.len() * inner);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g / inner as f64, inner));
    }
    Tensor::from_vec(input_shape, data)
}

/// Affine map `[N, C_in] -> [N, K]` with weight `[K, C_in]` and bias `[K]`.
pub fn fully_connected(x: &Tensor, weight: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (&[n, cin], &[k, wcin]) = (x.shape(), weight.shape()) else {
        return Err(shape_err!(
            "fc expects [N,C] input and [K,C] weight, got {:?} and {:?}",
            x.shape(),
            weight.shape()
        ));
    };
    if cin != wcin || bias.len() != k {
        return Err(shape_err!("fc dimension mismatch: input {cin}, weight {wcin}, bias {}", bias.len()));
    }
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![0.0; n * k];
    for b in 0..n {
        let xr = &xd[b * cin..(b + 1) * cin];
        for j in 0..k {
            let wr = &wd[j * cin..(j + 1) * cin];
            out[b * k + j] = bias[j] + xr.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    Tensor::from_vec(&[n, k], out)
}

/// Returns `(dx, dweight, dbias)`.
pub fn fully_connected_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (&[n, cin], &[k, _]) = (x.shape(), weight.shape()) else {
        return Err(shape_err!("fc backward got {:?} and {:?}", x.shape(), weight.shape()));
    };
    let (xd, wd, gd) = (x.data(), weight.data(), grad_out.data());
    let mut dx = vec![0.0; n * cin];
    let mut dw = vec![0.0; k * cin];
    let mut db = vec![0.0; k];
    for b in 0..n {
        for j in 0..k {
            let g = gd[b * k + j];
            db[j] += g;
            for i in 0..cin {
                dx[b * cin + i] += g * wd[j * cin + i];
                dw[j * cin + i] += g * xd[b * cin + i];
            }
        }
    }
    Ok((Tensor::from_vec(&[n, cin], dx)?, Tensor::from_vec(&[k, cin], dw)?, db))
}

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let &[_, k] = logits.shape() else {
        return Err(shape_err!("softmax expects [N,K], got {:?}", logits.shape()));
    };
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::from_vec(logits.shape(), out)
}

/// Mean negative log-likelihood over the batch. Returns `(loss, probabilities)`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let &[n, k] = logits.shape() else {
        return Err(shape_err!("cross entropy expects [N,K] logits, got {:?}", logits.shape()));
    };
    if labels.len() != n {
        return Err(contract_err!("{} labels for a batch of {n}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(contract_err!("label {bad} out of range for {k} classes"));
    }
    let probs = softmax(logits)?;
    let ld = logits.data();
    let mut loss = 0.0;
    for (b, &l) in labels.iter().enumerate() {
        let row = &ld[b * k..(b + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[l];
    }
    Ok((loss / n as f64, probs))
}

/// Gradient of the mean loss with respect to the logits, scaled by `upstream`.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize], upstream: f64) -> Result<Tensor> {
    let &[n, k] = probs.shape() else {
        return Err(shape_err!("bad probability shape {:?}", probs.shape()));
    };
    let mut g = probs.data().to_vec();
    for (b, &l) in labels.iter().enumerate() {
        g[b * k + l] -= 1.0;
    }
    let s = upstream / n as f64;
    g.iter_mut().for_each(|v| *v *= s);
    Tensor::from_vec(&[n, k], g)
}
