//! Forward and backward kernels for the primitive operations.
//!
//! Every function here is pure: it reads its operands and returns fresh
//! tensors. The tape in [`crate::tape`] records which kernel produced each
//! value and calls the matching `*_backward` during reverse traversal.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-axis dilation of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Dilation {
    pub h: usize,
    pub w: usize,
}

impl Dilation {
    pub const NONE: Dilation = Dilation { h: 1, w: 1 };

    pub fn new(h: usize, w: usize) -> Self {
        Dilation { h, w }
    }
}

/// Output extent of a valid (unpadded) dilated convolution along one axis.
pub fn dilated_extent(input: usize, kernel: usize, dilation: usize) -> Option<usize> {
    let span = kernel.checked_sub(1)? * dilation + 1;
    input.checked_sub(span).map(|r| r + 1)
}

fn conv_geometry(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    dilation: Dilation,
) -> Result<(usize, usize)> {
    input.expect_rank(4, "conv2d input")?;
    kernels.expect_rank(4, "conv2d kernels")?;
    bias.expect_rank(1, "conv2d bias")?;
    let (c, h, w) = (input.shape()[1], input.shape()[2], input.shape()[3]);
    let (k, kc, kh, kw) = (
        kernels.shape()[0],
        kernels.shape()[1],
        kernels.shape()[2],
        kernels.shape()[3],
    );
    if kc != c {
        return Err(Error::Dimension(format!(
            "conv2d kernels expect {kc} input channels, input has {c}"
        )));
    }
    if bias.shape()[0] != k {
        return Err(Error::Dimension(format!(
            "conv2d bias has {} entries for {k} kernels",
            bias.shape()[0]
        )));
    }
    if dilation.h == 0 || dilation.w == 0 {
        return Err(Error::Argument("dilation must be positive".into()));
    }
    if kh == 0 || kw == 0 {
        return Err(Error::Dimension("conv2d kernel extents must be positive".into()));
    }
    match (
        dilated_extent(h, kh, dilation.h),
        dilated_extent(w, kw, dilation.w),
    ) {
        (Some(oh), Some(ow)) => Ok((oh, ow)),
        _ => Err(Error::Geometry(format!(
            "receptive field {}x{} (kernel {kh}x{kw}, dilation {}x{}) exceeds input {h}x{w}",
            (kh - 1) * dilation.h + 1,
            (kw - 1) * dilation.w + 1,
            dilation.h,
            dilation.w
        ))),
    }
}

/// `out[n,k,i,j] = bias[k] + sum_{c,a,b} kernels[k,c,a,b] * input[n,c,i+a*dh,j+b*dw]`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, dilation: Dilation) -> Result<Tensor> {
    let (oh, ow) = conv_geometry(input, kernels, bias, dilation)?;
    let [n, c, _, _] = dims4(input);
    let [k, _, kh, kw] = dims4(kernels);
    let mut out = Tensor::zeros(&[n, k, oh, ow]);
    let x = input.data();
    let wk = kernels.data();
    let o = out.data_mut();
    for ni in 0..n {
        for ki in 0..k {
            let base = (ni * k + ki) * oh * ow;
            o[base..base + oh * ow].fill(bias.data()[ki]);
            for ci in 0..c {
                for a in 0..kh {
                    for b in 0..kw {
                        let wv = wk[kernels.idx4(ki, ci, a, b)];
                        for i in 0..oh {
                            let row = input.idx4(ni, ci, i + a * dilation.h, b * dilation.w);
                            let orow = base + i * ow;
                            for j in 0..ow {
                                o[orow + j] += wv * x[row + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernels and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    dilation: Dilation,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [n, c, _, _] = dims4(input);
    let [k, _, kh, kw] = dims4(kernels);
    let [_, _, oh, ow] = dims4(grad_out);
    let mut gx = Tensor::zeros(input.shape());
    let mut gk = Tensor::zeros(kernels.shape());
    let mut gb = Tensor::zeros(&[k]);
    let x = input.data();
    let wk = kernels.data();
    let go = grad_out.data();
    for ni in 0..n {
        for ki in 0..k {
            let base = (ni * k + ki) * oh * ow;
            gb.data_mut()[ki] += go[base..base + oh * ow].iter().sum::<f64>();
            for ci in 0..c {
                for a in 0..kh {
                    for b in 0..kw {
                        let widx = kernels.idx4(ki, ci, a, b);
                        let wv = wk[widx];
                        let mut acc = 0.0;
                        for i in 0..oh {
                            let row = input.idx4(ni, ci, i + a * dilation.h, b * dilation.w);
                            let orow = base + i * ow;
                            for j in 0..ow {
                                let g = go[orow + j];
                                acc += g * x[row + j];
                                gx.data_mut()[row + j] += g * wv;
                            }
                        }
                        gk.data_mut()[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}

fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

/// Channel statistics carried between batches.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }
}

/// Values saved by a train-mode batch norm for its backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormSaved {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// (outer, channels, inner) view of a tensor whose channel axis is 1.
fn channel_layout(input: &Tensor) -> Result<(usize, usize, usize)> {
    if input.rank() < 2 {
        return Err(Error::Dimension(format!(
            "batch_norm needs a channel axis, found shape {:?}",
            input.shape()
        )));
    }
    let s = input.shape();
    Ok((s[0], s[1], s[2..].iter().product()))
}

fn check_affine(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, c, inner) = channel_layout(input)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Dimension(format!(
            "batch_norm affine parameters must have shape [{c}], found {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok((n, c, inner))
}

/// Normalizes each channel by its batch statistics.
pub fn batch_norm_train(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Tensor, BatchNormSaved)> {
    let (n, c, inner) = check_affine(input, gamma, beta)?;
    let count = n * inner;
    if count == 0 {
        return Err(Error::Argument(
            "batch_norm in train mode needs a non-empty batch".into(),
        ));
    }
    let x = input.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * inner;
            mean[ci] += x[off..off + inner].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * inner;
            var[ci] += x[off..off + inner]
                .iter()
                .map(|v| (v - mean[ci]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut normalized = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * inner;
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            for p in off..off + inner {
                let xh = (x[p] - mean[ci]) * inv_std[ci];
                normalized.data_mut()[p] = xh;
                out.data_mut()[p] = g * xh + b;
            }
        }
    }
    Ok((
        out,
        BatchNormSaved {
            normalized,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Moves running statistics toward a batch's statistics by [`BN_MOMENTUM`].
///
/// The running variance uses the unbiased batch variance.
pub fn update_running_stats(stats: &mut RunningStats, saved: &BatchNormSaved, count: usize) {
    let unbias = if count > 1 {
        count as f64 / (count - 1) as f64
    } else {
        1.0
    };
    for (ci, (&m, &v)) in saved.batch_mean.iter().zip(&saved.batch_var).enumerate() {
        let rm = &mut stats.mean.data_mut()[ci];
        *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m;
        let rv = &mut stats.var.data_mut()[ci];
        *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v * unbias;
    }
}

pub fn batch_norm_train_backward(
    gamma: &Tensor,
    saved: &BatchNormSaved,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let xh = &saved.normalized;
    let s = xh.shape();
    let (n, c, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
    let count = (n * inner) as f64;
    let go = grad_out.data();
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xh = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * inner;
            for p in off..off + inner {
                sum_dy[ci] += go[p];
                sum_dy_xh[ci] += go[p] * xh.data()[p];
            }
        }
    }
    let mut gx = Tensor::zeros(s);
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * inner;
            let scale = gamma.data()[ci] * saved.inv_std[ci] / count;
            for p in off..off + inner {
                gx.data_mut()[p] =
                    scale * (count * go[p] - sum_dy[ci] - xh.data()[p] * sum_dy_xh[ci]);
            }
        }
    }
    (gx, Tensor::from_vec(sum_dy_xh), Tensor::from_vec(sum_dy))
}

/// Normalizes with fixed running statistics.
pub fn batch_norm_infer(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &RunningStats,
) -> Result<Tensor> {
    let (n, c, inner) = check_affine(input, gamma, beta)?;
    let mut out = Tensor::zeros(input.shape());
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * inner;
            let inv = 1.0 / (stats.var.data()[ci] + BN_EPS).sqrt();
            let (g, b, m) = (gamma.data()[ci], beta.data()[ci], stats.mean.data()[ci]);
            for p in off..off + inner {
                out.data_mut()[p] = g * (input.data()[p] - m) * inv + b;
            }
        }
    }
    Ok(out)
}

pub fn batch_norm_infer_backward(
    input: &Tensor,
    gamma: &Tensor,
    stats: &RunningStats,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let s = input.shape();
    let (n, c, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
    let mut gx = Tensor::zeros(s);
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * inner;
            let inv = 1.0 / (stats.var.data()[ci] + BN_EPS).sqrt();
            let m = stats.mean.data()[ci];
            for p in off..off + inner {
                let g = grad_out.data()[p];
                gx.data_mut()[p] = g * gamma.data()[ci] * inv;
                gg[ci] += g * (input.data()[p] - m) * inv;
                gb[ci] += g;
            }
        }
    }
    (gx, Tensor::from_vec(gg), Tensor::from_vec(gb))
}

/// Non-overlapping mean pooling; trailing cells that do not fill a window
/// are dropped (floor rule).
pub fn avg_pool(input: &Tensor, window: (usize, usize)) -> Result<Tensor> {
    input.expect_rank(4, "avg_pool input")?;
    let [n, k, h, w] = dims4(input);
    let (ph, pw) = window;
    if ph == 0 || pw == 0 {
        return Err(Error::Argument("pooling window must be positive".into()));
    }
    if ph > h || pw > w {
        return Err(Error::Geometry(format!(
            "pooling window {ph}x{pw} exceeds input {h}x{w}"
        )));
    }
    let (oh, ow) = (h / ph, w / pw);
    let norm = 1.0 / (ph * pw) as f64;
    let mut out = Tensor::zeros(&[n, k, oh, ow]);
    for ni in 0..n {
        for ki in 0..k {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for a in 0..ph {
                        for b in 0..pw {
                            acc += input.data()[input.idx4(ni, ki, i * ph + a, j * pw + b)];
                        }
                    }
                    let o = out.idx4(ni, ki, i, j);
                    out.data_mut()[o] = acc * norm;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward(input_shape: &[usize], window: (usize, usize), grad_out: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    let [n, k, oh, ow] = dims4(grad_out);
    let (ph, pw) = window;
    let norm = 1.0 / (ph * pw) as f64;
    for ni in 0..n {
        for ki in 0..k {
            for i in 0..oh {
                for j in 0..ow {
                    let g = grad_out.data()[grad_out.idx4(ni, ki, i, j)] * norm;
                    for a in 0..ph {
                        for b in 0..pw {
                            let p = gx.idx4(ni, ki, i * ph + a, j * pw + b);
                            gx.data_mut()[p] += g;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// `input · weight + bias` for a batch of row vectors.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    input.expect_rank(2, "dense input")?;
    weight.expect_rank(2, "dense weight")?;
    bias.expect_rank(1, "dense bias")?;
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let (wd, m) = (weight.shape()[0], weight.shape()[1]);
    if wd != d || bias.shape()[0] != m {
        return Err(Error::Dimension(format!(
            "dense: input {:?}, weight {:?}, bias {:?} do not agree",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, m]);
    let (x, w) = (input.data(), weight.data());
    for ni in 0..n {
        let orow = &mut out.data_mut()[ni * m..(ni + 1) * m];
        orow.copy_from_slice(bias.data());
        for di in 0..d {
            let xv = x[ni * d + di];
            if xv == 0.0 {
                continue;
            }
            let wrow = &w[di * m..(di + 1) * m];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    Ok(out)
}

pub fn dense_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let m = weight.shape()[1];
    let (x, w, go) = (input.data(), weight.data(), grad_out.data());
    let mut gx = Tensor::zeros(&[n, d]);
    let mut gw = Tensor::zeros(&[d, m]);
    let mut gb = Tensor::zeros(&[m]);
    for ni in 0..n {
        let grow = &go[ni * m..(ni + 1) * m];
        for (b, g) in gb.data_mut().iter_mut().zip(grow) {
            *b += g;
        }
        for di in 0..d {
            let wrow = &w[di * m..(di + 1) * m];
            gx.data_mut()[ni * d + di] = wrow.iter().zip(grow).map(|(a, b)| a * b).sum();
            let xv = x[ni * d + di];
            if xv != 0.0 {
                let gwrow = &mut gw.data_mut()[di * m..(di + 1) * m];
                for (o, g) in gwrow.iter_mut().zip(grow) {
                    *o += xv * g;
                }
            }
        }
    }
    (gx, gw, gb)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::Dimension(format!(
            "concat axis {axis} out of range for rank {rank}"
        )));
    }
    for t in inputs {
        let agrees = t.rank() == rank
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !agrees {
            return Err(Error::Dimension(format!(
                "concat along axis {axis}: shape {:?} does not agree with {:?}",
                t.shape(),
                first.shape()
            )));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let chunk = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(&shape, data)
}

/// Splits an upstream gradient back into the concatenated pieces.
pub fn concat_backward(shapes: &[Vec<usize>], axis: usize, grad_out: &Tensor) -> Vec<Tensor> {
    let outer: usize = grad_out.shape()[..axis].iter().product();
    let inner: usize = grad_out.shape()[axis + 1..].iter().product();
    let total = grad_out.shape()[axis] * inner;
    let mut grads: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    for o in 0..outer {
        let mut cursor = o * total;
        for (g, s) in grads.iter_mut().zip(shapes) {
            let chunk = s[axis] * inner;
            g.extend_from_slice(&grad_out.data()[cursor..cursor + chunk]);
            cursor += chunk;
        }
    }
    grads
        .into_iter()
        .zip(shapes)
        .map(|(g, s)| Tensor::new(s, g).expect("concat split preserves sizes"))
        .collect()
}

/// Multiplies the last axis of `input` elementwise by `weights`, broadcasting
/// over every leading axis.
pub fn scale_last_axis(input: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let f = *input
        .shape()
        .last()
        .ok_or_else(|| Error::Dimension("cannot scale a rank-0 tensor".into()))?;
    if weights.shape() != [f] {
        return Err(Error::Dimension(format!(
            "per-feature weights {:?} do not match last axis {f}",
            weights.shape()
        )));
    }
    let mut out = input.clone();
    for row in out.data_mut().chunks_mut(f) {
        for (x, w) in row.iter_mut().zip(weights.data()) {
            *x *= w;
        }
    }
    Ok(out)
}

pub fn scale_last_axis_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let f = weights.numel();
    let gx = scale_last_axis(grad_out, weights).expect("shapes checked in forward");
    let mut gw = vec![0.0; f];
    for (xrow, grow) in input.data().chunks(f).zip(grad_out.data().chunks(f)) {
        for ((acc, x), g) in gw.iter_mut().zip(xrow).zip(grow) {
            *acc += x * g;
        }
    }
    (gx, Tensor::from_vec(gw))
}

/// Clamp applied to probabilities inside the weighted cross-entropy.
pub const PROB_EPS: f64 = 1e-7;

/// Mean over unmasked entries of `-(beta*y*ln p + (1-y)*ln(1-p))`.
pub fn weighted_bce(probs: &Tensor, labels: &Tensor, mask: &Tensor, beta: &[f64]) -> Result<f64> {
    let count = check_bce(probs, labels, mask, beta)?;
    let t = beta.len();
    let mut acc = 0.0;
    for (i, ((&p, &y), &m)) in probs
        .data()
        .iter()
        .zip(labels.data())
        .zip(mask.data())
        .enumerate()
    {
        if m == 0.0 {
            continue;
        }
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        acc -= beta[i % t] * y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(acc / count as f64)
}

fn check_bce(probs: &Tensor, labels: &Tensor, mask: &Tensor, beta: &[f64]) -> Result<usize> {
    probs.expect_rank(2, "probabilities")?;
    labels.expect_shape(probs.shape())?;
    mask.expect_shape(probs.shape())?;
    if beta.len() != probs.shape()[1] {
        return Err(Error::Dimension(format!(
            "{} class weights for {} tasks",
            beta.len(),
            probs.shape()[1]
        )));
    }
    if let Some(b) = beta.iter().find(|b| !(**b > 0.0)) {
        return Err(Error::Argument(format!("class weight {b} must be positive")));
    }
    let count = mask.data().iter().filter(|&&m| m != 0.0).count();
    if count == 0 {
        return Err(Error::Argument(
            "every label is masked out; the mean loss is undefined".into(),
        ));
    }
    Ok(count)
}

/// Derivative of [`weighted_bce`] with respect to the probabilities. Entries
/// in the clamped region receive zero gradient.
pub fn weighted_bce_backward(probs: &Tensor, labels: &Tensor, mask: &Tensor, beta: &[f64]) -> Tensor {
    let count = mask.data().iter().filter(|&&m| m != 0.0).count() as f64;
    let t = beta.len();
    let data = probs
        .data()
        .iter()
        .zip(labels.data())
        .zip(mask.data())
        .enumerate()
        .map(|(i, ((&p, &y), &m))| {
            if m == 0.0 || !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                0.0
            } else {
                -(beta[i % t] * y / p - (1.0 - y) / (1.0 - p)) / count
            }
        })
        .collect();
    Tensor::new(probs.shape(), data).expect("same shape as probabilities")
}
