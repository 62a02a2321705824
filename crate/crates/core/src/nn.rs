//! Minimal double-precision building blocks for 3D convolutional networks:
//! channel-major activation volumes, strided/padded 3D convolution with
//! im2col + GEMM forward and backward passes, and a few pointwise helpers.

use std::cell::RefCell;

use crate::error::{Error, Result};

/// Activation volume of one sample, laid out `[C][T][H][W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(channels: usize, frames: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            frames,
            height,
            width,
            data: vec![0.0; channels * frames * height * width],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.channels, self.frames, self.height, self.width]
    }

    /// Number of positions per channel (`T * H * W`).
    pub fn extent(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.extent();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_dims(&self) -> Volume {
        Volume::zeros(self.channels, self.frames, self.height, self.width)
    }

    /// Stacks volumes with identical `T x H x W` along the channel axis.
    pub fn concat_channels(parts: &[&Volume]) -> Volume {
        let first = parts[0];
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(channels * first.extent());
        for p in parts {
            debug_assert_eq!(
                (p.frames, p.height, p.width),
                (first.frames, first.height, first.width)
            );
            data.extend_from_slice(&p.data);
        }
        Volume {
            channels,
            frames: first.frames,
            height: first.height,
            width: first.width,
            data,
        }
    }

    /// Inverse of [`Volume::concat_channels`]: splits off the first `head`
    /// channels.
    pub fn split_channels(self, head: usize) -> (Volume, Volume) {
        let at = head * self.extent();
        let mut data = self.data;
        let tail = data.split_off(at);
        (
            Volume {
                channels: head,
                frames: self.frames,
                height: self.height,
                width: self.width,
                data,
            },
            Volume {
                channels: self.channels - head,
                frames: self.frames,
                height: self.height,
                width: self.width,
                data: tail,
            },
        )
    }

    pub fn relu_in_place(&mut self) {
        self.data.iter_mut().filter(|v| **v < 0.0).for_each(|v| *v = 0.0);
    }

    /// Zeroes gradient entries where the post-ReLU activation is not positive.
    pub fn mask_by_relu(&mut self, activated: &Volume) {
        for (g, &a) in self.data.iter_mut().zip(&activated.data) {
            if a <= 0.0 {
                *g = 0.0;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Volume) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Per-channel mean over all positions.
    pub fn global_average(&self) -> Vec<f64> {
        let n = self.extent() as f64;
        (0..self.channels)
            .map(|c| self.channel(c).iter().sum::<f64>() / n)
            .collect()
    }

    /// Gradient of [`Volume::global_average`]: spreads `grad[c] / n` over
    /// every position of channel `c`.
    pub fn global_average_backward(grad: &[f64], like: [usize; 4]) -> Volume {
        let [c, t, h, w] = like;
        let n = t * h * w;
        let mut out = Volume::zeros(c, t, h, w);
        for (chunk, g) in out.data.chunks_exact_mut(n).zip(grad) {
            chunk.fill(g / n as f64);
        }
        out
    }
}

/// `C = A * B` (or `C += A * B`), with `A: m x k`, `B: k x n`, row-major.
/// Either operand may be read transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assertions above guarantee every strided access stays in
    // bounds for the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

thread_local! {
    /// Reusable patch-matrix buffers: `(columns, column gradients)`.
    static SCRATCH: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

/// 3D convolution over `[C][T][H][W]` volumes. Weights are stored
/// `[out][in][kt][kh][kw]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3d {
    pub fn weight_shape(&self) -> [usize; 5] {
        let [kt, kh, kw] = self.kernel;
        [self.out_channels, self.in_channels, kt, kh, kw]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    /// Output `(T, H, W)` for an input of `(T, H, W)`.
    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for axis in 0..3 {
            let padded = input[axis] + 2 * self.padding[axis];
            if padded < self.kernel[axis] || self.stride[axis] == 0 {
                return Err(Error::Shape(format!(
                    "convolution kernel {:?} does not fit input {input:?}",
                    self.kernel
                )));
            }
            out[axis] = (padded - self.kernel[axis]) / self.stride[axis] + 1;
        }
        Ok(out)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    /// Valid output columns `[lo, hi)` of one kernel tap along the width
    /// axis, and the input column of output column `lo`.
    fn width_span(&self, dw: usize, wo: usize, wi: usize) -> (usize, usize) {
        let (sw, pw) = (self.stride[2], self.padding[2]);
        // iw = ow * sw + dw - pw must lie in [0, wi)
        let lo = pw.saturating_sub(dw).div_ceil(sw).min(wo);
        let hi = if wi + pw > dw { ((wi + pw - dw - 1) / sw + 1).min(wo) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Unfolds input patches into a `(in * kt * kh * kw) x (To * Ho * Wo)`
    /// matrix, written into `cols`.
    fn im2col_into(&self, x: &Volume, out: [usize; 3], cols: &mut Vec<f64>) {
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.padding;
        let [to, ho, wo] = out;
        let (ti, hi, wi) = (x.frames, x.height, x.width);
        let cols_n = to * ho * wo;
        let total = self.patch_len() * cols_n;
        if cols.len() < total {
            cols.resize(total, 0.0);
        }
        let mut rows = cols[..total].chunks_exact_mut(cols_n);
        for c in 0..self.in_channels {
            let src = x.channel(c);
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let dst = rows.next().expect("row per kernel tap");
                        let (lo, hi_w) = self.width_span(dw, wo, wi);
                        let first = (lo * sw + dw).wrapping_sub(pw);
                        for (r, out_row) in dst.chunks_exact_mut(wo).enumerate() {
                            let (ot, oh) = (r / ho, r % ho);
                            let it = (ot * st + dt).wrapping_sub(pt);
                            let ih = (oh * sh + dh).wrapping_sub(ph);
                            if it >= ti || ih >= hi || lo >= hi_w {
                                out_row.fill(0.0);
                                continue;
                            }
                            let row = &src[(it * hi + ih) * wi..][..wi];
                            out_row[..lo].fill(0.0);
                            let span = &mut out_row[lo..hi_w];
                            if sw == 1 {
                                span.copy_from_slice(&row[first..first + span.len()]);
                            } else {
                                for (k, d) in span.iter_mut().enumerate() {
                                    *d = row[first + k * sw];
                                }
                            }
                            out_row[hi_w..].fill(0.0);
                        }
                    }
                }
            }
        }
    }

    /// Folds a patch-matrix gradient back onto the input volume.
    fn col2im(&self, cols: &[f64], out: [usize; 3], input: [usize; 4]) -> Volume {
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.padding;
        let [to, ho, wo] = out;
        let cols_n = to * ho * wo;
        let [c_in, ti, hi, wi] = input;
        let mut x = Volume::zeros(c_in, ti, hi, wi);
        let extent = ti * hi * wi;
        let mut row = 0;
        for c in 0..c_in {
            let dst = &mut x.data[c * extent..(c + 1) * extent];
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let (lo, hi_w) = self.width_span(dw, wo, wi);
                        let src = &cols[row * cols_n..(row + 1) * cols_n];
                        row += 1;
                        if lo >= hi_w {
                            continue;
                        }
                        let first = lo * sw + dw - pw;
                        for ot in 0..to {
                            let it = (ot * st + dt).wrapping_sub(pt);
                            if it >= ti {
                                continue;
                            }
                            for oh in 0..ho {
                                let ih = (oh * sh + dh).wrapping_sub(ph);
                                if ih >= hi {
                                    continue;
                                }
                                let g = &src[(ot * ho + oh) * wo + lo..(ot * ho + oh) * wo + hi_w];
                                let base = (it * hi + ih) * wi + first;
                                if sw == 1 {
                                    for (d, v) in dst[base..base + g.len()].iter_mut().zip(g) {
                                        *d += v;
                                    }
                                } else {
                                    for (k, v) in g.iter().enumerate() {
                                        dst[base + k * sw] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, weight: &[f64], bias: &[f64], x: &Volume) -> Result<Volume> {
        if x.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels, x.channels
            )));
        }
        let out = self.output_dims([x.frames, x.height, x.width])?;
        let n = out.iter().product::<usize>();
        let mut y = Volume::zeros(self.out_channels, out[0], out[1], out[2]);
        if self.is_pointwise() {
            gemm(self.out_channels, self.in_channels, n, weight, false, &x.data, false, &mut y.data, false);
        } else {
            SCRATCH.with(|s| {
                let cols = &mut s.borrow_mut().0;
                self.im2col_into(x, out, cols);
                let k = self.patch_len();
                gemm(self.out_channels, k, n, weight, false, &cols[..k * n], false, &mut y.data, false);
            });
        }
        for (chunk, b) in y.data.chunks_exact_mut(n).zip(bias) {
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(y)
    }

    /// Accumulates weight and bias gradients for upstream gradient `grad_out`
    /// and returns the input gradient when `input_grad` is set.
    pub fn backward(
        &self,
        weight: &[f64],
        x: &Volume,
        grad_out: &Volume,
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
        input_grad: bool,
    ) -> Option<Volume> {
        let out = [grad_out.frames, grad_out.height, grad_out.width];
        let n = grad_out.extent();
        for (g, chunk) in grad_bias.iter_mut().zip(grad_out.data.chunks_exact(n)) {
            *g += chunk.iter().sum::<f64>();
        }
        let k = self.patch_len();
        if self.is_pointwise() {
            gemm(self.out_channels, n, k, &grad_out.data, false, &x.data, true, grad_weight, true);
            if !input_grad {
                return None;
            }
            let mut gx = x.same_dims();
            gemm(k, self.out_channels, n, weight, true, &grad_out.data, false, &mut gx.data, false);
            return Some(gx);
        }
        SCRATCH.with(|s| {
            let (cols, grad_cols) = &mut *s.borrow_mut();
            self.im2col_into(x, out, cols);
            gemm(self.out_channels, n, k, &grad_out.data, false, &cols[..k * n], true, grad_weight, true);
            if !input_grad {
                return None;
            }
            if grad_cols.len() < k * n {
                grad_cols.resize(k * n, 0.0);
            }
            let grad_cols = &mut grad_cols[..k * n];
            gemm(k, self.out_channels, n, weight, true, &grad_out.data, false, grad_cols, false);
            Some(self.col2im(grad_cols, out, x.dims()))
        })
    }
}

/// Variance floor of [`instance_norm`].
pub const NORM_EPSILON: f64 = 1e-5;

/// Normalizes each channel of `v` in place to zero mean and unit variance
/// over time and space. Returns the per-channel inverse standard deviation.
pub fn instance_norm(v: &mut Volume) -> Vec<f64> {
    let n = v.extent();
    v.data
        .chunks_mut(n)
        .map(|ch| {
            let mean = ch.iter().sum::<f64>() / n as f64;
            let var = ch.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + NORM_EPSILON).sqrt();
            ch.iter_mut().for_each(|x| *x = (*x - mean) * inv_std);
            inv_std
        })
        .collect()
}

/// Maps the gradient with respect to the output `y` of [`instance_norm`]
/// to the gradient with respect to its input, in place.
pub fn instance_norm_backward(grad: &mut Volume, y: &Volume, inv_std: &[f64]) {
    let n = y.extent();
    for ((g, y), s) in grad.data.chunks_mut(n).zip(y.data.chunks(n)).zip(inv_std) {
        let mean_g = g.iter().sum::<f64>() / n as f64;
        let mean_gy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        for (gi, yi) in g.iter_mut().zip(y) {
            *gi = s * (*gi - mean_g - yi * mean_gy);
        }
    }
}

/// Scales each channel of `v` in place to unit root-mean-square over time
/// and space, without centering. Returns the per-channel scale.
pub fn rms_norm(v: &mut Volume) -> Vec<f64> {
    let n = v.extent();
    v.data
        .chunks_mut(n)
        .map(|ch| {
            let ms = ch.iter().map(|x| x * x).sum::<f64>() / n as f64;
            let scale = 1.0 / (ms + NORM_EPSILON).sqrt();
            ch.iter_mut().for_each(|x| *x *= scale);
            scale
        })
        .collect()
}

/// Backward pass of [`rms_norm`], in place; `y` is its output.
pub fn rms_norm_backward(grad: &mut Volume, y: &Volume, scale: &[f64]) {
    let n = y.extent();
    for ((g, y), s) in grad.data.chunks_mut(n).zip(y.data.chunks(n)).zip(scale) {
        let mean_gy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        for (gi, yi) in g.iter_mut().zip(y) {
            *gi = s * (*gi - yi * mean_gy);
        }
    }
}

/// Scales the whole of `v` in place to unit root-mean-square. Returns the
/// scale as a one-element vector.
pub fn layer_rms_norm(v: &mut Volume) -> Vec<f64> {
    let ms = v.data.iter().map(|x| x * x).sum::<f64>() / v.data.len() as f64;
    let scale = 1.0 / (ms + NORM_EPSILON).sqrt();
    v.data.iter_mut().for_each(|x| *x *= scale);
    vec![scale]
}

/// Backward pass of [`layer_rms_norm`], in place; `y` is its output.
pub fn layer_rms_norm_backward(grad: &mut Volume, y: &Volume, scale: f64) {
    let n = y.data.len() as f64;
    let mean_gy = grad.data.iter().zip(&y.data).map(|(a, b)| a * b).sum::<f64>() / n;
    for (g, yi) in grad.data.iter_mut().zip(&y.data) {
        *g = scale * (*g - yi * mean_gy);
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of `softmax(logits)` against `label`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop convolution, independent of im2col/GEMM.
    fn naive_conv(conv: &Conv3d, w: &[f64], b: &[f64], x: &Volume) -> Volume {
        let out = conv.output_dims([x.frames, x.height, x.width]).unwrap();
        let [kt, kh, kw] = conv.kernel;
        let mut y = Volume::zeros(conv.out_channels, out[0], out[1], out[2]);
        for o in 0..conv.out_channels {
            for ot in 0..out[0] {
                for oh in 0..out[1] {
                    for ow in 0..out[2] {
                        let mut acc = b[o];
                        for c in 0..conv.in_channels {
                            for dt in 0..kt {
                                for dh in 0..kh {
                                    for dw in 0..kw {
                                        let it = (ot * conv.stride[0] + dt) as isize - conv.padding[0] as isize;
                                        let ih = (oh * conv.stride[1] + dh) as isize - conv.padding[1] as isize;
                                        let iw = (ow * conv.stride[2] + dw) as isize - conv.padding[2] as isize;
                                        if it < 0 || ih < 0 || iw < 0 {
                                            continue;
                                        }
                                        let (it, ih, iw) = (it as usize, ih as usize, iw as usize);
                                        if it >= x.frames || ih >= x.height || iw >= x.width {
                                            continue;
                                        }
                                        let wi = (((o * conv.in_channels + c) * kt + dt) * kh + dh) * kw + dw;
                                        let xi = ((c * x.frames + it) * x.height + ih) * x.width + iw;
                                        acc += w[wi] * x.data[xi];
                                    }
                                }
                            }
                        }
                        y.data[((o * out[0] + ot) * out[1] + oh) * out[2] + ow] = acc;
                    }
                }
            }
        }
        y
    }

    fn filled(len: usize, seed: u64) -> Vec<f64> {
        (0..len)
            .map(|i| ((crate::seed::mix(seed ^ i as u64) >> 11) as f64 / (1u64 << 53) as f64) - 0.5)
            .collect()
    }

    fn cases() -> Vec<Conv3d> {
        vec![
            Conv3d { in_channels: 2, out_channels: 3, kernel: [3, 3, 3], stride: [1, 1, 1], padding: [1, 1, 1] },
            Conv3d { in_channels: 3, out_channels: 2, kernel: [5, 2, 2], stride: [4, 2, 2], padding: [2, 0, 0] },
            Conv3d { in_channels: 2, out_channels: 4, kernel: [1, 1, 1], stride: [1, 1, 1], padding: [0, 0, 0] },
            Conv3d { in_channels: 2, out_channels: 2, kernel: [1, 1, 1], stride: [1, 2, 2], padding: [0, 0, 0] },
        ]
    }

    #[test]
    fn forward_matches_direct_loops() {
        for (i, conv) in cases().into_iter().enumerate() {
            let x = Volume { channels: conv.in_channels, frames: 8, height: 5, width: 6, data: filled(conv.in_channels * 240, i as u64) };
            let w = filled(conv.weight_shape().iter().product(), 100 + i as u64);
            let b = filled(conv.out_channels, 200 + i as u64);
            let fast = conv.forward(&w, &b, &x).unwrap();
            let slow = naive_conv(&conv, &w, &b, &x);
            assert_eq!(fast.dims(), slow.dims());
            for (a, e) in fast.data.iter().zip(&slow.data) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (i, conv) in cases().into_iter().enumerate() {
            let x = Volume { channels: conv.in_channels, frames: 8, height: 5, width: 6, data: filled(conv.in_channels * 240, i as u64) };
            let w = filled(conv.weight_shape().iter().product(), 100 + i as u64);
            let b = filled(conv.out_channels, 200 + i as u64);
            let y = conv.forward(&w, &b, &x).unwrap();
            let probe = filled(y.data.len(), 300 + i as u64);
            // loss = <probe, y>
            let loss = |w: &[f64], x: &Volume| -> f64 {
                naive_conv(&conv, w, &b, x).data.iter().zip(&probe).map(|(a, p)| a * p).sum()
            };
            let grad_out = Volume { data: probe.clone(), ..y.clone() };
            let mut gw = vec![0.0; w.len()];
            let mut gb = vec![0.0; b.len()];
            let gx = conv.backward(&w, &x, &grad_out, &mut gw, &mut gb, true).unwrap();
            let h = 1e-6;
            for j in (0..w.len()).step_by(7) {
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp[j] += h;
                wm[j] -= h;
                let fd = (loss(&wp, &x) - loss(&wm, &x)) / (2.0 * h);
                assert!((fd - gw[j]).abs() < 1e-7, "weight {j}: {fd} vs {}", gw[j]);
            }
            for j in (0..x.data.len()).step_by(5) {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data[j] += h;
                xm.data[j] -= h;
                let fd = (loss(&w, &xp) - loss(&w, &xm)) / (2.0 * h);
                assert!((fd - gx.data[j]).abs() < 1e-7, "input {j}: {fd} vs {}", gx.data[j]);
            }
            let bias_grad: f64 = probe[..y.extent()].iter().sum();
            assert!((gb[0] - bias_grad).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_standardizes_and_backprops() {
        let mut x = Volume::zeros(2, 2, 2, 3);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f64).sin() * 3.0 + i as f64 * 0.1;
        }
        let mut y = x.clone();
        let inv = instance_norm(&mut y);
        assert_eq!(inv.len(), 2);
        for c in 0..2 {
            let ch = y.channel(c);
            let mean = ch.iter().sum::<f64>() / 12.0;
            let var = ch.iter().map(|v| v * v).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-4);
        }
        // loss = sum(r * y) for a fixed r
        let r: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).cos()).collect();
        let loss = |x: &Volume| {
            let mut y = x.clone();
            instance_norm(&mut y);
            y.data.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = y.same_dims();
        g.data.copy_from_slice(&r);
        instance_norm_backward(&mut g, &y, &inv);
        let h = 1e-6;
        for i in 0..24 {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - g.data[i]).abs() < 1e-6, "{i}: {fd} vs {}", g.data[i]);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax(&[2.0, 0.0]);
        let e2 = 2f64.exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.8808).abs() < 1e-4 && (p[1] - 0.1192).abs() < 1e-4);
        assert_eq!(softmax(&[1.0, 1.0, 1.0, 1.0]), vec![0.25; 4]);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }

    #[test]
    fn concat_split_inverse() {
        let a = Volume { channels: 1, frames: 1, height: 1, width: 2, data: vec![1.0, 2.0] };
        let b = Volume { channels: 2, frames: 1, height: 1, width: 2, data: vec![3.0, 4.0, 5.0, 6.0] };
        let cat = Volume::concat_channels(&[&a, &b]);
        assert_eq!(cat.channels, 3);
        let (x, y) = cat.split_channels(1);
        assert_eq!((x, y), (a, b));
    }
}
