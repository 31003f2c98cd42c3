//! Slice-level forward and backward kernels.
//!
//! Every kernel accumulates in a fixed loop order so results are
//! bit-identical from run to run.

use crate::tensor::numel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn symmetric(ph: usize, pw: usize) -> Self {
        Self {
            top: ph,
            bottom: ph,
            left: pw,
            right: pw,
        }
    }

    /// Pads the width axis so a stride-1 convolution with kernel width `kw`
    /// keeps the width unchanged. Even kernels put the extra column on the right.
    pub fn same_width(kw: usize) -> Self {
        let total = kw.saturating_sub(1);
        Self {
            top: 0,
            bottom: 0,
            left: total / 2,
            right: total - total / 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad: Padding,
    pub ho: usize,
    pub wo: usize,
}

/// Output positions `o` whose input index `o * stride + k - pad` lands in `[0, in_len)`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    if in_len + pad <= k {
        return (0, 0);
    }
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut out = vec![0.0; g.n * g.cout * plane_out];
    for n in 0..g.n {
        for o in 0..g.cout {
            let plane = &mut out[(n * g.cout + o) * plane_out..][..plane_out];
            if let Some(b) = bias {
                plane.fill(b[o]);
            }
            for c in 0..g.cin {
                let xin = &x[(n * g.cin + c) * plane_in..][..plane_in];
                let wk = &weight[(o * g.cin + c) * g.kh * g.kw..][..g.kh * g.kw];
                for ki in 0..g.kh {
                    let (oh_lo, oh_hi) = valid_range(g.ho, g.h, g.sh, ki, g.pad.top);
                    for kj in 0..g.kw {
                        let wv = wk[ki * g.kw + kj];
                        let (ow_lo, ow_hi) = valid_range(g.wo, g.w, g.sw, kj, g.pad.left);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.sh + ki - g.pad.top;
                            let row = &xin[ih * g.w..][..g.w];
                            let orow = &mut plane[oh * g.wo..][..g.wo];
                            if g.sw == 1 {
                                let start = ow_lo + kj - g.pad.left;
                                for (dst, src) in orow[ow_lo..ow_hi].iter_mut().zip(&row[start..]) {
                                    *dst += wv * src;
                                }
                            } else {
                                for (ow, dst) in orow.iter_mut().enumerate().take(ow_hi).skip(ow_lo) {
                                    *dst += wv * row[ow * g.sw + kj - g.pad.left];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward_input(grad: &[f64], weight: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut gx = vec![0.0; g.n * g.cin * plane_in];
    for n in 0..g.n {
        for o in 0..g.cout {
            let gplane = &grad[(n * g.cout + o) * plane_out..][..plane_out];
            for c in 0..g.cin {
                let gin = &mut gx[(n * g.cin + c) * plane_in..][..plane_in];
                let wk = &weight[(o * g.cin + c) * g.kh * g.kw..][..g.kh * g.kw];
                for ki in 0..g.kh {
                    let (oh_lo, oh_hi) = valid_range(g.ho, g.h, g.sh, ki, g.pad.top);
                    for kj in 0..g.kw {
                        let wv = wk[ki * g.kw + kj];
                        let (ow_lo, ow_hi) = valid_range(g.wo, g.w, g.sw, kj, g.pad.left);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.sh + ki - g.pad.top;
                            let grow = &gplane[oh * g.wo..][..g.wo];
                            let dst = &mut gin[ih * g.w..][..g.w];
                            for ow in ow_lo..ow_hi {
                                dst[ow * g.sw + kj - g.pad.left] += wv * grow[ow];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

pub(crate) fn conv2d_backward_weight(grad: &[f64], x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut gw = vec![0.0; g.cout * g.cin * g.kh * g.kw];
    for n in 0..g.n {
        for o in 0..g.cout {
            let gplane = &grad[(n * g.cout + o) * plane_out..][..plane_out];
            for c in 0..g.cin {
                let xin = &x[(n * g.cin + c) * plane_in..][..plane_in];
                let gk = &mut gw[(o * g.cin + c) * g.kh * g.kw..][..g.kh * g.kw];
                for ki in 0..g.kh {
                    let (oh_lo, oh_hi) = valid_range(g.ho, g.h, g.sh, ki, g.pad.top);
                    for kj in 0..g.kw {
                        let (ow_lo, ow_hi) = valid_range(g.wo, g.w, g.sw, kj, g.pad.left);
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.sh + ki - g.pad.top;
                            let grow = &gplane[oh * g.wo..][..g.wo];
                            let row = &xin[ih * g.w..][..g.w];
                            for ow in ow_lo..ow_hi {
                                acc += grow[ow] * row[ow * g.sw + kj - g.pad.left];
                            }
                        }
                        gk[ki * g.kw + kj] += acc;
                    }
                }
            }
        }
    }
    gw
}

/// Sums a `[n, c, rest]` buffer over `n` and `rest`.
pub(crate) fn channel_sums(grad: &[f64], n: usize, c: usize) -> Vec<f64> {
    let rest = grad.len() / (n * c);
    let mut out = vec![0.0; c];
    for i in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            *acc += grad[(i * c + ch) * rest..][..rest].iter().sum::<f64>();
        }
    }
    out
}

pub(crate) fn dense_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, n: usize, fin: usize, fout: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * fout];
    for i in 0..n {
        let row = &x[i * fin..][..fin];
        for o in 0..fout {
            let w = &weight[o * fin..][..fin];
            let dot: f64 = w.iter().zip(row).map(|(a, b)| a * b).sum();
            out[i * fout + o] = bias.map_or(0.0, |b| b[o]) + dot;
        }
    }
    out
}

pub(crate) fn dense_backward_input(grad: &[f64], weight: &[f64], n: usize, fin: usize, fout: usize) -> Vec<f64> {
    let mut gx = vec![0.0; n * fin];
    for i in 0..n {
        let dst = &mut gx[i * fin..][..fin];
        for o in 0..fout {
            let gv = grad[i * fout + o];
            for (d, w) in dst.iter_mut().zip(&weight[o * fin..][..fin]) {
                *d += gv * w;
            }
        }
    }
    gx
}

pub(crate) fn dense_backward_weight(grad: &[f64], x: &[f64], n: usize, fin: usize, fout: usize) -> Vec<f64> {
    let mut gw = vec![0.0; fout * fin];
    for i in 0..n {
        let row = &x[i * fin..][..fin];
        for o in 0..fout {
            let gv = grad[i * fout + o];
            for (d, xv) in gw[o * fin..][..fin].iter_mut().zip(row) {
                *d += gv * xv;
            }
        }
    }
    gw
}

/// Per-channel statistics of a `[n, c, rest]` buffer: biased mean and variance.
pub(crate) fn channel_moments(x: &[f64], n: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let rest = x.len() / (n * c);
    let count = (n * rest) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (ch, m) in mean.iter_mut().enumerate() {
        let mut s = 0.0;
        for i in 0..n {
            s += x[(i * c + ch) * rest..][..rest].iter().sum::<f64>();
        }
        *m = s / count;
    }
    for (ch, v) in var.iter_mut().enumerate() {
        let mut s = 0.0;
        for i in 0..n {
            s += x[(i * c + ch) * rest..][..rest]
                .iter()
                .map(|&a| (a - mean[ch]) * (a - mean[ch]))
                .sum::<f64>();
        }
        *v = s / count;
    }
    (mean, var)
}

/// `xhat = (x - mean) * inv_std` per channel.
pub(crate) fn normalize_channels(x: &[f64], mean: &[f64], inv_std: &[f64], n: usize, c: usize) -> Vec<f64> {
    let rest = x.len() / (n * c);
    let mut out = Vec::with_capacity(x.len());
    for _ in 0..n {
        for ch in 0..c {
            let start = out.len();
            out.extend(
                x[start..start + rest]
                    .iter()
                    .map(|&a| (a - mean[ch]) * inv_std[ch]),
            );
        }
    }
    out
}

pub(crate) fn affine_channels(xhat: &[f64], gamma: &[f64], beta: &[f64], n: usize, c: usize) -> Vec<f64> {
    let rest = xhat.len() / (n * c);
    let mut out = Vec::with_capacity(xhat.len());
    for _ in 0..n {
        for ch in 0..c {
            let start = out.len();
            out.extend(xhat[start..start + rest].iter().map(|&a| gamma[ch] * a + beta[ch]));
        }
    }
    out
}

/// Input gradient of batch normalization using batch statistics.
pub(crate) fn batchnorm_train_backward_input(grad: &[f64], xhat: &[f64], gamma: &[f64], inv_std: &[f64], n: usize, c: usize) -> Vec<f64> {
    let rest = grad.len() / (n * c);
    let count = (n * rest) as f64;
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * rest;
            for k in off..off + rest {
                sum_g[ch] += grad[k];
                sum_gx[ch] += grad[k] * xhat[k];
            }
        }
    }
    let mut gx = vec![0.0; grad.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * rest;
            let scale = gamma[ch] * inv_std[ch] / count;
            for k in off..off + rest {
                gx[k] = scale * (count * grad[k] - sum_g[ch] - xhat[k] * sum_gx[ch]);
            }
        }
    }
    gx
}

pub(crate) fn scale_channels(grad: &[f64], factor: &[f64], n: usize, c: usize) -> Vec<f64> {
    let rest = grad.len() / (n * c);
    let mut out = Vec::with_capacity(grad.len());
    for _ in 0..n {
        for f in factor.iter().take(c) {
            let start = out.len();
            out.extend(grad[start..start + rest].iter().map(|&g| g * f));
        }
    }
    out
}

/// `sum(grad * xhat)` per channel.
pub(crate) fn channel_dot(grad: &[f64], xhat: &[f64], n: usize, c: usize) -> Vec<f64> {
    let rest = grad.len() / (n * c);
    let mut out = vec![0.0; c];
    for i in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            let off = (i * c + ch) * rest;
            for k in off..off + rest {
                *acc += grad[k] * xhat[k];
            }
        }
    }
    out
}

/// First index of the maximum; ties resolve to the earliest position.
pub(crate) fn first_argmax<I: Iterator<Item = f64>>(values: I) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if i == 0 || v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Shapes and strides for an equal-rank broadcast where size-1 axes stretch.
#[derive(Debug, Clone)]
pub(crate) struct Broadcast {
    pub out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

impl Broadcast {
    pub fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        if a.len() != b.len() {
            return None;
        }
        let mut out_shape = Vec::with_capacity(a.len());
        for (&x, &y) in a.iter().zip(b) {
            match (x, y) {
                _ if x == y => out_shape.push(x),
                (1, _) => out_shape.push(y),
                (_, 1) => out_shape.push(x),
                _ => return None,
            }
        }
        let stretch = |shape: &[usize]| -> Vec<usize> {
            contiguous_strides(shape)
                .into_iter()
                .zip(shape.iter().zip(&out_shape))
                .map(|(s, (&d, &o))| if d == 1 && o != 1 { 0 } else { s })
                .collect()
        };
        Some(Self {
            a_strides: stretch(a),
            b_strides: stretch(b),
            out_shape,
        })
    }

    /// Source offsets into `a` and `b` for every output element, in row-major order.
    pub fn offsets(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let total = numel(&self.out_shape);
        let rank = self.out_shape.len();
        let mut index = vec![0usize; rank];
        let mut oa = 0usize;
        let mut ob = 0usize;
        (0..total).map(move |step| {
            if step > 0 {
                for axis in (0..rank).rev() {
                    index[axis] += 1;
                    oa += self.a_strides[axis];
                    ob += self.b_strides[axis];
                    if index[axis] < self.out_shape[axis] {
                        break;
                    }
                    oa -= self.a_strides[axis] * index[axis];
                    ob -= self.b_strides[axis] * index[axis];
                    index[axis] = 0;
                }
            }
            (oa, ob)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for in_len in 1..7 {
            for k in 0..5 {
                for pad in 0..4 {
                    for stride in 1..4 {
                        let out_len = 8;
                        let expected: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = (o * stride + k) as isize - pad as isize;
                                i >= 0 && (i as usize) < in_len
                            })
                            .collect();
                        let (lo, hi) = valid_range(out_len, in_len, stride, k, pad);
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, expected, "in={in_len} k={k} pad={pad} s={stride}");
                    }
                }
            }
        }
    }

    #[test]
    fn broadcast_offsets_stretch_unit_axes() {
        let bc = Broadcast::new(&[2, 3], &[2, 1]).unwrap();
        let offs: Vec<_> = bc.offsets().collect();
        assert_eq!(offs, vec![(0, 0), (1, 0), (2, 0), (3, 1), (4, 1), (5, 1)]);
        assert!(Broadcast::new(&[2, 3], &[3, 2]).is_none());
        assert!(Broadcast::new(&[2, 3], &[3]).is_none());
    }

    #[test]
    fn same_width_padding_for_even_kernel() {
        let p = Padding::same_width(6);
        assert_eq!((p.left, p.right), (2, 3));
        let p = Padding::same_width(7);
        assert_eq!((p.left, p.right), (3, 3));
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(first_argmax([1.0, 3.0, 3.0, 2.0].into_iter()), (1, 3.0));
    }
}
