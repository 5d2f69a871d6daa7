//! Convolution and pooling kernels shared by the tape ops.
//!
//! All layouts are row-major. Video features are `[T, C, H, W]`, frame-wise
//! feature sequences are `[T, C]`. Padding is zero-padding everywhere.

use super::Scalar;

#[inline]
fn idx4(t: usize, c: usize, h: usize, w: usize, ch: usize, hh: usize, ww: usize) -> usize {
    ((t * ch + c) * hh + h) * ww + w
}

/// Output index range `[lo, hi)` whose input position `out * stride + tap - pad`
/// lands inside `[0, in_extent)`.
#[inline]
fn valid_range(out_extent: usize, in_extent: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    let lo = if tap >= pad {
        0
    } else {
        (pad - tap).div_ceil(stride)
    };
    let hi = if in_extent + pad > tap {
        ((in_extent - 1 + pad - tap) / stride + 1).min(out_extent)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Frame-wise 2D convolution: `[T, C, H, W] -> [T, O, H', W']`.
/// Accumulates per kernel tap over precomputed in-bounds output ranges, so the
/// inner loops run branch-free and contiguous at stride 1.
pub(crate) fn conv2d_frames_forward<S: Scalar>(
    x: &[S],
    (t_len, c_in, h, w): (usize, usize, usize, usize),
    weights: &[S],
    (c_out, kh, kw): (usize, usize, usize),
    bias: Option<&[S]>,
    stride: usize,
    pad: usize,
) -> (Vec<S>, (usize, usize)) {
    let h_out = (h + 2 * pad - kh) / stride + 1;
    let w_out = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![S::zero(); t_len * c_out * h_out * w_out];
    if let Some(b) = bias {
        for t in 0..t_len {
            for o in 0..c_out {
                out[idx4(t, o, 0, 0, c_out, h_out, w_out)..idx4(t, o + 1, 0, 0, c_out, h_out, w_out)]
                    .fill(b[o]);
            }
        }
    }
    for t in 0..t_len {
        for o in 0..c_out {
            for c in 0..c_in {
                for dh in 0..kh {
                    let (oh_lo, oh_hi) = valid_range(h_out, h, stride, dh, pad);
                    for dw in 0..kw {
                        let wv = weights[((o * c_in + c) * kh + dh) * kw + dw];
                        if wv == S::zero() {
                            continue;
                        }
                        let (ow_lo, ow_hi) = valid_range(w_out, w, stride, dw, pad);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * stride + dh - pad;
                            let orow = idx4(t, o, oh, 0, c_out, h_out, w_out);
                            let xrow = idx4(t, c, ih, 0, c_in, h, w);
                            if stride == 1 {
                                let shift = dw.wrapping_sub(pad);
                                let dst = &mut out[orow + ow_lo..orow + ow_hi];
                                let src =
                                    &x[xrow + ow_lo.wrapping_add(shift)..xrow + ow_hi.wrapping_add(shift)];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d = *d + wv * s;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * stride + dw - pad;
                                    out[orow + ow] = out[orow + ow] + wv * x[xrow + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, (h_out, w_out))
}

pub(crate) fn conv2d_frames_backward<S: Scalar>(
    grad_out: &[S],
    x: &[S],
    (t_len, c_in, h, w): (usize, usize, usize, usize),
    weights: &[S],
    (c_out, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (h_out, w_out): (usize, usize),
    dx: &mut [S],
    dw_acc: &mut [S],
    db_acc: Option<&mut [S]>,
) {
    for t in 0..t_len {
        for o in 0..c_out {
            for c in 0..c_in {
                for dh in 0..kh {
                    let (oh_lo, oh_hi) = valid_range(h_out, h, stride, dh, pad);
                    for dw in 0..kw {
                        let wi = ((o * c_in + c) * kh + dh) * kw + dw;
                        let wv = weights[wi];
                        let (ow_lo, ow_hi) = valid_range(w_out, w, stride, dw, pad);
                        let mut wsum = S::zero();
                        for oh in oh_lo..oh_hi {
                            let ih = oh * stride + dh - pad;
                            let grow = idx4(t, o, oh, 0, c_out, h_out, w_out);
                            let xrow = idx4(t, c, ih, 0, c_in, h, w);
                            for ow in ow_lo..ow_hi {
                                let iw = ow * stride + dw - pad;
                                let g = grad_out[grow + ow];
                                dx[xrow + iw] = dx[xrow + iw] + g * wv;
                                wsum = wsum + g * x[xrow + iw];
                            }
                        }
                        dw_acc[wi] = dw_acc[wi] + wsum;
                    }
                }
            }
        }
    }
    if let Some(db) = db_acc {
        for t in 0..t_len {
            for o in 0..c_out {
                let base = idx4(t, o, 0, 0, c_out, h_out, w_out);
                let mut acc = S::zero();
                for p in 0..h_out * w_out {
                    acc = acc + grad_out[base + p];
                }
                db[o] = db[o] + acc;
            }
        }
    }
}

/// Grouped dilated 3D convolution over `(T, H, W)` with channels, shape
/// preserving: padding must equal `dilation * (kernel - 1) / 2` per axis.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_forward<S: Scalar>(
    x: &[S],
    (t_len, c_in, h, w): (usize, usize, usize, usize),
    weights: &[S],
    (c_out, kt, kh, kw): (usize, usize, usize, usize),
    groups: usize,
    (dt, dh, dw): (usize, usize, usize),
    (pt, ph, pw): (usize, usize, usize),
) -> Vec<S> {
    let cg_in = c_in / groups;
    let cg_out = c_out / groups;
    let mut out = vec![S::zero(); t_len * c_out * h * w];
    for g in 0..groups {
        for og in 0..cg_out {
            let o = g * cg_out + og;
            for t in 0..t_len {
                for oh in 0..h {
                    for ow in 0..w {
                        let mut acc = S::zero();
                        for cg in 0..cg_in {
                            let c = g * cg_in + cg;
                            for qt in 0..kt {
                                let it = (t + qt * dt).wrapping_sub(pt);
                                if it >= t_len {
                                    continue;
                                }
                                for qh in 0..kh {
                                    let ih = (oh + qh * dh).wrapping_sub(ph);
                                    if ih >= h {
                                        continue;
                                    }
                                    for qw in 0..kw {
                                        let iw = (ow + qw * dw).wrapping_sub(pw);
                                        if iw >= w {
                                            continue;
                                        }
                                        let wi = (((o * cg_in + cg) * kt + qt) * kh + qh) * kw + qw;
                                        acc = acc
                                            + x[idx4(it, c, ih, iw, c_in, h, w)] * weights[wi];
                                    }
                                }
                            }
                        }
                        out[idx4(t, o, oh, ow, c_out, h, w)] = acc;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward<S: Scalar>(
    grad_out: &[S],
    x: &[S],
    (t_len, c_in, h, w): (usize, usize, usize, usize),
    weights: &[S],
    (c_out, kt, kh, kw): (usize, usize, usize, usize),
    groups: usize,
    (dt, dh, dw): (usize, usize, usize),
    (pt, ph, pw): (usize, usize, usize),
    dx: &mut [S],
    dw_acc: &mut [S],
) {
    let cg_in = c_in / groups;
    let cg_out = c_out / groups;
    for g in 0..groups {
        for og in 0..cg_out {
            let o = g * cg_out + og;
            for t in 0..t_len {
                for oh in 0..h {
                    for ow in 0..w {
                        let gr = grad_out[idx4(t, o, oh, ow, c_out, h, w)];
                        if gr == S::zero() {
                            continue;
                        }
                        for cg in 0..cg_in {
                            let c = g * cg_in + cg;
                            for qt in 0..kt {
                                let it = (t + qt * dt).wrapping_sub(pt);
                                if it >= t_len {
                                    continue;
                                }
                                for qh in 0..kh {
                                    let ih = (oh + qh * dh).wrapping_sub(ph);
                                    if ih >= h {
                                        continue;
                                    }
                                    for qw in 0..kw {
                                        let iw = (ow + qw * dw).wrapping_sub(pw);
                                        if iw >= w {
                                            continue;
                                        }
                                        let xi = idx4(it, c, ih, iw, c_in, h, w);
                                        let wi = (((o * cg_in + cg) * kt + qt) * kh + qh) * kw + qw;
                                        dx[xi] = dx[xi] + gr * weights[wi];
                                        dw_acc[wi] = dw_acc[wi] + gr * x[xi];
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

/// Pointwise channel projection: `[T, C, H, W] x [O, C] -> [T, O, H, W]`.
pub(crate) fn conv1x1x1_forward<S: Scalar>(
    x: &[S],
    (t_len, c_in, h, w): (usize, usize, usize, usize),
    weights: &[S],
    c_out: usize,
    bias: Option<&[S]>,
) -> Vec<S> {
    let hw = h * w;
    let mut out = vec![S::zero(); t_len * c_out * hw];
    for t in 0..t_len {
        for o in 0..c_out {
            let b = bias.map_or(S::zero(), |b| b[o]);
            let dst = (t * c_out + o) * hw;
            for p in 0..hw {
                out[dst + p] = b;
            }
            for c in 0..c_in {
                let wv = weights[o * c_in + c];
                if wv == S::zero() {
                    continue;
                }
                let src = (t * c_in + c) * hw;
                for p in 0..hw {
                    out[dst + p] = out[dst + p] + wv * x[src + p];
                }
            }
        }
    }
    out
}

pub(crate) fn conv1x1x1_backward<S: Scalar>(
    grad_out: &[S],
    x: &[S],
    (t_len, c_in, h, w): (usize, usize, usize, usize),
    weights: &[S],
    c_out: usize,
    dx: &mut [S],
    dw_acc: &mut [S],
    db_acc: Option<&mut [S]>,
) {
    let hw = h * w;
    for t in 0..t_len {
        for o in 0..c_out {
            let gsrc = (t * c_out + o) * hw;
            for c in 0..c_in {
                let wv = weights[o * c_in + c];
                let xsrc = (t * c_in + c) * hw;
                let mut wsum = S::zero();
                for p in 0..hw {
                    let g = grad_out[gsrc + p];
                    dx[xsrc + p] = dx[xsrc + p] + g * wv;
                    wsum = wsum + g * x[xsrc + p];
                }
                dw_acc[o * c_in + c] = dw_acc[o * c_in + c] + wsum;
            }
        }
    }
    if let Some(db) = db_acc {
        for t in 0..t_len {
            for o in 0..c_out {
                let gsrc = (t * c_out + o) * hw;
                for p in 0..hw {
                    db[o] = db[o] + grad_out[gsrc + p];
                }
            }
        }
    }
}

/// Temporal convolution over `[T, C]` sequences, length preserving for
/// `pad = (k - 1) / 2`.
pub(crate) fn conv1d_forward<S: Scalar>(
    x: &[S],
    (t_len, c_in): (usize, usize),
    weights: &[S],
    (c_out, k): (usize, usize),
    bias: Option<&[S]>,
    pad: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); t_len * c_out];
    for t in 0..t_len {
        for o in 0..c_out {
            let mut acc = bias.map_or(S::zero(), |b| b[o]);
            for dk in 0..k {
                let it = (t + dk).wrapping_sub(pad);
                if it >= t_len {
                    continue;
                }
                for c in 0..c_in {
                    acc = acc + x[it * c_in + c] * weights[(o * c_in + c) * k + dk];
                }
            }
            out[t * c_out + o] = acc;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward<S: Scalar>(
    grad_out: &[S],
    x: &[S],
    (t_len, c_in): (usize, usize),
    weights: &[S],
    (c_out, k): (usize, usize),
    pad: usize,
    dx: &mut [S],
    dw_acc: &mut [S],
    db_acc: Option<&mut [S]>,
) {
    for t in 0..t_len {
        for o in 0..c_out {
            let g = grad_out[t * c_out + o];
            if g == S::zero() {
                continue;
            }
            for dk in 0..k {
                let it = (t + dk).wrapping_sub(pad);
                if it >= t_len {
                    continue;
                }
                for c in 0..c_in {
                    let wi = (o * c_in + c) * k + dk;
                    dx[it * c_in + c] = dx[it * c_in + c] + g * weights[wi];
                    dw_acc[wi] = dw_acc[wi] + g * x[it * c_in + c];
                }
            }
        }
    }
    if let Some(db) = db_acc {
        for t in 0..t_len {
            for o in 0..c_out {
                db[o] = db[o] + grad_out[t * c_out + o];
            }
        }
    }
}

/// Max pooling over time with stride = kernel; ties pick the earlier step.
/// Returns the pooled values and the flat argmax index per output element.
pub(crate) fn max_pool1d_forward<S: Scalar>(
    x: &[S],
    (t_len, c): (usize, usize),
    k: usize,
) -> (Vec<S>, Vec<usize>) {
    let t_out = t_len / k;
    let mut out = vec![S::zero(); t_out * c];
    let mut arg = vec![0usize; t_out * c];
    for u in 0..t_out {
        for ch in 0..c {
            let mut best = x[(u * k) * c + ch];
            let mut best_i = (u * k) * c + ch;
            for d in 1..k {
                let i = (u * k + d) * c + ch;
                if x[i] > best {
                    best = x[i];
                    best_i = i;
                }
            }
            out[u * c + ch] = best;
            arg[u * c + ch] = best_i;
        }
    }
    (out, arg)
}
