//! Cross-frame affinity maps and bidirectional trajectory aggregation.
//!
//! For a pixel `(i, j)` in frame `x_t`, affinities against positions
//! `(i', j')` of an adjacent frame are channel-averaged dot products. Gating
//! squashes them into `(-0.5, 0.5)`, and aggregation pulls the adjacent
//! frame's features back to `(i, j)` weighted by the gated affinities. Both
//! temporal directions are mixed with learnable coefficients.

use crate::tensor::{ParamId, Parameters, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Spatial extent of the affinity neighborhood in the adjacent frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Neighborhood {
    /// Every position of the adjacent frame.
    Full,
    /// Odd `K x K` window centered on the reference pixel.
    Window(usize),
}

impl Neighborhood {
    pub(crate) fn window(self) -> Option<usize> {
        match self {
            Neighborhood::Full => None,
            Neighborhood::Window(k) => Some(k),
        }
    }
}

/// Geometry of the correlation computation for one feature stage.
#[derive(Clone, Copy, Debug)]
pub struct CorrelationConfig {
    pub neighborhood: Neighborhood,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl CorrelationConfig {
    pub fn new(neighborhood: Neighborhood, frames: usize, height: usize, width: usize) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(
                "correlation extents must be positive".into(),
            ));
        }
        validate_window(neighborhood.window(), height, width)?;
        Ok(CorrelationConfig {
            neighborhood,
            frames,
            height,
            width,
        })
    }
}

pub(crate) fn validate_window(window: Option<usize>, h: usize, w: usize) -> Result<()> {
    if let Some(k) = window {
        if k % 2 == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!(
                "correlation window must be odd, got {k}"
            )));
        }
        if k > 2 * h.max(w) - 1 {
            return Err(Error::InvalidArgument(format!(
                "correlation window {k} exceeds 2*max(H,W)-1 = {}",
                2 * h.max(w) - 1
            )));
        }
    }
    Ok(())
}

/// Learnable per-direction mixing coefficients, both initialized to 0.5.
#[derive(Clone, Copy, Debug)]
pub struct CorrelationParams {
    /// Weight of the next-frame (t+1) trajectory term.
    pub beta_next: ParamId,
    /// Weight of the previous-frame (t-1) trajectory term.
    pub beta_prev: ParamId,
}

impl CorrelationParams {
    pub fn register<S: Scalar>(params: &mut Parameters<S>, prefix: &str) -> Result<Self> {
        let half = Tensor::scalar(S::from_f64(0.5));
        Ok(CorrelationParams {
            beta_next: params.register(&format!("{prefix}.beta_next"), half.clone(), true)?,
            beta_prev: params.register(&format!("{prefix}.beta_prev"), half, true)?,
        })
    }
}

// ── Raw kernels (shared with the tape ops) ──────────────────────────

/// Reorder `[C, HW]` channel-major data to `[HW, C]` position-major rows so
/// per-position channel vectors are contiguous.
fn to_position_major<S: Scalar>(x: &[S], c: usize, hw: usize) -> Vec<S> {
    let mut out = vec![S::zero(); c * hw];
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = x[ch * hw + p];
        }
    }
    out
}

fn from_position_major<S: Scalar>(x: &[S], c: usize, hw: usize, out: &mut [S]) {
    for p in 0..hw {
        for ch in 0..c {
            out[ch * hw + p] = out[ch * hw + p] + x[p * c + ch];
        }
    }
}

pub(crate) fn affinity_forward<S: Scalar>(
    xt: &[S],
    xu: &[S],
    (c, h, w): (usize, usize, usize),
    window: Option<usize>,
) -> (Vec<S>, Vec<usize>) {
    let inv_c = S::from_f64(1.0 / c as f64);
    let hw = h * w;
    match window {
        None => {
            let xt_p = to_position_major(xt, c, hw);
            let xu_p = to_position_major(xu, c, hw);
            let mut out = vec![S::zero(); hw * hw];
            for p in 0..hw {
                let tp = &xt_p[p * c..(p + 1) * c];
                let row = &mut out[p * hw..(p + 1) * hw];
                for (q, slot) in row.iter_mut().enumerate() {
                    let uq = &xu_p[q * c..(q + 1) * c];
                    let mut acc = S::zero();
                    for ch in 0..c {
                        acc = acc + tp[ch] * uq[ch];
                    }
                    *slot = acc * inv_c;
                }
            }
            (out, vec![h, w, h, w])
        }
        Some(k) => {
            let off = (k - 1) / 2;
            let mut out = vec![S::zero(); hw * k * k];
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    for a in 0..k {
                        let iu = (i + a).wrapping_sub(off);
                        for b in 0..k {
                            let ju = (j + b).wrapping_sub(off);
                            if iu >= h || ju >= w {
                                continue; // out of frame: affinity stays zero
                            }
                            let q = iu * w + ju;
                            let mut acc = S::zero();
                            for ch in 0..c {
                                acc = acc + xt[ch * hw + p] * xu[ch * hw + q];
                            }
                            out[(p * k + a) * k + b] = acc * inv_c;
                        }
                    }
                }
            }
            (out, vec![h, w, k, k])
        }
    }
}

pub(crate) fn affinity_backward<S: Scalar>(
    grad: &[S],
    xt: &[S],
    xu: &[S],
    (c, h, w): (usize, usize, usize),
    window: Option<usize>,
    dxt: &mut [S],
    dxu: &mut [S],
) {
    let inv_c = S::from_f64(1.0 / c as f64);
    let hw = h * w;
    match window {
        None => {
            let xt_p = to_position_major(xt, c, hw);
            let xu_p = to_position_major(xu, c, hw);
            let mut dxt_p = vec![S::zero(); c * hw];
            let mut dxu_p = vec![S::zero(); c * hw];
            for p in 0..hw {
                let tp = &xt_p[p * c..(p + 1) * c];
                let dtp = &mut dxt_p[p * c..(p + 1) * c];
                for q in 0..hw {
                    let g = grad[p * hw + q] * inv_c;
                    if g == S::zero() {
                        continue;
                    }
                    let uq = &xu_p[q * c..(q + 1) * c];
                    let duq = &mut dxu_p[q * c..(q + 1) * c];
                    for ch in 0..c {
                        dtp[ch] = dtp[ch] + g * uq[ch];
                        duq[ch] = duq[ch] + g * tp[ch];
                    }
                }
            }
            from_position_major(&dxt_p, c, hw, dxt);
            from_position_major(&dxu_p, c, hw, dxu);
        }
        Some(k) => {
            let off = (k - 1) / 2;
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    for a in 0..k {
                        let iu = (i + a).wrapping_sub(off);
                        for b in 0..k {
                            let ju = (j + b).wrapping_sub(off);
                            if iu >= h || ju >= w {
                                continue;
                            }
                            let q = iu * w + ju;
                            let g = grad[(p * k + a) * k + b] * inv_c;
                            if g == S::zero() {
                                continue;
                            }
                            for ch in 0..c {
                                dxt[ch * hw + p] = dxt[ch * hw + p] + g * xu[ch * hw + q];
                                dxu[ch * hw + q] = dxu[ch * hw + q] + g * xt[ch * hw + p];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn aggregate_forward<S: Scalar>(
    a: &[S],
    xu: &[S],
    (c, h, w): (usize, usize, usize),
    window: Option<usize>,
) -> Vec<S> {
    let hw = h * w;
    let mut out = vec![S::zero(); c * hw];
    match window {
        None => {
            let xu_p = to_position_major(xu, c, hw);
            let mut out_p = vec![S::zero(); c * hw];
            for p in 0..hw {
                let op = &mut out_p[p * c..(p + 1) * c];
                for q in 0..hw {
                    let av = a[p * hw + q];
                    if av == S::zero() {
                        continue;
                    }
                    let uq = &xu_p[q * c..(q + 1) * c];
                    for ch in 0..c {
                        op[ch] = op[ch] + av * uq[ch];
                    }
                }
            }
            from_position_major(&out_p, c, hw, &mut out);
        }
        Some(k) => {
            let off = (k - 1) / 2;
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    for aa in 0..k {
                        let iu = (i + aa).wrapping_sub(off);
                        for b in 0..k {
                            let ju = (j + b).wrapping_sub(off);
                            if iu >= h || ju >= w {
                                continue;
                            }
                            let q = iu * w + ju;
                            let av = a[(p * k + aa) * k + b];
                            for ch in 0..c {
                                out[ch * hw + p] = out[ch * hw + p] + av * xu[ch * hw + q];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn aggregate_backward<S: Scalar>(
    grad: &[S],
    a: &[S],
    xu: &[S],
    (c, h, w): (usize, usize, usize),
    window: Option<usize>,
    da: &mut [S],
    dxu: &mut [S],
) {
    let hw = h * w;
    match window {
        None => {
            let xu_p = to_position_major(xu, c, hw);
            let g_p = to_position_major(grad, c, hw);
            let mut dxu_p = vec![S::zero(); c * hw];
            for p in 0..hw {
                let gp = &g_p[p * c..(p + 1) * c];
                for q in 0..hw {
                    let av = a[p * hw + q];
                    let uq = &xu_p[q * c..(q + 1) * c];
                    let duq = &mut dxu_p[q * c..(q + 1) * c];
                    let mut dot = S::zero();
                    for ch in 0..c {
                        dot = dot + gp[ch] * uq[ch];
                        duq[ch] = duq[ch] + av * gp[ch];
                    }
                    da[p * hw + q] = da[p * hw + q] + dot;
                }
            }
            from_position_major(&dxu_p, c, hw, dxu);
        }
        Some(k) => {
            let off = (k - 1) / 2;
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    for aa in 0..k {
                        let iu = (i + aa).wrapping_sub(off);
                        for b in 0..k {
                            let ju = (j + b).wrapping_sub(off);
                            if iu >= h || ju >= w {
                                continue;
                            }
                            let q = iu * w + ju;
                            let av = a[(p * k + aa) * k + b];
                            let mut dot = S::zero();
                            for ch in 0..c {
                                let g = grad[ch * hw + p];
                                dot = dot + g * xu[ch * hw + q];
                                dxu[ch * hw + q] = dxu[ch * hw + q] + av * g;
                            }
                            da[(p * k + aa) * k + b] = da[(p * k + aa) * k + b] + dot;
                        }
                    }
                }
            }
        }
    }
}

// ── Module-level graph builders ─────────────────────────────────────

/// Raw affinities between two frames (see [`Tape::affinity`]).
pub fn affinity<S: Scalar>(
    tape: &mut Tape<S>,
    xt: Var,
    xu: Var,
    cfg: &CorrelationConfig,
) -> Result<Var> {
    tape.affinity(xt, xu, cfg.neighborhood.window())
}

/// Squash raw affinities into `(-0.5, 0.5)`: `sigmoid(A) - 0.5`.
pub fn gate<S: Scalar>(tape: &mut Tape<S>, a: Var) -> Var {
    let s = tape.sigmoid(a);
    tape.sub_const(s, S::from_f64(0.5))
}

/// Affinity-weighted sum of adjacent-frame features, no normalization.
pub fn aggregate<S: Scalar>(
    tape: &mut Tape<S>,
    gated: Var,
    xu: Var,
    cfg: &CorrelationConfig,
) -> Result<Var> {
    tape.aggregate(gated, xu, cfg.neighborhood.window())
}

/// Gated affinity maps recorded for inspection during a traced forward pass.
#[derive(Clone, Debug)]
pub struct CorrelationTrace<S> {
    /// `(frame t, +1 or -1 direction, gated map tensor)`.
    pub gated: Vec<(usize, i8, Tensor<S>)>,
}

/// Per-frame bidirectional trajectory aggregation over `[T, C, H, W]`.
///
/// Frame `t` receives `beta_next * aggregate(gate(affinity(x_t, x_{t+1})), x_{t+1})
/// + beta_prev * aggregate(gate(affinity(x_t, x_{t-1})), x_{t-1})`; a missing
/// neighbor contributes zero, so a single-frame input yields all zeros.
pub fn bidirectional<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    params: &Parameters<S>,
    p: &CorrelationParams,
    cfg: &CorrelationConfig,
) -> Result<Var> {
    bidirectional_traced(tape, x, params, p, cfg, None)
}

pub fn bidirectional_traced<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    params: &Parameters<S>,
    p: &CorrelationParams,
    cfg: &CorrelationConfig,
    mut trace: Option<&mut CorrelationTrace<S>>,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "bidirectional expects [T, C, H, W], got {shape:?}"
        )));
    }
    let t_len = shape[0];
    if (shape[2], shape[3]) != (cfg.height, cfg.width) || t_len != cfg.frames {
        return Err(Error::shape(
            "bidirectional config extents",
            &[cfg.frames, shape[1], cfg.height, cfg.width],
            &shape,
        ));
    }
    let beta_next = tape.param(params, p.beta_next);
    let beta_prev = tape.param(params, p.beta_prev);
    let frames: Vec<Var> = (0..t_len)
        .map(|t| tape.slice_frame(x, t))
        .collect::<Result<_>>()?;

    let mut out_frames = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut directional = |u: usize, dir: i8, beta: Var, tape: &mut Tape<S>| -> Result<Var> {
            let raw = affinity(tape, frames[t], frames[u], cfg)?;
            let gated = gate(tape, raw);
            if let Some(tr) = trace.as_deref_mut() {
                tr.gated.push((t, dir, tape.value(gated).clone()));
            }
            let agg = aggregate(tape, gated, frames[u], cfg)?;
            tape.scale_by_var(agg, beta)
        };
        let next = if t + 1 < t_len {
            Some(directional(t + 1, 1, beta_next, tape)?)
        } else {
            None
        };
        let prev = if t > 0 {
            Some(directional(t - 1, -1, beta_prev, tape)?)
        } else {
            None
        };
        let frame = match (next, prev) {
            (Some(n), Some(pv)) => tape.add(n, pv)?,
            (Some(n), None) => n,
            (None, Some(pv)) => pv,
            (None, None) => tape.constant(Tensor::zeros(&[shape[1], cfg.height, cfg.width])),
        };
        out_frames.push(frame);
    }
    tape.stack_frames(&out_frames)
}
