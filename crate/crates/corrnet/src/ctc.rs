//! Connectionist temporal classification: log-space forward dynamic program,
//! its adjoint for gradients, decoding, and a brute-force enumeration oracle.
//!
//! Labels are gloss ids in `1..=V`; the blank symbol is index 0 of the
//! per-step distribution.

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Symbol index reserved for the CTC blank.
pub const BLANK: usize = 0;

/// Ordered gloss identifiers (1-based; 0 is the blank and never appears).
pub type GlossSequence = Vec<usize>;

/// A validated CTC problem: per-step log-probabilities `[T, V+1]` with blank
/// at index 0, plus the target label sequence.
#[derive(Clone, Debug)]
pub struct CtcInstance<S> {
    pub log_probs: Tensor<S>,
    pub label: GlossSequence,
}

impl<S: Scalar> CtcInstance<S> {
    pub fn new(log_probs: Tensor<S>, label: GlossSequence) -> Result<Self> {
        let shape = log_probs.shape();
        if shape.len() != 2 {
            return Err(Error::Ctc(format!(
                "log-probabilities must be [T, V+1], got {shape:?}"
            )));
        }
        let (t_len, v1) = (shape[0], shape[1]);
        for t in 0..t_len {
            let row = &log_probs.data()[t * v1..(t + 1) * v1];
            let sum: f64 = row.iter().map(|&l| l.as_f64().exp()).sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Ctc(format!(
                    "step {t} probabilities sum to {sum}, expected 1 within 1e-6"
                )));
            }
        }
        validate_label(&label, v1)?;
        admissible(t_len, &label)?;
        Ok(CtcInstance { log_probs, label })
    }
}

fn validate_label(label: &[usize], v1: usize) -> Result<()> {
    for &s in label {
        if s == BLANK || s >= v1 {
            return Err(Error::Ctc(format!(
                "label symbol {s} outside vocabulary 1..{}",
                v1 - 1
            )));
        }
    }
    Ok(())
}

/// A label of length N with R adjacent repeats needs at least N + R steps.
fn admissible(t_len: usize, label: &[usize]) -> Result<()> {
    let repeats = label.windows(2).filter(|w| w[0] == w[1]).count();
    let need = label.len() + repeats;
    if t_len < need {
        return Err(Error::Ctc(format!(
            "label of length {} with {} repeats needs {} steps, have {}",
            label.len(),
            repeats,
            need,
            t_len
        )));
    }
    Ok(())
}

#[inline]
fn lse3<S: Scalar>(a: S, b: S, c: S) -> S {
    let m = a.max(b).max(c);
    if m == S::neg_infinity() {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp() + (c - m).exp()).ln()
}

#[inline]
fn ext_symbol(label: &[usize], s: usize) -> usize {
    if s % 2 == 0 {
        BLANK
    } else {
        label[s / 2]
    }
}

/// Forward pass of the blank-augmented alignment lattice. Returns the
/// negative log-likelihood and the full alpha table `[T x (2N+1)]` needed to
/// replay the adjoint.
pub(crate) fn forward_alphas<S: Scalar>(
    logp: &[S],
    (t_len, v1): (usize, usize),
    label: &[usize],
) -> Result<(S, Vec<S>)> {
    validate_label(label, v1)?;
    admissible(t_len, label)?;
    let s_len = 2 * label.len() + 1;
    let ninf = S::neg_infinity();
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = logp[BLANK];
    if s_len > 1 {
        alpha[1] = logp[ext_symbol(label, 1)];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let stay = alpha[(t - 1) * s_len + s];
            let step = if s >= 1 { alpha[(t - 1) * s_len + s - 1] } else { ninf };
            let sym = ext_symbol(label, s);
            let skip = if s >= 2 && sym != BLANK && sym != ext_symbol(label, s - 2) {
                alpha[(t - 1) * s_len + s - 2]
            } else {
                ninf
            };
            let tot = lse3(stay, step, skip);
            alpha[t * s_len + s] = if tot == ninf { ninf } else { tot + logp[t * v1 + sym] };
        }
    }
    let last = alpha[(t_len - 1) * s_len + s_len - 1];
    let prev = if s_len > 1 {
        alpha[(t_len - 1) * s_len + s_len - 2]
    } else {
        ninf
    };
    let total = lse3(last, prev, ninf);
    if total == ninf {
        return Err(Error::Ctc("label has zero probability mass".into()));
    }
    Ok((-total, alpha))
}

/// Adjoint of the forward dynamic program: distributes the loss gradient back
/// through every log-sum-exp of the recurrence, producing d(loss)/d(logp).
pub(crate) fn backward_from_alphas<S: Scalar>(
    grad: S,
    logp: &[S],
    (t_len, v1): (usize, usize),
    label: &[usize],
    alpha: &[S],
) -> Vec<S> {
    let s_len = 2 * label.len() + 1;
    let ninf = S::neg_infinity();
    let mut dlogp = vec![S::zero(); t_len * v1];
    let mut dalpha = vec![S::zero(); t_len * s_len];

    // loss = -lse(alpha[T-1][S-1], alpha[T-1][S-2]).
    let last = alpha[(t_len - 1) * s_len + s_len - 1];
    let prev = if s_len > 1 { alpha[(t_len - 1) * s_len + s_len - 2] } else { ninf };
    let total = lse3(last, prev, ninf);
    if last > ninf {
        dalpha[(t_len - 1) * s_len + s_len - 1] = -grad * (last - total).exp();
    }
    if s_len > 1 && prev > ninf {
        dalpha[(t_len - 1) * s_len + s_len - 2] = -grad * (prev - total).exp();
    }

    for t in (1..t_len).rev() {
        for s in 0..s_len {
            let d = dalpha[t * s_len + s];
            if d == S::zero() {
                continue;
            }
            let sym = ext_symbol(label, s);
            dlogp[t * v1 + sym] = dlogp[t * v1 + sym] + d;
            // alpha[t][s] = lse(stay, step, skip) + logp[t][sym]; the lse value
            // is recoverable as alpha[t][s] - logp[t][sym].
            let lse = alpha[t * s_len + s] - logp[t * v1 + sym];
            let stay = alpha[(t - 1) * s_len + s];
            if stay > ninf {
                dalpha[(t - 1) * s_len + s] =
                    dalpha[(t - 1) * s_len + s] + d * (stay - lse).exp();
            }
            if s >= 1 {
                let step = alpha[(t - 1) * s_len + s - 1];
                if step > ninf {
                    dalpha[(t - 1) * s_len + s - 1] =
                        dalpha[(t - 1) * s_len + s - 1] + d * (step - lse).exp();
                }
            }
            if s >= 2 && sym != BLANK && sym != ext_symbol(label, s - 2) {
                let skip = alpha[(t - 1) * s_len + s - 2];
                if skip > ninf {
                    dalpha[(t - 1) * s_len + s - 2] =
                        dalpha[(t - 1) * s_len + s - 2] + d * (skip - lse).exp();
                }
            }
        }
    }
    dlogp[BLANK] = dlogp[BLANK] + dalpha[0];
    if s_len > 1 {
        let sym = ext_symbol(label, 1);
        dlogp[sym] = dlogp[sym] + dalpha[1];
    }
    dlogp
}

/// CTC negative log-likelihood of a validated instance.
pub fn ctc_loss<S: Scalar>(instance: &CtcInstance<S>) -> Result<S> {
    let shape = instance.log_probs.shape();
    let (loss, _) = forward_alphas(
        instance.log_probs.data(),
        (shape[0], shape[1]),
        &instance.label,
    )?;
    Ok(loss)
}

/// Exhaustive path enumeration over all `(V+1)^T` symbol paths, summing the
/// probability of those that collapse to the label. Guarded to tiny sizes;
/// this is the oracle the dynamic program is checked against.
pub fn brute_force_ctc<S: Scalar>(instance: &CtcInstance<S>) -> Result<f64> {
    let shape = instance.log_probs.shape();
    let (t_len, v1) = (shape[0], shape[1]);
    if t_len > 8 || v1 > 5 {
        return Err(Error::Ctc(format!(
            "brute force limited to T <= 8 and V <= 4, got T={t_len}, V={}",
            v1 - 1
        )));
    }
    let logp = instance.log_probs.data();
    let mut total = 0.0f64;
    let paths = (v1 as u64).pow(t_len as u32);
    let mut path = vec![0usize; t_len];
    for code in 0..paths {
        let mut rem = code;
        for slot in path.iter_mut() {
            *slot = (rem % v1 as u64) as usize;
            rem /= v1 as u64;
        }
        if collapse(&path) != instance.label {
            continue;
        }
        let lp: f64 = path
            .iter()
            .enumerate()
            .map(|(t, &s)| logp[t * v1 + s].as_f64())
            .sum();
        total += lp.exp();
    }
    if total <= 0.0 {
        return Err(Error::Ctc(
            "no path collapses to the label (probability zero)".into(),
        ));
    }
    Ok(-total.ln())
}

/// Remove blanks and merge consecutive repeats.
fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut last = BLANK;
    for &s in path {
        if s != BLANK && s != last {
            out.push(s);
        }
        last = s;
    }
    out
}

/// Best-path decoding: per-step argmax (ties to the lowest index), collapse
/// repeats, drop blanks.
pub fn greedy_decode<S: Scalar>(log_probs: &Tensor<S>) -> GlossSequence {
    let shape = log_probs.shape();
    let (t_len, v1) = (shape[0], shape[1]);
    let data = log_probs.data();
    let mut path = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let row = &data[t * v1..(t + 1) * v1];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        path.push(best);
    }
    collapse(&path)
}

/// Prefix beam search over collapsed sequences. Tracks per-prefix blank and
/// non-blank path mass; with a width covering every reachable prefix this
/// finds the collapsed sequence of maximal total probability.
pub fn beam_decode<S: Scalar>(log_probs: &Tensor<S>, width: usize) -> Result<GlossSequence> {
    if width == 0 {
        return Err(Error::InvalidArgument("beam width must be >= 1".into()));
    }
    let shape = log_probs.shape();
    let (t_len, v1) = (shape[0], shape[1]);
    let data = log_probs.data();

    let ninf = f64::NEG_INFINITY;
    // (prefix, log P ending in blank, log P ending in non-blank)
    let mut beams: Vec<(Vec<usize>, f64, f64)> = vec![(Vec::new(), 0.0, ninf)];
    let mut scratch: std::collections::HashMap<Vec<usize>, (f64, f64)> =
        std::collections::HashMap::new();

    let logsumexp = |a: f64, b: f64| -> f64 {
        if a == ninf {
            return b;
        }
        if b == ninf {
            return a;
        }
        let m = a.max(b);
        m + ((a - m).exp() + (b - m).exp()).ln()
    };

    for t in 0..t_len {
        scratch.clear();
        let row = &data[t * v1..(t + 1) * v1];
        for (prefix, pb, pnb) in beams.drain(..) {
            let total = logsumexp(pb, pnb);
            // Emit blank: prefix unchanged, mass moves to the blank bucket.
            let lb = row[BLANK].as_f64();
            {
                let e = scratch.entry(prefix.clone()).or_insert((ninf, ninf));
                e.0 = logsumexp(e.0, total + lb);
            }
            for sym in 1..v1 {
                let ls = row[sym].as_f64();
                if prefix.last() == Some(&sym) {
                    // Repeat of the trailing symbol extends non-blank paths in
                    // place; extending after a blank grows the prefix.
                    let e = scratch.entry(prefix.clone()).or_insert((ninf, ninf));
                    e.1 = logsumexp(e.1, pnb + ls);
                    let mut grown = prefix.clone();
                    grown.push(sym);
                    let e = scratch.entry(grown).or_insert((ninf, ninf));
                    e.1 = logsumexp(e.1, pb + ls);
                } else {
                    let mut grown = prefix.clone();
                    grown.push(sym);
                    let e = scratch.entry(grown).or_insert((ninf, ninf));
                    e.1 = logsumexp(e.1, total + ls);
                }
            }
        }
        let mut next: Vec<(Vec<usize>, f64, f64)> = scratch
            .drain()
            .map(|(k, (pb, pnb))| (k, pb, pnb))
            .collect();
        // Deterministic order: score descending, then prefix ascending.
        next.sort_by(|a, b| {
            let sa = logsumexp(a.1, a.2);
            let sb = logsumexp(b.1, b.2);
            sb.partial_cmp(&sa).unwrap().then_with(|| a.0.cmp(&b.0))
        });
        next.truncate(width);
        beams = next;
    }
    Ok(beams
        .into_iter()
        .next()
        .map(|(prefix, _, _)| prefix)
        .unwrap_or_default())
}
