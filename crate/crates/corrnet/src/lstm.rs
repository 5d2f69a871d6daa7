//! Stacked bidirectional LSTM built from tape primitives.

use crate::tensor::params::{param_rng, uniform_init};
use crate::tensor::{ParamId, Parameters, Scalar, Tape, Tensor, Var};
use crate::Result;

/// One direction of one layer. Gate blocks are packed `[i, f, g, o]` along
/// the first axis of the weight matrices.
#[derive(Clone, Debug)]
pub struct LstmDirection {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmDirection {
    fn register<S: Scalar>(
        params: &mut Parameters<S>,
        prefix: &str,
        input: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        let wi_name = format!("{prefix}.w_input");
        let wh_name = format!("{prefix}.w_hidden");
        let w_input = params.register(
            &wi_name,
            uniform_init(&[4 * hidden, input], input, &mut param_rng(seed, &wi_name)),
            true,
        )?;
        let w_hidden = params.register(
            &wh_name,
            uniform_init(&[4 * hidden, hidden], hidden, &mut param_rng(seed, &wh_name)),
            true,
        )?;
        // Forget gates open at 1 so early cell state survives long sequences.
        let mut bias_init = Tensor::zeros(&[4 * hidden]);
        bias_init.data_mut()[hidden..2 * hidden].fill(S::one());
        let bias = params.register(&format!("{prefix}.bias"), bias_init, true)?;
        Ok(LstmDirection {
            w_input,
            w_hidden,
            bias,
            hidden,
        })
    }
}

/// Two-layer bidirectional recurrent head; each layer concatenates a
/// forward-in-time and a backward-in-time pass.
#[derive(Clone, Debug)]
pub struct BiLstmParams {
    pub layers: Vec<(LstmDirection, LstmDirection)>,
}

impl BiLstmParams {
    pub fn register<S: Scalar>(
        params: &mut Parameters<S>,
        prefix: &str,
        input: usize,
        hidden: usize,
        num_layers: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(num_layers);
        let mut in_size = input;
        for l in 0..num_layers {
            let fwd = LstmDirection::register(
                params,
                &format!("{prefix}.layer{l}.fwd"),
                in_size,
                hidden,
                seed,
            )?;
            let bwd = LstmDirection::register(
                params,
                &format!("{prefix}.layer{l}.bwd"),
                in_size,
                hidden,
                seed,
            )?;
            layers.push((fwd, bwd));
            in_size = 2 * hidden;
        }
        Ok(BiLstmParams { layers })
    }

    pub fn output_size(&self) -> usize {
        2 * self.layers.last().map(|(f, _)| f.hidden).unwrap_or(0)
    }
}

fn lstm_step<S: Scalar>(
    tape: &mut Tape<S>,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
    params: &Parameters<S>,
    dir: &LstmDirection,
) -> Result<(Var, Var)> {
    let h = dir.hidden;
    let wi = tape.param(params, dir.w_input);
    let wh = tape.param(params, dir.w_hidden);
    let b = tape.param(params, dir.bias);
    let zi = tape.linear(x_t, wi, None)?;
    let zh = tape.linear(h_prev, wh, Some(b))?;
    let z = tape.add(zi, zh)?;
    let i_gate = tape.slice_range(z, 0, h)?;
    let f_gate = tape.slice_range(z, h, h)?;
    let g_gate = tape.slice_range(z, 2 * h, h)?;
    let o_gate = tape.slice_range(z, 3 * h, h)?;
    let i_act = tape.sigmoid(i_gate);
    let f_act = tape.sigmoid(f_gate);
    let g_act = tape.tanh(g_gate);
    let o_act = tape.sigmoid(o_gate);
    let fc = tape.mul(f_act, c_prev)?;
    let ig = tape.mul(i_act, g_act)?;
    let c = tape.add(fc, ig)?;
    let ct = tape.tanh(c);
    let h_new = tape.mul(o_act, ct)?;
    Ok((h_new, c))
}

/// Run one direction over per-step input vectors, returning hidden states in
/// original time order.
fn run_direction<S: Scalar>(
    tape: &mut Tape<S>,
    steps: &[Var],
    params: &Parameters<S>,
    dir: &LstmDirection,
    reverse: bool,
) -> Result<Vec<Var>> {
    let zeros = Tensor::zeros(&[dir.hidden]);
    let mut h = tape.constant(zeros.clone());
    let mut c = tape.constant(zeros);
    let mut states = vec![h; steps.len()];
    let order: Vec<usize> = if reverse {
        (0..steps.len()).rev().collect()
    } else {
        (0..steps.len()).collect()
    };
    for t in order {
        let (h_new, c_new) = lstm_step(tape, steps[t], h, c, params, dir)?;
        h = h_new;
        c = c_new;
        states[t] = h;
    }
    Ok(states)
}

/// Apply the stacked bidirectional recurrence to `[T, D]` features, yielding
/// `[T, 2 * hidden]` with forward states in the first half of each row.
pub fn bidirectional_recurrent<S: Scalar>(
    tape: &mut Tape<S>,
    features: Var,
    params: &Parameters<S>,
    p: &BiLstmParams,
) -> Result<Var> {
    let t_len = tape.value(features).shape()[0];
    let mut steps: Vec<Var> = (0..t_len)
        .map(|t| tape.slice_row(features, t))
        .collect::<Result<_>>()?;
    for (fwd, bwd) in &p.layers {
        let f_states = run_direction(tape, &steps, params, fwd, false)?;
        let b_states = run_direction(tape, &steps, params, bwd, true)?;
        steps = f_states
            .iter()
            .zip(&b_states)
            .map(|(&f, &b)| tape.concat(f, b))
            .collect::<Result<_>>()?;
    }
    tape.stack_rows(&steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_bilstm(
        params: &Parameters<f64>,
        p: &BiLstmParams,
        input: &Tensor<f64>,
    ) -> Tensor<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let out = bidirectional_recurrent(&mut tape, x, params, p).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn single_step_is_deterministic() {
        let mut ps = Parameters::<f64>::new();
        let p = BiLstmParams::register(&mut ps, "lstm", 3, 4, 2, 9).unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.5, -0.25, 1.0]).unwrap();
        let a = run_bilstm(&ps, &p, &x);
        let b = run_bilstm(&ps, &p, &x);
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[1, 8]);
    }

    #[test]
    fn reversal_symmetry_with_swapped_directions() {
        // Reversing time and swapping the direction parameters must reverse
        // the output rows and swap their halves (single-layer instance).
        let hidden = 3;
        let input = 2;
        let mut ps = Parameters::<f64>::new();
        let p = BiLstmParams::register(&mut ps, "lstm", input, hidden, 1, 21).unwrap();
        let (fwd, bwd) = p.layers[0].clone();
        let swapped = BiLstmParams {
            layers: vec![(bwd, fwd)],
        };

        let t_len = 5;
        let data: Vec<f64> = (0..t_len * input).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = Tensor::new(vec![t_len, input], data.clone()).unwrap();
        let mut rev = vec![0.0; t_len * input];
        for t in 0..t_len {
            rev[(t_len - 1 - t) * input..(t_len - t) * input]
                .copy_from_slice(&data[t * input..(t + 1) * input]);
        }
        let x_rev = Tensor::new(vec![t_len, input], rev).unwrap();

        let base = run_bilstm(&ps, &p, &x);
        let flipped = run_bilstm(&ps, &swapped, &x_rev);
        for t in 0..t_len {
            for k in 0..hidden {
                let b_f = base.data()[t * 2 * hidden + k];
                let b_b = base.data()[t * 2 * hidden + hidden + k];
                let f_f = flipped.data()[(t_len - 1 - t) * 2 * hidden + k];
                let f_b = flipped.data()[(t_len - 1 - t) * 2 * hidden + hidden + k];
                assert!((b_f - f_b).abs() < 1e-12);
                assert!((b_b - f_f).abs() < 1e-12);
            }
        }
    }
}
