//! CTC loss against its brute-force oracle, plus greedy and beam decoding.
//!
//! ```text
//! cargo run --example ctc_decoding
//! ```

use corrnet::ctc::{beam_decode, brute_force_ctc, ctc_loss, greedy_decode, CtcInstance};
use corrnet::tensor::Tensor;

fn main() -> corrnet::Result<()> {
    // Five steps over {blank, a, b}; ragged mass that favours "a b".
    let probs: Vec<Vec<f64>> = vec![
        vec![0.6, 0.3, 0.1],
        vec![0.2, 0.7, 0.1],
        vec![0.5, 0.3, 0.2],
        vec![0.3, 0.1, 0.6],
        vec![0.7, 0.1, 0.2],
    ];
    let log_probs = Tensor::new(
        vec![5, 3],
        probs.iter().flatten().map(|p| p.ln()).collect(),
    )?;

    let label = vec![1, 2];
    let instance = CtcInstance::new(log_probs.clone(), label.clone())?;
    let dp = ctc_loss(&instance)?;
    let brute = brute_force_ctc(&instance)?;
    println!("label {label:?}");
    println!("ctc loss (dynamic program): {dp:.10}");
    println!("ctc loss (path enumeration): {brute:.10}");
    println!("difference: {:.3e}", (dp - brute).abs());
    assert!((dp - brute).abs() < 1e-9);

    let greedy = greedy_decode(&log_probs);
    println!("greedy decode: {greedy:?}");
    for width in [1, 2, 8, 64] {
        let beam = beam_decode(&log_probs, width)?;
        println!("beam decode (width {width:>2}): {beam:?}");
    }
    Ok(())
}
