//! Word error rate with edit-operation breakdowns.
//!
//! ```text
//! cargo run --example wer_report
//! ```

use corrnet::metrics::{corpus_wer, edit_ops, wer};

fn main() -> corrnet::Result<()> {
    let cases: Vec<(&str, Vec<usize>, Vec<usize>)> = vec![
        ("exact match", vec![1, 2, 3, 4], vec![1, 2, 3, 4]),
        ("one substitution", vec![1, 2, 3, 4], vec![1, 9, 3, 4]),
        ("all deleted", vec![1, 2, 3, 4], vec![]),
        ("hypothesis longer than reference", vec![1, 2], vec![7, 8, 9, 10, 11]),
    ];
    for (name, reference, hypothesis) in &cases {
        let b = edit_ops(reference, hypothesis)?;
        println!(
            "{name:<34} sub {} ins {} del {}  WER {:.3}",
            b.substitutions,
            b.insertions,
            b.deletions,
            wer(&b)
        );
    }

    let pairs: Vec<(Vec<usize>, Vec<usize>)> = cases
        .into_iter()
        .map(|(_, r, h)| (r, h))
        .collect();
    let corpus = corpus_wer(&pairs)?;
    println!();
    println!(
        "corpus over {} pairs: WER {:.3} (del {:.3} / ins {:.3} / sub {:.3})",
        corpus.n_samples, corpus.wer, corpus.del_rate, corpus.ins_rate, corpus.sub_rate
    );
    Ok(())
}
