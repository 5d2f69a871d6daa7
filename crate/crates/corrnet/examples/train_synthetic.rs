//! Train a small model on the synthetic trajectory task and evaluate it.
//!
//! Uses a reduced configuration so the run finishes in roughly a minute:
//!
//! ```text
//! cargo run --example train_synthetic
//! ```

use corrnet::config;
use corrnet::run;

fn main() -> corrnet::Result<()> {
    let overrides = [
        ("train.train_sentences".to_string(), "150".to_string()),
        ("train.dev_sentences".to_string(), "40".to_string()),
        ("train.epochs".to_string(), "6".to_string()),
        ("data.max_glosses".to_string(), "3".to_string()),
    ];
    let cfg = config::from_toml_str("", &overrides)?;

    let out = std::env::temp_dir().join("corrnet_train_example");
    let summary = run::train(&cfg, &out, 0, None, false)?;
    println!();
    println!("best dev WER: {:.4}", summary.best_dev_wer);
    println!("run directory: {}", out.display());

    let test = run::evaluate(&cfg, &run::best_checkpoint_path(&out), "test", 0)?;
    println!(
        "test split: WER {:.4} (del {:.4} / ins {:.4} / sub {:.4}) over {} sentences",
        test.wer, test.del_rate, test.ins_rate, test.sub_rate, test.n_samples
    );
    Ok(())
}
