//! Verify every differentiable primitive and module forward against central
//! finite differences at real64.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use corrnet::gradcheck;

fn main() -> corrnet::Result<()> {
    let reports = gradcheck::run_suite(0)?;
    let mut worst = ("", 0.0f64);
    for r in &reports {
        println!(
            "{:<28} worst-rel-err {:>12.3e}  {}",
            r.name,
            r.worst_rel_err,
            if r.passed { "pass" } else { "FAIL" }
        );
        if r.worst_rel_err > worst.1 {
            worst = (Box::leak(r.name.clone().into_boxed_str()), r.worst_rel_err);
        }
    }
    let missing = gradcheck::missing_coverage(&reports);
    assert!(missing.is_empty(), "uncovered ops: {missing:?}");
    println!();
    println!(
        "{} checks, worst overall {:.3e} ({}), tolerance {:.0e}",
        reports.len(),
        worst.1,
        worst.0,
        gradcheck::TOLERANCE
    );
    Ok(())
}
