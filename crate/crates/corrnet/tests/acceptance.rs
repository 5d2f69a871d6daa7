//! Acceptance suite: one test per criterion, each printing a pass line with
//! the measured quantity next to its threshold.

use corrnet::config::ModelConfig;
use corrnet::correlation::{CorrelationConfig, CorrelationParams, Neighborhood};
use corrnet::ctc::{brute_force_ctc, ctc_loss, CtcInstance};
use corrnet::gradcheck;
use corrnet::identification::{IdentificationConfig, IdentificationParams};
use corrnet::metrics::{edit_ops, wer};
use corrnet::network::Model;
use corrnet::run;
use corrnet::tensor::{Parameters, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criterion 1: the published full-scale results are out of reach at desk
/// scale and the project says so up front; the property-based checks in this
/// suite are the substitute evidence.
#[test]
fn criterion_01_full_scale_results_declared_out_of_scope() {
    let readme = std::fs::read_to_string(
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md"),
    )
    .expect("workspace README present");
    let mentions_scale = readme.contains("not reproducible at desk scale");
    assert!(
        mentions_scale,
        "README must state that published benchmark WER requires the real \
         datasets and pretrained backbones"
    );
    println!(
        "PASS criterion 1: benchmark-scale results declared out of scope; \
         property-based substitutes follow"
    );
}

/// Criterion 2: with every residual gate at its zero initialization, the
/// inserted blocks are invisible — logits match the no-insertion model bit
/// for bit on 20 random inputs.
#[test]
fn criterion_02_identity_at_initialization() {
    let cfg_with = ModelConfig::default();
    let mut cfg_without = ModelConfig::default();
    cfg_without.model.insertion_stages = vec![];

    let mut params_with = Parameters::<f32>::new();
    let model_with = Model::build(&cfg_with, &mut params_with, 40).unwrap();
    let mut params_without = Parameters::<f32>::new();
    let model_without = Model::build(&cfg_without, &mut params_without, 40).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..20 {
        let t = rng.gen_range(4..=10);
        let data: Vec<f32> = (0..t * 3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let video = Tensor::new(vec![t, 3, 16, 16], data).unwrap();

        let mut tape_a = Tape::new();
        let (fin_a, aux_a) = model_with.forward(&mut tape_a, &params_with, &video).unwrap();
        let mut tape_b = Tape::new();
        let (fin_b, aux_b) = model_without
            .forward(&mut tape_b, &params_without, &video)
            .unwrap();

        for (a, b) in tape_a
            .value(fin_a)
            .data()
            .iter()
            .zip(tape_b.value(fin_b).data())
        {
            assert_eq!(a.to_bits(), b.to_bits(), "case {case}: final logits differ");
        }
        for (a, b) in tape_a
            .value(aux_a)
            .data()
            .iter()
            .zip(tape_b.value(aux_b).data())
        {
            assert_eq!(a.to_bits(), b.to_bits(), "case {case}: aux logits differ");
        }
    }
    println!("PASS criterion 2: zero-gate model bitwise equals no-insertion model on 20 inputs");
}

/// Criterion 3: every differentiable primitive and each module forward passes
/// central finite differences at real64, relative error < 1e-4, 10 seeds each.
#[test]
fn criterion_03_gradient_suite() {
    let reports = gradcheck::run_suite(0).unwrap();
    let missing = gradcheck::missing_coverage(&reports);
    assert!(missing.is_empty(), "uncovered differentiable ops: {missing:?}");
    for module in [
        "correlation_bidirectional",
        "identification_block",
        "recurrent_layer",
        "ctc_loss",
    ] {
        assert!(
            reports.iter().any(|r| r.name == module),
            "module forward {module} missing from the suite"
        );
    }
    let worst = reports
        .iter()
        .map(|r| r.worst_rel_err)
        .fold(0.0f64, f64::max);
    for r in &reports {
        assert!(
            r.passed,
            "{} failed: worst relative error {:.3e} >= {:.0e}",
            r.name,
            r.worst_rel_err,
            gradcheck::TOLERANCE
        );
    }
    println!(
        "PASS criterion 3: {} checks x {} seeds, worst relative error {:.3e} < 1e-4",
        reports.len(),
        gradcheck::SEEDS_PER_CHECK,
        worst
    );
}

/// Criterion 4: the dynamic program agrees with exhaustive path enumeration
/// within 1e-9 on 100 random admissible instances.
#[test]
fn criterion_04_ctc_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 100 {
        let t_len = rng.gen_range(1..=6);
        let v = rng.gen_range(1..=4usize);
        let n = rng.gen_range(1..=3usize.min(t_len));
        let label: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=v)).collect();
        let mut rows = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            let raw: Vec<f64> = (0..=v).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            rows.push(raw.into_iter().map(|x| (x / s).ln()).collect::<Vec<_>>());
        }
        let lp = Tensor::new(vec![t_len, v + 1], rows.concat()).unwrap();
        let Ok(inst) = CtcInstance::new(lp, label) else {
            continue;
        };
        let dp = ctc_loss(&inst).unwrap();
        let brute = brute_force_ctc(&inst).unwrap();
        worst = worst.max((dp - brute).abs());
        checked += 1;
    }
    assert!(worst < 1e-9, "worst |dp - brute| = {worst:.3e}");
    println!("PASS criterion 4: 100 instances, worst |ctc - brute force| {worst:.3e} < 1e-9");
}

/// Quadruple-loop evaluation of the whole correlation chain, written here
/// independently of the library kernels.
fn oracle_bidirectional(
    x: &[f64],
    (t_len, c, h, w): (usize, usize, usize, usize),
    beta_next: f64,
    beta_prev: f64,
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; t_len * c * hw];
    for t in 0..t_len {
        for (step, beta) in [(1isize, beta_next), (-1isize, beta_prev)] {
            let u = t as isize + step;
            if u < 0 || u >= t_len as isize {
                continue;
            }
            let u = u as usize;
            for i in 0..h {
                for j in 0..w {
                    for iu in 0..h {
                        for ju in 0..w {
                            let mut aff = 0.0;
                            for ch in 0..c {
                                aff += x[(t * c + ch) * hw + i * w + j]
                                    * x[(u * c + ch) * hw + iu * w + ju];
                            }
                            aff /= c as f64;
                            let gated = 1.0 / (1.0 + (-aff).exp()) - 0.5;
                            for ch in 0..c {
                                out[(t * c + ch) * hw + i * w + j] +=
                                    beta * gated * x[(u * c + ch) * hw + iu * w + ju];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Criterion 5: bidirectional trajectory aggregation matches the standalone
/// quadruple-loop oracle within 1e-10 on 20 random tiny inputs.
#[test]
fn criterion_05_correlation_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let t_len = rng.gen_range(1..=4);
        let c = rng.gen_range(1..=3);
        let hw_extent = rng.gen_range(2..=4);
        let data: Vec<f64> = (0..t_len * c * hw_extent * hw_extent)
            .map(|_| rng.gen_range(-1.5..1.5))
            .collect();
        let expected = oracle_bidirectional(&data, (t_len, c, hw_extent, hw_extent), 0.5, 0.5);

        let mut ps = Parameters::<f64>::new();
        let p = CorrelationParams::register(&mut ps, "corr").unwrap();
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::new(vec![t_len, c, hw_extent, hw_extent], data).unwrap());
        let cfg =
            CorrelationConfig::new(Neighborhood::Full, t_len, hw_extent, hw_extent).unwrap();
        let out = corrnet::correlation::bidirectional(&mut tape, x, &ps, &p, &cfg).unwrap();
        for (got, want) in tape.value(out).data().iter().zip(&expected) {
            worst = worst.max((got - want).abs());
        }
    }
    assert!(worst < 1e-10, "worst deviation {worst:.3e}");
    println!("PASS criterion 5: 20 tiny inputs, worst |impl - oracle| {worst:.3e} < 1e-10");
}

/// Criterion 6: gated affinities and attention maps stay strictly inside
/// (-0.5, 0.5) over 10,000 random draws, including saturating magnitudes.
#[test]
fn criterion_06_range_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(66);

    // 5,000 gated affinity values with magnitudes up to 1e6.
    let raw: Vec<f64> = (0..5000)
        .map(|_| {
            let exp = rng.gen_range(-3.0..6.0);
            let mag = 10f64.powf(exp);
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::new(vec![5000], raw).unwrap());
    let gated = corrnet::correlation::gate(&mut tape, a);
    let mut checked = 0usize;
    for &v in tape.value(gated).data() {
        assert!(v > -0.5 && v < 0.5, "gated affinity {v} escaped the open range");
        checked += 1;
    }

    // 5,120 attention values from random blocks, inputs scaled up to force
    // saturated pre-activations.
    let cfg = IdentificationConfig {
        reduction: 2,
        spatial_scales: 2,
        temporal_scales: 2,
        ..Default::default()
    };
    let mut produced = 0usize;
    let mut trial = 0u64;
    while produced < 5120 {
        let mut ps = Parameters::<f64>::new();
        let ident = IdentificationParams::register(&mut ps, "ident", 4, &cfg, trial).unwrap();
        let scale = 10f64.powf(rng.gen_range(-1.0..4.0));
        let data: Vec<f64> = (0..2 * 4 * 4 * 4).map(|_| rng.gen_range(-scale..scale)).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 4, 4, 4], data).unwrap());
        let maps = corrnet::identification::attention_maps(&mut tape, x, &ps, &ident).unwrap();
        for &v in tape.value(maps).data() {
            assert!(v > -0.5 && v < 0.5, "attention value {v} escaped the open range");
            produced += 1;
            checked += 1;
        }
        trial += 1;
    }
    assert!(checked >= 10_000);
    println!("PASS criterion 6: {checked} draws, all strictly inside (-0.5, 0.5)");
}

/// Criterion 7: the default branch stack's impulse response spans exactly
/// 9 temporal and 7x7 spatial positions.
#[test]
fn criterion_07_receptive_field_equivalence() {
    let cfg = IdentificationConfig {
        reduction: 1,
        ..Default::default()
    };
    assert_eq!((cfg.temporal_scales, cfg.spatial_scales), (4, 3));
    let mut ps = Parameters::<f64>::new();
    let ident = IdentificationParams::register(&mut ps, "ident", 1, &cfg, 7).unwrap();
    for &b in &ident.branch_w {
        *ps.value_mut(b) = Tensor::filled(&[1, 1, 3, 3, 3], 1.0);
    }
    let (t_len, hw) = (13, 15);
    let mut impulse = Tensor::zeros(&[t_len, 1, hw, hw]);
    impulse.data_mut()[((t_len / 2) * hw + hw / 2) * hw + hw / 2] = 1.0;
    let mut tape = Tape::new();
    let x = tape.constant(impulse);
    let mixed = corrnet::identification::multiscale_mix(&mut tape, x, &ps, &ident).unwrap();
    let out = tape.value(mixed).data();

    let mut t_set = std::collections::BTreeSet::new();
    let mut h_set = std::collections::BTreeSet::new();
    let mut w_set = std::collections::BTreeSet::new();
    for t in 0..t_len {
        for i in 0..hw {
            for j in 0..hw {
                if out[(t * hw + i) * hw + j] != 0.0 {
                    t_set.insert(t);
                    h_set.insert(i);
                    w_set.insert(j);
                }
            }
        }
    }
    assert_eq!(t_set.len(), 9, "temporal support {t_set:?}");
    assert_eq!(h_set.len(), 7, "vertical support {h_set:?}");
    assert_eq!(w_set.len(), 7, "horizontal support {w_set:?}");
    // Contiguous around the impulse.
    assert_eq!(*t_set.first().unwrap(), t_len / 2 - 4);
    assert_eq!(*h_set.first().unwrap(), hw / 2 - 3);
    println!("PASS criterion 7: impulse support is exactly 9 x 7 x 7");
}

/// Criterion 8: on the default synthetic task (600 train / 100 dev), the mean
/// dev WER over 3 seeds beats the no-insertion baseline by at least 0.02.
#[test]
fn criterion_08_mechanism_benefit() {
    let seeds = [101u64, 202, 303];
    let cfg_corr = ModelConfig::default();
    let mut cfg_base = ModelConfig::default();
    cfg_base.model.insertion_stages = vec![];
    assert_eq!(cfg_corr.train.train_sentences, 600);
    assert_eq!(cfg_corr.train.dev_sentences, 100);

    let run_one = |cfg: ModelConfig, seed: u64, tag: &str| -> f64 {
        let dir = tempfile::tempdir().unwrap();
        let summary = run::train(&cfg, dir.path(), seed, None, true).unwrap();
        println!("  {tag} seed {seed}: best dev WER {:.4}", summary.best_dev_wer);
        summary.best_dev_wer
    };

    // Two worker threads, one model variant each.
    let (corr_wers, base_wers) = std::thread::scope(|scope| {
        let corr = scope.spawn(|| {
            seeds
                .iter()
                .map(|&s| run_one(cfg_corr.clone(), s, "corrnet"))
                .collect::<Vec<_>>()
        });
        let base = scope.spawn(|| {
            seeds
                .iter()
                .map(|&s| run_one(cfg_base.clone(), s, "baseline"))
                .collect::<Vec<_>>()
        });
        (corr.join().unwrap(), base.join().unwrap())
    });

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let corr_mean = mean(&corr_wers);
    let base_mean = mean(&base_wers);
    println!(
        "  mean dev WER: corrnet {corr_mean:.4} vs baseline {base_mean:.4} \
         (gap {:.4})",
        base_mean - corr_mean
    );
    // Golden baseline for the default desk config.
    assert!(
        corr_mean < 0.15,
        "default desk training should reach dev WER below 0.15, got {corr_mean:.4}"
    );
    assert!(
        corr_mean < base_mean,
        "corrnet {corr_mean:.4} not better than baseline {base_mean:.4}"
    );
    assert!(
        base_mean - corr_mean >= 0.02,
        "gap {:.4} below 0.02",
        base_mean - corr_mean
    );
    println!(
        "PASS criterion 8: corrnet {corr_mean:.4} < baseline {base_mean:.4}, gap >= 0.02"
    );
}

/// Second, memoized-recursion edit distance used as the independent oracle.
fn oracle_distance(a: &[usize], b: &[usize]) -> usize {
    fn go(
        a: &[usize],
        b: &[usize],
        i: usize,
        j: usize,
        memo: &mut std::collections::HashMap<(usize, usize), usize>,
    ) -> usize {
        if i == 0 {
            return j;
        }
        if j == 0 {
            return i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let cost = usize::from(a[i - 1] != b[j - 1]);
        let v = (go(a, b, i - 1, j - 1, memo) + cost)
            .min(go(a, b, i, j - 1, memo) + 1)
            .min(go(a, b, i - 1, j, memo) + 1);
        memo.insert((i, j), v);
        v
    }
    go(a, b, a.len(), b.len(), &mut std::collections::HashMap::new())
}

/// Criterion 9: edit operations match an independent oracle on 50 random
/// pairs, and the hand-checked ratio cases come out exactly.
#[test]
fn criterion_09_wer_metric() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..50 {
        let n = rng.gen_range(1..10);
        let m = rng.gen_range(0..10);
        let reference: Vec<usize> = (0..n).map(|_| rng.gen_range(1..6)).collect();
        let hypothesis: Vec<usize> = (0..m).map(|_| rng.gen_range(1..6)).collect();
        let b = edit_ops(&reference, &hypothesis).unwrap();
        assert_eq!(
            b.total_edits(),
            oracle_distance(&reference, &hypothesis),
            "ref {reference:?} hyp {hypothesis:?}"
        );
    }

    let exact = edit_ops(&[1, 2, 3, 4], &[1, 2, 3, 4]).unwrap();
    assert_eq!(wer(&exact), 0.0);
    let one_sub = edit_ops(&[1, 2, 3, 4], &[1, 9, 3, 4]).unwrap();
    assert_eq!(wer(&one_sub), 0.25);
    let beyond_one = edit_ops(&[1, 2], &[7, 8, 9, 10, 11]).unwrap();
    assert_eq!(wer(&beyond_one), 2.5);
    println!("PASS criterion 9: 50 random pairs match the oracle; 0.0 / 0.25 / 2.5 exact");
}

/// Criterion 10: identical (config, seed) reproduces metric logs and both
/// checkpoints byte for byte across two complete desk training runs.
#[test]
fn criterion_10_run_determinism() {
    let cfg = ModelConfig::default();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let (r1, r2) = std::thread::scope(|scope| {
        let a = scope.spawn(|| run::train(&cfg, d1.path(), 7, None, true).unwrap());
        let b = scope.spawn(|| run::train(&cfg, d2.path(), 7, None, true).unwrap());
        (a.join().unwrap(), b.join().unwrap())
    });
    assert_eq!(r1.best_dev_wer, r2.best_dev_wer);

    for file in ["metrics.jsonl", "best.ckpt", "last.ckpt", "config.toml"] {
        let a = std::fs::read(d1.path().join(file)).unwrap();
        let b = std::fs::read(d2.path().join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
    println!("PASS criterion 10: metric logs and checkpoints byte-identical across two runs");
}
