//! Central finite-difference verification of every differentiable primitive
//! and of the composite module forwards.
//!
//! Each check registers random inputs as learnable parameters, builds a small
//! graph, and compares tape gradients against `(f(x+e) - f(x-e)) / 2e` at
//! real64. The suite runs several seeds per check and reports the worst
//! relative error seen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::correlation::{self, CorrelationConfig, CorrelationParams, Neighborhood};
use crate::identification::{self, IdentificationConfig, IdentificationParams};
use crate::lstm::{self, BiLstmParams};
use crate::tensor::tape::DIFFERENTIABLE_OPS;
use crate::tensor::{Parameters, Tape, Tensor, Var};
use crate::Result;

pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS_PER_CHECK: u64 = 10;
const STEP: f64 = 1e-5;

/// Forward builder produced by a check's prepare stage; must be pure in the
/// parameter values so it can be re-run for finite differences.
pub type BuildFn = Box<dyn Fn(&mut Tape<f64>, &Parameters<f64>) -> Result<Var>>;

/// One registered gradient check.
pub struct Check {
    pub name: &'static str,
    /// Tape op names this check exercises.
    pub covers: &'static [&'static str],
    prepare: Box<dyn Fn(&mut Parameters<f64>, &mut ChaCha8Rng) -> BuildFn>,
}

/// Outcome of one check across all its seeds.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: String,
    pub covers: Vec<String>,
    pub worst_rel_err: f64,
    pub seeds: u64,
    pub passed: bool,
}

/// Uniform values in `±[0.1, 1.0]`, keeping clear of the relu/max kinks at 0.
fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("random tensor shape")
}

fn register_inputs(
    params: &mut Parameters<f64>,
    shapes: &[Vec<usize>],
    rng: &mut ChaCha8Rng,
) -> Vec<crate::tensor::ParamId> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            params
                .register(&format!("in{i}"), random_tensor(s, rng), true)
                .expect("fresh store")
        })
        .collect()
}

/// Check over plain tensor inputs: `op` receives the bound input vars.
fn simple<F>(
    name: &'static str,
    covers: &'static [&'static str],
    shapes: Vec<Vec<usize>>,
    op: F,
) -> Check
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Clone + 'static,
{
    Check {
        name,
        covers,
        prepare: Box::new(move |params, rng| {
            let ids = register_inputs(params, &shapes, rng);
            let op = op.clone();
            Box::new(move |tape, params| {
                let vars: Vec<Var> = ids.iter().map(|&id| tape.param(params, id)).collect();
                op(tape, &vars)
            })
        }),
    }
}

fn eval(build: &BuildFn, params: &Parameters<f64>, probe: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let out = build(&mut tape, params)?;
    let w = tape.constant(probe.clone());
    let weighted = tape.mul(out, w)?;
    let loss = tape.sum_all(weighted);
    Ok(tape.value(loss).item())
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

pub(crate) fn run_check(
    check: &Check,
    seed: u64,
    corrupt: Option<&dyn Fn(&mut Vec<f64>)>,
) -> Result<OpReport> {
    let mut worst = 0.0f64;
    for s in 0..SEEDS_PER_CHECK {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ s.wrapping_mul(0x9e3779b97f4a7c15) ^ hash_name(check.name),
        );
        let mut params = Parameters::new();
        let build = (check.prepare)(&mut params, &mut rng);

        // Probe weights fix the scalarization: loss = sum(out ⊙ probe).
        let out_shape = {
            let mut tape = Tape::new();
            let out = build(&mut tape, &params)?;
            tape.value(out).shape().to_vec()
        };
        let probe = random_tensor(&out_shape, &mut rng);

        // Analytic gradients.
        params.zero_grad();
        {
            let mut tape = Tape::new();
            let out = build(&mut tape, &params)?;
            let w = tape.constant(probe.clone());
            let weighted = tape.mul(out, w)?;
            let loss = tape.sum_all(weighted);
            tape.backward(loss, &mut params)?;
        }
        let mut analytic: Vec<Vec<f64>> = params
            .ids()
            .map(|id| params.grad(id).data().to_vec())
            .collect();
        if let Some(c) = corrupt {
            for g in &mut analytic {
                c(g);
            }
        }

        for id in params.ids().collect::<Vec<_>>() {
            for j in 0..params.value(id).numel() {
                let orig = params.value(id).data()[j];
                params.value_mut(id).data_mut()[j] = orig + STEP;
                let up = eval(&build, &params, &probe)?;
                params.value_mut(id).data_mut()[j] = orig - STEP;
                let down = eval(&build, &params, &probe)?;
                params.value_mut(id).data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                worst = worst.max(rel_err(analytic[id.0][j], numeric));
            }
        }
    }
    Ok(OpReport {
        name: check.name.to_string(),
        covers: check.covers.iter().map(|s| s.to_string()).collect(),
        worst_rel_err: worst,
        seeds: SEEDS_PER_CHECK,
        passed: worst < TOLERANCE,
    })
}

fn hash_name(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// The registered check list covering every differentiable tape op plus the
/// composite module forwards.
pub fn checks() -> Vec<Check> {
    let mut list = vec![
        simple("add", &["add"], vec![vec![2, 3], vec![2, 3]], |t, v| {
            t.add(v[0], v[1])
        }),
        simple("sub", &["sub"], vec![vec![2, 3], vec![2, 3]], |t, v| {
            t.sub(v[0], v[1])
        }),
        simple("mul", &["mul"], vec![vec![2, 3], vec![2, 3]], |t, v| {
            t.mul(v[0], v[1])
        }),
        simple("scale", &["scale"], vec![vec![2, 3]], |t, v| {
            Ok(t.scale(v[0], 1.7))
        }),
        simple("sub_const", &["sub_const"], vec![vec![2, 3]], |t, v| {
            Ok(t.sub_const(v[0], 0.5))
        }),
        simple("sigmoid", &["sigmoid"], vec![vec![2, 3]], |t, v| {
            Ok(t.sigmoid(v[0]))
        }),
        simple("relu", &["relu"], vec![vec![2, 3]], |t, v| Ok(t.relu(v[0]))),
        simple("tanh", &["tanh"], vec![vec![2, 3]], |t, v| Ok(t.tanh(v[0]))),
        simple("exp", &["exp"], vec![vec![2, 3]], |t, v| Ok(t.exp(v[0]))),
        simple(
            "scale_by_var",
            &["scale_by_var"],
            vec![vec![2, 3], vec![1]],
            |t, v| t.scale_by_var(v[0], v[1]),
        ),
        simple("sum_all", &["sum_all"], vec![vec![7]], |t, v| {
            Ok(t.sum_all(v[0]))
        }),
        simple(
            "spatial_mean",
            &["spatial_mean"],
            vec![vec![2, 3, 2, 2]],
            |t, v| t.spatial_mean(v[0]),
        ),
        simple(
            "slice_frame",
            &["slice_frame"],
            vec![vec![3, 2, 2, 2]],
            |t, v| t.slice_frame(v[0], 1),
        ),
        simple(
            "stack_frames",
            &["stack_frames"],
            vec![vec![2, 2, 2], vec![2, 2, 2], vec![2, 2, 2]],
            |t, v| t.stack_frames(v),
        ),
        simple("slice_row", &["slice_row"], vec![vec![3, 4]], |t, v| {
            t.slice_row(v[0], 2)
        }),
        simple(
            "stack_rows",
            &["stack_rows"],
            vec![vec![4], vec![4]],
            |t, v| t.stack_rows(v),
        ),
        simple("slice_range", &["slice_range"], vec![vec![6]], |t, v| {
            t.slice_range(v[0], 1, 3)
        }),
        simple("concat", &["concat"], vec![vec![3], vec![4]], |t, v| {
            t.concat(v[0], v[1])
        }),
        simple(
            "linear",
            &["linear"],
            vec![vec![2, 3], vec![4, 3], vec![4]],
            |t, v| t.linear(v[0], v[1], Some(v[2])),
        ),
        simple(
            "conv2d_frames",
            &["conv2d_frames"],
            vec![vec![2, 2, 4, 4], vec![3, 2, 3, 3], vec![3]],
            |t, v| t.conv2d_frames(v[0], v[1], Some(v[2]), 2, 1),
        ),
        simple(
            "conv3d",
            &["conv3d"],
            vec![vec![3, 2, 3, 3], vec![2, 1, 3, 3, 3]],
            // Grouped (depthwise) and temporally dilated to cover the general path.
            |t, v| t.conv3d(v[0], v[1], 2, (2, 1, 1), (2, 1, 1)),
        ),
        simple(
            "conv1x1x1",
            &["conv1x1x1"],
            vec![vec![2, 3, 2, 2], vec![4, 3], vec![4]],
            |t, v| t.conv1x1x1(v[0], v[1], Some(v[2])),
        ),
        simple(
            "conv1d",
            &["conv1d"],
            vec![vec![6, 2], vec![3, 2, 5], vec![3]],
            |t, v| t.conv1d(v[0], v[1], Some(v[2]), 2),
        ),
        simple("max_pool1d", &["max_pool1d"], vec![vec![6, 3]], |t, v| {
            t.max_pool1d(v[0], 2)
        }),
        simple(
            "affinity",
            &["affinity"],
            vec![vec![2, 3, 3], vec![2, 3, 3]],
            |t, v| {
                // Exercise both the full and the windowed neighborhood.
                let full = t.affinity(v[0], v[1], None)?;
                let win = t.affinity(v[0], v[1], Some(3))?;
                let sf = t.sum_all(full);
                let sw = t.sum_all(win);
                t.add(sf, sw)
            },
        ),
        simple(
            "aggregate",
            &["aggregate"],
            vec![vec![3, 3, 3, 3], vec![2, 3, 3], vec![3, 3, 3, 3]],
            |t, v| {
                let full = t.aggregate(v[0], v[1], None)?;
                let win = t.aggregate(v[2], v[1], Some(3))?;
                t.add(full, win)
            },
        ),
        simple(
            "log_softmax_rows",
            &["log_softmax_rows"],
            vec![vec![3, 4]],
            |t, v| t.log_softmax_rows(v[0]),
        ),
        simple(
            "ctc_loss",
            &["ctc_loss", "log_softmax_rows"],
            vec![vec![5, 3]],
            |t, v| {
                let lp = t.log_softmax_rows(v[0])?;
                t.ctc_loss(lp, &[1, 2])
            },
        ),
        simple(
            "fuse_residual",
            &["fuse_residual"],
            vec![vec![2, 2, 2, 2], vec![2, 2, 2, 2], vec![1]],
            |t, v| t.fuse_residual(v[0], v[1], v[2]),
        ),
        // The residual gate sits exactly at zero after initialization; the
        // shortcut there must still produce the correct d(alpha).
        Check {
            name: "fuse_residual_zero_gate",
            covers: &["fuse_residual"],
            prepare: Box::new(|params, rng| {
                let x = params
                    .register("x", random_tensor(&[2, 2, 2, 2], rng), true)
                    .unwrap();
                let tm = params
                    .register("tm", random_tensor(&[2, 2, 2, 2], rng), true)
                    .unwrap();
                let alpha = params.register("alpha", Tensor::scalar(0.0), true).unwrap();
                Box::new(move |tape, params| {
                    let xv = tape.param(params, x);
                    let tv = tape.param(params, tm);
                    let av = tape.param(params, alpha);
                    tape.fuse_residual(xv, tv, av)
                })
            }),
        },
    ];

    list.push(Check {
        name: "correlation_bidirectional",
        covers: &[
            "affinity",
            "aggregate",
            "sigmoid",
            "sub_const",
            "scale_by_var",
            "slice_frame",
            "stack_frames",
            "add",
        ],
        prepare: Box::new(|params, rng| {
            let x = params
                .register("x", random_tensor(&[3, 2, 3, 3], rng), true)
                .unwrap();
            let corr = CorrelationParams::register(params, "corr").unwrap();
            Box::new(move |tape, params| {
                let xv = tape.param(params, x);
                let cfg = CorrelationConfig::new(Neighborhood::Full, 3, 3, 3)?;
                correlation::bidirectional(tape, xv, params, &corr, &cfg)
            })
        }),
    });

    list.push(Check {
        name: "identification_block",
        covers: &[
            "conv1x1x1",
            "conv3d",
            "scale_by_var",
            "slice_range",
            "sigmoid",
            "sub_const",
            "mul",
            "fuse_residual",
            "add",
        ],
        prepare: Box::new(|params, rng| {
            let x = params
                .register("x", random_tensor(&[3, 4, 3, 3], rng), true)
                .unwrap();
            let cfg = IdentificationConfig {
                reduction: 2,
                spatial_scales: 2,
                temporal_scales: 2,
                ..Default::default()
            };
            let ident =
                IdentificationParams::register(params, "ident", 4, &cfg, rng.gen()).unwrap();
            let alpha = params
                .register("fuse.alpha", Tensor::scalar(0.4), true)
                .unwrap();
            Box::new(move |tape, params| {
                let xv = tape.param(params, x);
                let maps = identification::attention_maps(tape, xv, params, &ident)?;
                // Use the input itself as the trajectory term so the fused
                // output depends on every parameter of the block.
                identification::fuse(tape, xv, xv, maps, params, alpha)
            })
        }),
    });

    list.push(Check {
        name: "recurrent_layer",
        covers: &[
            "linear",
            "concat",
            "slice_range",
            "slice_row",
            "stack_rows",
            "sigmoid",
            "tanh",
            "mul",
            "add",
        ],
        prepare: Box::new(|params, rng| {
            let x = params
                .register("x", random_tensor(&[3, 3], rng), true)
                .unwrap();
            let p = BiLstmParams::register(params, "lstm", 3, 3, 1, rng.gen()).unwrap();
            Box::new(move |tape, params| {
                let xv = tape.param(params, x);
                lstm::bidirectional_recurrent(tape, xv, params, &p)
            })
        }),
    });

    list
}

/// Run the full suite. `seed` fans out into per-check, per-repeat streams.
pub fn run_suite(seed: u64) -> Result<Vec<OpReport>> {
    checks()
        .iter()
        .map(|c| run_check(c, seed, None))
        .collect()
}

/// Tape op names exercised by at least one check.
pub fn covered_ops(reports: &[OpReport]) -> std::collections::BTreeSet<String> {
    reports
        .iter()
        .flat_map(|r| r.covers.iter().cloned())
        .collect()
}

/// Ops that the suite must cover; missing entries are a suite bug.
pub fn missing_coverage(reports: &[OpReport]) -> Vec<String> {
    let covered = covered_ops(reports);
    DIFFERENTIABLE_OPS
        .iter()
        .filter(|op| !covered.contains(**op))
        .map(|s| s.to_string())
        .collect()
}
