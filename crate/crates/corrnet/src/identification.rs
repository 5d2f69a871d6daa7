//! Attention maps that emphasize trajectory-bearing regions.
//!
//! Input features are projected down by a channel reduction factor, mixed by
//! a stack of grouped 3D convolutions whose dilation grows along space and
//! time, projected back up, and squashed into `(-0.5, 0.5)`. The resulting
//! map multiplies the aggregated trajectories before a zero-initialized
//! residual gate folds them into the backbone stream.

use crate::tensor::params::{param_rng, uniform_init};
use crate::tensor::{ParamId, Parameters, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Multi-scale branch stack configuration.
#[derive(Clone, Copy, Debug)]
pub struct IdentificationConfig {
    /// Channel reduction factor `r`; stage channels must be divisible by it.
    pub reduction: usize,
    /// Base kernel extents `(Kt, Ks, Ks)`.
    pub base_kernel: (usize, usize, usize),
    /// Number of spatial dilation rates (`1..=Ns`).
    pub spatial_scales: usize,
    /// Number of temporal dilation rates (`1..=Nt`).
    pub temporal_scales: usize,
    /// Depthwise branch convolutions (groups = reduced channels) when true,
    /// dense (groups = 1) otherwise.
    pub depthwise: bool,
    /// Zero-initialize the expand projection so maps start at exactly zero.
    /// Diagnostic setting: with the residual gate also at zero the block
    /// receives no gradient, so training configs leave this off.
    pub zero_init_expand: bool,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        IdentificationConfig {
            reduction: 16,
            base_kernel: (3, 3, 3),
            spatial_scales: 3,
            temporal_scales: 4,
            depthwise: true,
            zero_init_expand: false,
        }
    }
}

impl IdentificationConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.spatial_scales == 0 || self.temporal_scales == 0 {
            return Err(Error::Config(
                "identification scale counts must be >= 1".into(),
            ));
        }
        if self.reduction == 0 || channels % self.reduction != 0 {
            return Err(Error::Config(format!(
                "channel count {channels} not divisible by reduction factor {}",
                self.reduction
            )));
        }
        let (kt, ks1, ks2) = self.base_kernel;
        if kt % 2 == 0 || ks1 % 2 == 0 || ks2 % 2 == 0 {
            return Err(Error::Config(format!(
                "identification base kernel must be odd, got {:?}",
                self.base_kernel
            )));
        }
        Ok(())
    }

    pub fn branch_count(&self) -> usize {
        self.spatial_scales * self.temporal_scales
    }
}

/// Learnable state of one identification block.
#[derive(Clone, Debug)]
pub struct IdentificationParams {
    pub reduce_w: ParamId,
    pub reduce_b: ParamId,
    /// Branch kernels indexed `(i - 1) * Nt + (j - 1)` for spatial rate `i`,
    /// temporal rate `j`.
    pub branch_w: Vec<ParamId>,
    /// Branch mixing coefficients, one scalar per branch, packed as a vector.
    pub sigma: ParamId,
    pub expand_w: ParamId,
    pub expand_b: ParamId,
    channels: usize,
    cfg: IdentificationConfig,
}

impl IdentificationParams {
    pub fn register<S: Scalar>(
        params: &mut Parameters<S>,
        prefix: &str,
        channels: usize,
        cfg: &IdentificationConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate(channels)?;
        let reduced = channels / cfg.reduction;
        let (kt, ks, _) = cfg.base_kernel;
        let groups = if cfg.depthwise { reduced } else { 1 };
        let per_group = reduced / groups;

        let name = |suffix: &str| format!("{prefix}.{suffix}");
        let reduce_w = params.register(
            &name("reduce.weight"),
            uniform_init(&[reduced, channels], channels, &mut param_rng(seed, &name("reduce.weight"))),
            true,
        )?;
        let reduce_b = params.register(&name("reduce.bias"), Tensor::zeros(&[reduced]), true)?;

        let mut branch_w = Vec::with_capacity(cfg.branch_count());
        for i in 1..=cfg.spatial_scales {
            for j in 1..=cfg.temporal_scales {
                let wname = name(&format!("branch{i}_{j}.weight"));
                let fan_in = per_group * kt * ks * ks;
                branch_w.push(params.register(
                    &wname,
                    uniform_init(
                        &[reduced, per_group, kt, ks, ks],
                        fan_in,
                        &mut param_rng(seed, &wname),
                    ),
                    true,
                )?);
            }
        }

        // Uniform mixing keeps the initial output scale independent of the
        // branch count.
        let sigma_init = S::from_f64(1.0 / cfg.branch_count() as f64);
        let sigma = params.register(
            &name("sigma"),
            Tensor::filled(&[cfg.branch_count()], sigma_init),
            true,
        )?;

        let expand_w = if cfg.zero_init_expand {
            params.register(&name("expand.weight"), Tensor::zeros(&[channels, reduced]), true)?
        } else {
            params.register(
                &name("expand.weight"),
                uniform_init(&[channels, reduced], reduced, &mut param_rng(seed, &name("expand.weight"))),
                true,
            )?
        };
        let expand_b = params.register(&name("expand.bias"), Tensor::zeros(&[channels]), true)?;

        Ok(IdentificationParams {
            reduce_w,
            reduce_b,
            branch_w,
            sigma,
            expand_w,
            expand_b,
            channels,
            cfg: *cfg,
        })
    }

    pub fn config(&self) -> &IdentificationConfig {
        &self.cfg
    }
}

/// Channel reduction `[T, C, H, W] -> [T, C/r, H, W]` via pointwise projection.
pub fn reduce<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    params: &Parameters<S>,
    p: &IdentificationParams,
) -> Result<Var> {
    let w = tape.param(params, p.reduce_w);
    let b = tape.param(params, p.reduce_b);
    tape.conv1x1x1(x, w, Some(b))
}

/// Sum of dilated grouped convolution branches weighted by their learnable
/// coefficients. Branch `(i, j)` uses dilation `(j, i, i)` with the matching
/// shape-preserving padding.
pub fn multiscale_mix<S: Scalar>(
    tape: &mut Tape<S>,
    x_reduced: Var,
    params: &Parameters<S>,
    p: &IdentificationParams,
) -> Result<Var> {
    let cfg = &p.cfg;
    let reduced = tape.value(x_reduced).shape()[1];
    let groups = if cfg.depthwise { reduced } else { 1 };
    let (kt, ks, _) = cfg.base_kernel;
    let sigma = tape.param(params, p.sigma);
    let mut acc: Option<Var> = None;
    for i in 1..=cfg.spatial_scales {
        for j in 1..=cfg.temporal_scales {
            let idx = (i - 1) * cfg.temporal_scales + (j - 1);
            let w = tape.param(params, p.branch_w[idx]);
            let dilation = (j, i, i);
            let padding = (j * (kt - 1) / 2, i * (ks - 1) / 2, i * (ks - 1) / 2);
            let conv = tape.conv3d(x_reduced, w, groups, dilation, padding)?;
            let coeff = tape.slice_range(sigma, idx, 1)?;
            let scaled = tape.scale_by_var(conv, coeff)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, scaled)?,
                None => scaled,
            });
        }
    }
    Ok(acc.expect("at least one branch"))
}

/// Expand channels back and squash into `(-0.5, 0.5)`.
pub fn attention<S: Scalar>(
    tape: &mut Tape<S>,
    x_mixed: Var,
    params: &Parameters<S>,
    p: &IdentificationParams,
) -> Result<Var> {
    let w = tape.param(params, p.expand_w);
    let b = tape.param(params, p.expand_b);
    let pre = tape.conv1x1x1(x_mixed, w, Some(b))?;
    let sig = tape.sigmoid(pre);
    Ok(tape.sub_const(sig, S::from_f64(0.5)))
}

/// Full block: reduce, mix across scales, expand to attention maps.
pub fn attention_maps<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    params: &Parameters<S>,
    p: &IdentificationParams,
) -> Result<Var> {
    if tape.value(x).shape().len() != 4 || tape.value(x).shape()[1] != p.channels {
        return Err(Error::shape(
            "identification input channels",
            &[0, p.channels, 0, 0],
            tape.value(x).shape(),
        ));
    }
    let r = reduce(tape, x, params, p)?;
    let m = multiscale_mix(tape, r, params, p)?;
    attention(tape, m, params, p)
}

/// Residual fusion `x + alpha * (trajectory ⊙ attention)` with the gate
/// `alpha` initialized to zero so a fresh block is an exact no-op.
pub fn fuse<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    trajectory: Var,
    attention_map: Var,
    params: &Parameters<S>,
    alpha: ParamId,
) -> Result<Var> {
    let tm = tape.mul(trajectory, attention_map)?;
    let a = tape.param(params, alpha);
    tape.fuse_residual(x, tm, a)
}

pub fn register_alpha<S: Scalar>(params: &mut Parameters<S>, prefix: &str) -> Result<ParamId> {
    params.register(&format!("{prefix}.alpha"), Tensor::scalar(S::zero()), true)
}
