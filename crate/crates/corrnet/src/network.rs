//! End-to-end pipeline: staged 2D extractor with correlation blocks inserted
//! after configured stages, temporal convolution head, stacked bidirectional
//! recurrence, and CTC-trained classifiers with an auxiliary visual head.

use crate::config::ModelConfig;
use crate::correlation::{
    self, CorrelationConfig, CorrelationParams, CorrelationTrace, Neighborhood,
};
use crate::ctc::GlossSequence;
use crate::identification::{self, IdentificationConfig, IdentificationParams};
use crate::lstm::{self, BiLstmParams};
use crate::tensor::params::{he_uniform, param_rng, uniform_init};
use crate::tensor::{ParamId, Parameters, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Minimum video length so both temporal poolings leave at least one step.
pub const MIN_FRAMES: usize = 4;

#[derive(Clone, Debug)]
struct StageParams {
    conv_w: ParamId,
    conv_b: ParamId,
    stride: usize,
}

#[derive(Clone, Debug)]
struct InsertionParams {
    corr: CorrelationParams,
    ident: IdentificationParams,
    alpha: ParamId,
}

/// Parameter handles and static structure of one model instance.
#[derive(Clone, Debug)]
pub struct Model {
    stages: Vec<StageParams>,
    inserted: Vec<Option<InsertionParams>>,
    neighborhood: Neighborhood,
    temporal_w1: ParamId,
    temporal_b1: ParamId,
    temporal_w2: ParamId,
    temporal_b2: ParamId,
    lstm: BiLstmParams,
    classifier_w: ParamId,
    classifier_b: ParamId,
    aux_w: ParamId,
    aux_b: ParamId,
    pub num_classes: usize,
}

/// Gated correlation maps and attention maps captured during a traced pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace<S> {
    /// `(1-based stage, correlation trace)` per inserted block.
    pub correlation: Vec<(usize, CorrelationTrace<S>)>,
    /// `(1-based stage, attention maps [T, C, H, W])` per inserted block.
    pub attention: Vec<(usize, Tensor<S>)>,
}

impl Model {
    /// Register every parameter of the configured architecture. Initial
    /// values depend only on `(seed, parameter name)`, so models sharing a
    /// component initialize it identically regardless of what else differs.
    pub fn build<S: Scalar>(
        cfg: &ModelConfig,
        params: &mut Parameters<S>,
        seed: u64,
    ) -> Result<Model> {
        cfg.validate()?;
        let m = &cfg.model;
        let ident_cfg: IdentificationConfig = m.identification.as_config();
        let num_classes = cfg.num_classes();

        let mut stages = Vec::new();
        let mut inserted = Vec::new();
        let mut in_ch = 3;
        for (i, (&width, &stride)) in m.stage_widths.iter().zip(&m.stage_strides).enumerate() {
            let stage_no = i + 1;
            let wname = format!("backbone.stage{stage_no}.conv.weight");
            let conv_w = params.register(
                &wname,
                he_uniform(&[width, in_ch, 3, 3], in_ch * 9, &mut param_rng(seed, &wname)),
                true,
            )?;
            let conv_b = params.register(
                &format!("backbone.stage{stage_no}.conv.bias"),
                Tensor::zeros(&[width]),
                true,
            )?;
            stages.push(StageParams { conv_w, conv_b, stride });

            if m.insertion_stages.contains(&stage_no) {
                let corr =
                    CorrelationParams::register(params, &format!("corr.stage{stage_no}"))?;
                let ident = IdentificationParams::register(
                    params,
                    &format!("ident.stage{stage_no}"),
                    width,
                    &ident_cfg,
                    seed,
                )?;
                let alpha =
                    identification::register_alpha(params, &format!("fuse.stage{stage_no}"))?;
                inserted.push(Some(InsertionParams { corr, ident, alpha }));
            } else {
                inserted.push(None);
            }
            in_ch = width;
        }

        let d = *m.stage_widths.last().unwrap();
        let tc = m.temporal_channels;
        let t1 = "temporal.conv1.weight";
        let temporal_w1 = params.register(
            t1,
            he_uniform(&[tc, d, 5], d * 5, &mut param_rng(seed, t1)),
            true,
        )?;
        let temporal_b1 = params.register("temporal.conv1.bias", Tensor::zeros(&[tc]), true)?;
        let t2 = "temporal.conv2.weight";
        let temporal_w2 = params.register(
            t2,
            he_uniform(&[tc, tc, 5], tc * 5, &mut param_rng(seed, t2)),
            true,
        )?;
        let temporal_b2 = params.register("temporal.conv2.bias", Tensor::zeros(&[tc]), true)?;

        let lstm = BiLstmParams::register(
            params,
            "lstm",
            tc,
            m.hidden_size,
            m.recurrent_layers,
            seed,
        )?;

        let cw = "classifier.weight";
        let classifier_w = params.register(
            cw,
            uniform_init(
                &[num_classes, lstm.output_size()],
                lstm.output_size(),
                &mut param_rng(seed, cw),
            ),
            true,
        )?;
        let classifier_b =
            params.register("classifier.bias", Tensor::zeros(&[num_classes]), true)?;
        let aw = "aux_classifier.weight";
        let aux_w = params.register(
            aw,
            uniform_init(&[num_classes, tc], tc, &mut param_rng(seed, aw)),
            true,
        )?;
        let aux_b = params.register("aux_classifier.bias", Tensor::zeros(&[num_classes]), true)?;

        Ok(Model {
            stages,
            inserted,
            neighborhood: m.correlation.neighborhood.as_neighborhood(),
            temporal_w1,
            temporal_b1,
            temporal_w2,
            temporal_b2,
            lstm,
            classifier_w,
            classifier_b,
            aux_w,
            aux_b,
            num_classes,
        })
    }

    /// Full forward pass returning `(final logits, auxiliary logits)`, both
    /// `[T'', num_classes]` with `T'' = floor(floor(T/2)/2)`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &Parameters<S>,
        video: &Tensor<S>,
    ) -> Result<(Var, Var)> {
        self.forward_inner(tape, params, video, None)
    }

    /// Forward pass that also captures correlation and attention maps.
    pub fn forward_traced<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &Parameters<S>,
        video: &Tensor<S>,
        trace: &mut ForwardTrace<S>,
    ) -> Result<(Var, Var)> {
        self.forward_inner(tape, params, video, Some(trace))
    }

    fn forward_inner<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &Parameters<S>,
        video: &Tensor<S>,
        mut trace: Option<&mut ForwardTrace<S>>,
    ) -> Result<(Var, Var)> {
        let shape = video.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape("forward video", &[0, 3, 0, 0], shape));
        }
        let t_len = shape[0];
        if t_len < MIN_FRAMES {
            return Err(Error::InvalidArgument(format!(
                "video has {t_len} frames; at least {MIN_FRAMES} are required"
            )));
        }

        let mut x = tape.constant(video.clone());
        for (i, stage) in self.stages.iter().enumerate() {
            let w = tape.param(params, stage.conv_w);
            let b = tape.param(params, stage.conv_b);
            let conv = tape.conv2d_frames(x, w, Some(b), stage.stride, 1)?;
            x = tape.relu(conv);

            if let Some(ins) = &self.inserted[i] {
                let xs = tape.value(x).shape().to_vec();
                let corr_cfg =
                    CorrelationConfig::new(self.neighborhood, xs[0], xs[2], xs[3])?;
                let mut corr_trace = trace
                    .as_deref_mut()
                    .map(|_| CorrelationTrace { gated: Vec::new() });
                let trajectory = correlation::bidirectional_traced(
                    tape,
                    x,
                    params,
                    &ins.corr,
                    &corr_cfg,
                    corr_trace.as_mut(),
                )?;
                let maps = identification::attention_maps(tape, x, params, &ins.ident)?;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.correlation.push((i + 1, corr_trace.unwrap()));
                    tr.attention.push((i + 1, tape.value(maps).clone()));
                }
                x = identification::fuse(tape, x, trajectory, maps, params, ins.alpha)?;
            }
        }

        let feats = tape.spatial_mean(x)?;
        let w1 = tape.param(params, self.temporal_w1);
        let b1 = tape.param(params, self.temporal_b1);
        let c1 = tape.conv1d(feats, w1, Some(b1), 2)?;
        let r1 = tape.relu(c1);
        let p1 = tape.max_pool1d(r1, 2)?;
        let w2 = tape.param(params, self.temporal_w2);
        let b2 = tape.param(params, self.temporal_b2);
        let c2 = tape.conv1d(p1, w2, Some(b2), 2)?;
        let r2 = tape.relu(c2);
        let pooled = tape.max_pool1d(r2, 2)?;

        let aux_w = tape.param(params, self.aux_w);
        let aux_b = tape.param(params, self.aux_b);
        let aux_logits = tape.linear(pooled, aux_w, Some(aux_b))?;

        let recurrent = lstm::bidirectional_recurrent(tape, pooled, params, &self.lstm)?;
        let cls_w = tape.param(params, self.classifier_w);
        let cls_b = tape.param(params, self.classifier_b);
        let final_logits = tape.linear(recurrent, cls_w, Some(cls_b))?;

        Ok((final_logits, aux_logits))
    }
}

/// Loss weights `(final CTC, auxiliary CTC, prediction divergence)`.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub ctc: f64,
    pub ve: f64,
    pub va: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        LossWeights {
            ctc: cfg.loss.ctc,
            ve: cfg.loss.ve,
            va: cfg.loss.va,
        }
    }
}

/// Combined objective: weighted CTC on both heads plus the mean per-step
/// KL divergence `KL(softmax(final) || softmax(aux))`. Terms with zero
/// weight are skipped entirely.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    final_logits: Var,
    aux_logits: Var,
    label: &GlossSequence,
    weights: &LossWeights,
) -> Result<Var> {
    let t_len = tape.value(final_logits).shape()[0];
    let lp_final = tape.log_softmax_rows(final_logits)?;
    let lp_aux = tape.log_softmax_rows(aux_logits)?;

    let mut terms: Vec<Var> = Vec::new();
    if weights.ctc != 0.0 {
        let ctc = tape.ctc_loss(lp_final, label)?;
        terms.push(tape.scale(ctc, S::from_f64(weights.ctc)));
    }
    if weights.ve != 0.0 {
        let ve = tape.ctc_loss(lp_aux, label)?;
        terms.push(tape.scale(ve, S::from_f64(weights.ve)));
    }
    if weights.va != 0.0 {
        let p_final = tape.exp(lp_final);
        let diff = tape.sub(lp_final, lp_aux)?;
        let contrib = tape.mul(p_final, diff)?;
        let total = tape.sum_all(contrib);
        let va = tape.scale(total, S::from_f64(weights.va / t_len as f64));
        terms.push(va);
    }
    let mut loss = match terms.first() {
        Some(&t) => t,
        None => tape.constant(Tensor::scalar(S::zero())),
    };
    for &t in &terms[1..] {
        loss = tape.add(loss, t)?;
    }
    Ok(loss)
}

/// Timestep count after the two stride-2 poolings.
pub fn pooled_len(t: usize) -> usize {
    t / 2 / 2
}
