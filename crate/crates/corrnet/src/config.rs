//! Run configuration: a strict `key = value` file with nested sections.
//!
//! Unknown keys are rejected by name. Any key can be overridden on the
//! command line with `--set section.key=value`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::correlation::Neighborhood;
use crate::identification::IdentificationConfig;
use crate::synth::SyntheticConfig;
use crate::tensor::Dtype;
use crate::{Error, Result};

/// Element width for the run. Training defaults to `f32`; gradient checking
/// forces `f64`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DtypeChoice {
    F32,
    F64,
}

impl DtypeChoice {
    pub fn as_dtype(self) -> Dtype {
        match self {
            DtypeChoice::F32 => Dtype::F32,
            DtypeChoice::F64 => Dtype::F64,
        }
    }
}

/// Correlation neighborhood: the string `"full"` or an odd window extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NeighborhoodChoice {
    Window(usize),
    Keyword(FullKeyword),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FullKeyword {
    Full,
}

impl NeighborhoodChoice {
    pub fn as_neighborhood(self) -> Neighborhood {
        match self {
            NeighborhoodChoice::Window(k) => Neighborhood::Window(k),
            NeighborhoodChoice::Keyword(_) => Neighborhood::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `"f32"` or `"f64"`.
    pub dtype: DtypeChoice,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub data: DataSection,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dtype: DtypeChoice::F32,
            model: ModelSection::default(),
            loss: LossSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Output channels of each backbone stage.
    pub stage_widths: Vec<usize>,
    /// Per-stage spatial stride (1 keeps resolution, 2 halves it).
    pub stage_strides: Vec<usize>,
    /// 1-based stage indices that receive a correlation/identification block.
    pub insertion_stages: Vec<usize>,
    /// Channels of both temporal convolution layers.
    pub temporal_channels: usize,
    /// Hidden size of each recurrent direction.
    pub hidden_size: usize,
    /// Stacked bidirectional recurrent layers.
    pub recurrent_layers: usize,
    pub correlation: CorrelationSection,
    pub identification: IdentificationSection,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            stage_widths: vec![8, 16, 32, 64],
            stage_strides: vec![1, 2, 2, 2],
            insertion_stages: vec![2, 3, 4],
            temporal_channels: 64,
            hidden_size: 64,
            recurrent_layers: 2,
            correlation: CorrelationSection::default(),
            identification: IdentificationSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelationSection {
    /// `"full"` or an odd window extent.
    pub neighborhood: NeighborhoodChoice,
}

impl Default for CorrelationSection {
    fn default() -> Self {
        CorrelationSection {
            neighborhood: NeighborhoodChoice::Keyword(FullKeyword::Full),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentificationSection {
    /// Channel reduction factor r.
    pub reduction: usize,
    /// Spatial dilation rates 1..=Ns.
    pub spatial_scales: usize,
    /// Temporal dilation rates 1..=Nt.
    pub temporal_scales: usize,
    /// Depthwise branch convolutions when true, dense otherwise.
    pub depthwise: bool,
    /// Zero-initialize the expand projection (diagnostics only; leaves the
    /// block without gradient while the residual gate is zero).
    pub zero_init_expand: bool,
}

impl Default for IdentificationSection {
    fn default() -> Self {
        IdentificationSection {
            reduction: 16,
            spatial_scales: 3,
            temporal_scales: 4,
            depthwise: true,
            zero_init_expand: false,
        }
    }
}

impl IdentificationSection {
    pub fn as_config(&self) -> IdentificationConfig {
        IdentificationConfig {
            reduction: self.reduction,
            base_kernel: (3, 3, 3),
            spatial_scales: self.spatial_scales,
            temporal_scales: self.temporal_scales,
            depthwise: self.depthwise,
            zero_init_expand: self.zero_init_expand,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// Weight of the CTC term on the final classifier.
    pub ctc: f64,
    /// Weight of the auxiliary (visual) CTC term.
    pub ve: f64,
    /// Weight of the divergence between final and auxiliary predictions.
    pub va: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            ctc: 1.0,
            ve: 1.0,
            va: 25.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    /// Initial learning rate.
    pub lr: f64,
    /// Divisor applied at each milestone.
    pub lr_decay: f64,
    /// Explicit decay epochs; empty scales the 20/40 and 30/40 points to the
    /// configured epoch count.
    pub lr_milestones: Vec<usize>,
    pub weight_decay: f64,
    pub train_sentences: usize,
    pub dev_sentences: usize,
    pub test_sentences: usize,
    /// Reshuffle the training order each epoch (seed-deterministic).
    pub shuffle: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 12,
            lr: 0.001,
            lr_decay: 5.0,
            lr_milestones: Vec::new(),
            weight_decay: 0.001,
            train_sentences: 600,
            dev_sentences: 100,
            test_sentences: 100,
            shuffle: true,
        }
    }
}

impl TrainSection {
    /// Milestones in effect for `epochs` total epochs.
    pub fn effective_milestones(&self, epochs: usize) -> Vec<usize> {
        let mut ms = if self.lr_milestones.is_empty() {
            vec![epochs / 2, epochs * 3 / 4]
        } else {
            self.lr_milestones.clone()
        };
        ms.retain(|&m| m > 0 && m < epochs);
        ms.dedup();
        ms
    }

    /// Learning rate for a 0-based epoch index.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        let passed = self
            .effective_milestones(epochs)
            .iter()
            .filter(|&&m| epoch >= m)
            .count();
        self.lr / self.lr_decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Square frame extent in pixels.
    pub frame_size: usize,
    /// Number of trajectory classes.
    pub vocab_size: usize,
    pub frames_per_gloss: usize,
    pub min_glosses: usize,
    pub max_glosses: usize,
    /// Cutoff radius of the rendered blob in pixels.
    pub blob_radius: f64,
    /// Static distractor blobs per sample.
    pub distractors: usize,
    /// Uniform pixel noise amplitude in [0, 0.5].
    pub noise: f64,
    /// Per-frame trajectory wobble in pixels, orthogonal to the motion.
    pub trajectory_jitter: f64,
    /// Maximum per-sample translation of the whole trajectory, in pixels.
    pub trajectory_offset: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            frame_size: 16,
            vocab_size: 6,
            frames_per_gloss: 8,
            min_glosses: 2,
            max_glosses: 5,
            blob_radius: 2.5,
            distractors: 3,
            noise: 0.05,
            trajectory_jitter: 1.0,
            trajectory_offset: 0.0,
        }
    }
}

impl DataSection {
    pub fn as_synthetic(&self, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            frame_size: self.frame_size,
            vocab_size: self.vocab_size,
            frames_per_gloss: self.frames_per_gloss,
            min_glosses: self.min_glosses,
            max_glosses: self.max_glosses,
            blob_radius: self.blob_radius,
            distractors: self.distractors,
            noise: self.noise,
            trajectory_jitter: self.trajectory_jitter,
            trajectory_offset: self.trajectory_offset,
            seed,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.stage_widths.is_empty() {
            return Err(Error::Config("model.stage_widths must not be empty".into()));
        }
        if m.stage_widths.len() != m.stage_strides.len() {
            return Err(Error::Config(format!(
                "model.stage_strides has {} entries for {} stages",
                m.stage_strides.len(),
                m.stage_widths.len()
            )));
        }
        if m.stage_widths.iter().any(|&w| w == 0) || m.stage_strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("stage widths and strides must be positive".into()));
        }
        for &s in &m.insertion_stages {
            if s == 0 || s > m.stage_widths.len() {
                return Err(Error::Config(format!(
                    "model.insertion_stages entry {s} outside 1..={}",
                    m.stage_widths.len()
                )));
            }
            let channels = m.stage_widths[s - 1];
            m.identification.as_config().validate(channels).map_err(|e| {
                Error::Config(format!("insertion stage {s}: {e}"))
            })?;
        }
        if m.temporal_channels == 0 || m.hidden_size == 0 || m.recurrent_layers == 0 {
            return Err(Error::Config(
                "temporal_channels, hidden_size and recurrent_layers must be positive".into(),
            ));
        }
        if let NeighborhoodChoice::Window(k) = m.correlation.neighborhood {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!(
                    "model.correlation.neighborhood window {k} must be odd"
                )));
            }
        }
        let d = &self.data;
        if d.frame_size == 0
            || d.vocab_size == 0
            || d.frames_per_gloss == 0
            || d.min_glosses == 0
        {
            return Err(Error::Config("data extents must be positive".into()));
        }
        if d.min_glosses > d.max_glosses {
            return Err(Error::Config(format!(
                "data.min_glosses {} exceeds data.max_glosses {}",
                d.min_glosses, d.max_glosses
            )));
        }
        if !(0.0..=0.5).contains(&d.noise) {
            return Err(Error::Config(format!(
                "data.noise {} outside [0, 0.5]",
                d.noise
            )));
        }
        if d.blob_radius <= 0.0 {
            return Err(Error::Config("data.blob_radius must be positive".into()));
        }
        if self.train.lr <= 0.0 || self.train.lr_decay <= 0.0 {
            return Err(Error::Config("train.lr and train.lr_decay must be positive".into()));
        }
        Ok(())
    }

    /// Vocabulary size plus the blank class.
    pub fn num_classes(&self) -> usize {
        self.data.vocab_size + 1
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Parse `key=value` pairs as given to `--set`.
pub fn parse_override(raw: &str) -> Result<(String, String)> {
    match raw.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!(
            "override {raw:?} must look like section.key=value"
        ))),
    }
}

fn parse_toml_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Holder {
        v: toml::Value,
    }
    match toml::from_str::<Holder>(&format!("v = {raw}")) {
        Ok(h) => h.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override key {key:?} traverses a non-section"))
        })?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override key {key:?} traverses a non-section")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_toml_value(raw));
    Ok(())
}

/// Parse a config from TOML text plus `--set` overrides, then validate.
pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<ModelConfig> {
    let mut value: toml::Value = toml::from_str(text)
        .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    if !value.is_table() {
        return Err(Error::Config("config root must be a table".into()));
    }
    for (k, v) in overrides {
        apply_override(&mut value, k, v)?;
    }
    let cfg: ModelConfig = ModelConfig::deserialize(value)
        .map_err(|e| Error::Config(format!("{e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    from_toml_str(&text, overrides)
}
