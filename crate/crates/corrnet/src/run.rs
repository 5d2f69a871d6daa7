//! Training, evaluation, diagnostics and map export behind the CLI and the
//! examples. Every entry point is deterministic given `(config, seed)`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DtypeChoice, ModelConfig};
use crate::ctc::greedy_decode;
use crate::metrics::{corpus_wer, CorpusWer, MetricsRecord};
use crate::network::{total_loss, LossWeights, Model};
use crate::synth::{self, Role, Sample};
use crate::tensor::{checkpoint, AdamConfig, AdamState, Parameters, Scalar, Tape};
use crate::{Error, Result};

/// Self-describing record of one run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub epochs: usize,
    pub config_snapshot: String,
    pub metrics_log: String,
    pub checkpoint_best: String,
    pub checkpoint_last: String,
}

pub fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.json")
}

pub fn config_snapshot_path(out_dir: &Path) -> PathBuf {
    out_dir.join("config.toml")
}

pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join("metrics.jsonl")
}

pub fn best_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("best.ckpt")
}

pub fn last_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("last.ckpt")
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_dev_wer: f64,
    pub records: Vec<MetricsRecord>,
}

/// Train a model from scratch, writing the config snapshot, manifest,
/// per-epoch dev metrics, and best/last checkpoints into `out_dir`.
pub fn train(
    cfg: &ModelConfig,
    out_dir: &Path,
    seed: u64,
    epochs_override: Option<usize>,
    quiet: bool,
) -> Result<TrainSummary> {
    match cfg.dtype {
        DtypeChoice::F32 => train_typed::<f32>(cfg, out_dir, seed, epochs_override, quiet),
        DtypeChoice::F64 => train_typed::<f64>(cfg, out_dir, seed, epochs_override, quiet),
    }
}

fn train_typed<S: Scalar>(
    cfg: &ModelConfig,
    out_dir: &Path,
    seed: u64,
    epochs_override: Option<usize>,
    quiet: bool,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let epochs = epochs_override.unwrap_or(cfg.train.epochs);
    fs::create_dir_all(out_dir)?;
    fs::write(config_snapshot_path(out_dir), cfg.to_toml())?;

    let manifest = RunManifest {
        seed,
        epochs,
        config_snapshot: "config.toml".into(),
        metrics_log: "metrics.jsonl".into(),
        checkpoint_best: "best.ckpt".into(),
        checkpoint_last: "last.ckpt".into(),
    };
    fs::write(
        manifest_path(out_dir),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;

    let mut params = Parameters::<S>::new();
    let model = Model::build(cfg, &mut params, seed)?;
    let metrics_file = metrics_path(out_dir);
    fs::write(&metrics_file, "")?;

    if epochs == 0 {
        checkpoint::save(&last_checkpoint_path(out_dir), &params)?;
        return Ok(TrainSummary {
            epochs: 0,
            best_dev_wer: f64::INFINITY,
            records: Vec::new(),
        });
    }

    let synth_cfg = cfg.data.as_synthetic(seed);
    synth_cfg.validate()?;
    let train_set: Vec<Sample<S>> =
        synth::generate_split(&synth_cfg, cfg.train.train_sentences, Role::Train);
    let dev_set: Vec<Sample<S>> =
        synth::generate_split(&synth_cfg, cfg.train.dev_sentences, Role::Dev);
    if train_set.is_empty() {
        return Err(Error::Config("train.train_sentences must be >= 1".into()));
    }

    let weights = LossWeights::from_config(cfg);
    let adam_cfg = AdamConfig {
        weight_decay: cfg.train.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(&params);
    let mut records = Vec::new();
    let mut best = f64::INFINITY;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..epochs {
        let lr = cfg.train.lr_at(epoch, epochs);
        if cfg.train.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0f64;
        for &idx in &order {
            let sample = &train_set[idx];
            params.zero_grad();
            let mut tape = Tape::new();
            let (fin, aux) = model.forward(&mut tape, &params, &sample.video)?;
            let loss = total_loss(&mut tape, fin, aux, &sample.label, &weights)?;
            loss_sum += tape.value(loss).item().as_f64();
            tape.backward(loss, &mut params)?;
            adam.step(&mut params, lr, &adam_cfg);
        }

        let dev = evaluate_samples(&model, &params, &dev_set)?;
        records.push(MetricsRecord::new(epoch, "dev", &dev));
        append_record(&metrics_file, records.last().unwrap())?;
        checkpoint::save(&last_checkpoint_path(out_dir), &params)?;
        if dev.wer < best {
            best = dev.wer;
            checkpoint::save(&best_checkpoint_path(out_dir), &params)?;
        }
        if !quiet {
            println!(
                "epoch {epoch:>3}  lr {lr:.6}  train-loss {:.4}  dev-wer {:.4}",
                loss_sum / train_set.len() as f64,
                dev.wer
            );
        }
    }

    Ok(TrainSummary {
        epochs,
        best_dev_wer: best,
        records,
    })
}

fn append_record(path: &Path, record: &MetricsRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record).expect("record serializes"))?;
    Ok(())
}

/// Greedy-decode every sample and pool the edit operations.
pub fn evaluate_samples<S: Scalar>(
    model: &Model,
    params: &Parameters<S>,
    samples: &[Sample<S>],
) -> Result<CorpusWer> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("split is empty".into()));
    }
    let mut pairs = Vec::with_capacity(samples.len());
    for sample in samples {
        let mut tape = Tape::new();
        let (fin, _) = model.forward(&mut tape, params, &sample.video)?;
        let hyp = greedy_decode(tape.value(fin));
        pairs.push((sample.label.clone(), hyp));
    }
    corpus_wer(&pairs)
}

/// Evaluate a checkpoint on one synthetic split.
pub fn evaluate(
    cfg: &ModelConfig,
    checkpoint_path: &Path,
    split: &str,
    seed: u64,
) -> Result<CorpusWer> {
    match cfg.dtype {
        DtypeChoice::F32 => evaluate_typed::<f32>(cfg, checkpoint_path, split, seed),
        DtypeChoice::F64 => evaluate_typed::<f64>(cfg, checkpoint_path, split, seed),
    }
}

fn split_samples<S: Scalar>(cfg: &ModelConfig, split: &str, seed: u64) -> Result<Vec<Sample<S>>> {
    let role = Role::parse(split)?;
    let count = match role {
        Role::Train => cfg.train.train_sentences,
        Role::Dev => cfg.train.dev_sentences,
        Role::Test => cfg.train.test_sentences,
    };
    let synth_cfg = cfg.data.as_synthetic(seed);
    synth_cfg.validate()?;
    Ok(synth::generate_split(&synth_cfg, count, role))
}

fn evaluate_typed<S: Scalar>(
    cfg: &ModelConfig,
    checkpoint_path: &Path,
    split: &str,
    seed: u64,
) -> Result<CorpusWer> {
    cfg.validate()?;
    let mut params = Parameters::<S>::new();
    let model = Model::build(cfg, &mut params, seed)?;
    checkpoint::load(checkpoint_path, &mut params)?;
    let samples = split_samples::<S>(cfg, split, seed)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!("split {split:?} is empty")));
    }
    evaluate_samples(&model, &params, &samples)
}

/// CSV exports of the gated correlation maps and attention map summaries for
/// one dev sample at one inserted stage.
pub fn export_maps(
    cfg: &ModelConfig,
    checkpoint_path: &Path,
    sample_index: u64,
    stage: usize,
    out_dir: &Path,
    seed: u64,
) -> Result<(PathBuf, PathBuf)> {
    match cfg.dtype {
        DtypeChoice::F32 => {
            export_maps_typed::<f32>(cfg, checkpoint_path, sample_index, stage, out_dir, seed)
        }
        DtypeChoice::F64 => {
            export_maps_typed::<f64>(cfg, checkpoint_path, sample_index, stage, out_dir, seed)
        }
    }
}

fn export_maps_typed<S: Scalar>(
    cfg: &ModelConfig,
    checkpoint_path: &Path,
    sample_index: u64,
    stage: usize,
    out_dir: &Path,
    seed: u64,
) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    if !cfg.model.insertion_stages.contains(&stage) {
        return Err(Error::InvalidArgument(format!(
            "stage {stage} has no inserted block; insertion stages are {:?}",
            cfg.model.insertion_stages
        )));
    }
    let mut params = Parameters::<S>::new();
    let model = Model::build(cfg, &mut params, seed)?;
    checkpoint::load(checkpoint_path, &mut params)?;

    let synth_cfg = cfg.data.as_synthetic(seed);
    let sample: Sample<S> = synth::generate_sample(&synth_cfg, Role::Dev.offset() + sample_index);

    let mut tape = Tape::new();
    let mut trace = crate::network::ForwardTrace::default();
    model.forward_traced(&mut tape, &params, &sample.video, &mut trace)?;

    fs::create_dir_all(out_dir)?;
    let corr_path = out_dir.join(format!("correlation_stage{stage}.csv"));
    let attn_path = out_dir.join(format!("attention_stage{stage}.csv"));

    let corr = trace
        .correlation
        .iter()
        .find(|(s, _)| *s == stage)
        .expect("validated insertion stage");
    let mut corr_csv = String::new();
    let mut wrote_header = false;
    for (t, dir, gated) in &corr.1.gated {
        let shape = gated.shape();
        let (h, w, nk) = (shape[0], shape[1], shape[2] * shape[3]);
        if !wrote_header {
            corr_csv.push_str("t,dir,i,j");
            for q in 0..nk {
                corr_csv.push_str(&format!(",a{q}"));
            }
            corr_csv.push('\n');
            wrote_header = true;
        }
        let data = gated.data();
        for i in 0..h {
            for j in 0..w {
                corr_csv.push_str(&format!("{t},{dir},{i},{j}"));
                let base = (i * w + j) * nk;
                for q in 0..nk {
                    corr_csv.push_str(&format!(",{}", data[base + q].as_f64()));
                }
                corr_csv.push('\n');
            }
        }
    }
    fs::write(&corr_path, corr_csv)?;

    let attn = trace
        .attention
        .iter()
        .find(|(s, _)| *s == stage)
        .expect("validated insertion stage");
    let maps = &attn.1;
    let shape = maps.shape();
    let (t_len, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut attn_csv = String::from("t,h,w,mean_m\n");
    for t in 0..t_len {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0f64;
                for ch in 0..c {
                    acc += maps.data()[((t * c + ch) * h + i) * w + j].as_f64();
                }
                attn_csv.push_str(&format!("{t},{i},{j},{}\n", acc / c as f64));
            }
        }
    }
    fs::write(&attn_path, attn_csv)?;
    Ok((corr_path, attn_path))
}

/// Fraction of gloss-interior frames whose forward correlation row, read at
/// the mover's current cell, peaks inside the mover's next-frame footprint.
pub fn correlation_footprint_alignment<S: Scalar>(
    cfg: &ModelConfig,
    trace: &crate::network::ForwardTrace<S>,
    stage: usize,
    sample_index: u64,
    label: &[usize],
    seed: u64,
) -> Result<f64> {
    let synth_cfg = cfg.data.as_synthetic(seed);
    let centers = synth::blob_centers(
        &synth_cfg,
        Role::Dev.offset() + sample_index,
        &label.to_vec(),
    );
    let downsample: usize = cfg.model.stage_strides[..stage].iter().product();
    let corr = trace
        .correlation
        .iter()
        .find(|(s, _)| *s == stage)
        .ok_or_else(|| Error::InvalidArgument(format!("stage {stage} not traced")))?;

    let to_cell = |coord: f64, extent: usize| -> usize {
        ((coord / downsample as f64).round() as isize).clamp(0, extent as isize - 1) as usize
    };
    let radius_cells = synth_cfg.blob_radius / downsample as f64 + 0.5;

    let f = synth_cfg.frames_per_gloss;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (t, dir, gated) in &corr.1.gated {
        if *dir != 1 {
            continue;
        }
        // Interior transition: frames t and t+1 belong to the same gloss.
        if (t + 1) % f == 0 {
            continue;
        }
        let shape = gated.shape();
        let (h, w) = (shape[0], shape[1]);
        let (kx, ky) = (shape[3], shape[2]);
        let (cx, cy) = centers[*t];
        let (nx, ny) = centers[*t + 1];
        let (ci, cj) = (to_cell(cy, h), to_cell(cx, w));
        let base = (ci * w + cj) * ky * kx;
        let row = &gated.data()[base..base + ky * kx];
        let mut best = 0usize;
        for (q, v) in row.iter().enumerate() {
            if v.as_f64() > row[best].as_f64() {
                best = q;
            }
        }
        // Neighbor grid coordinates depend on the neighborhood mode.
        let (bi, bj) = if (ky, kx) == (h, w) {
            (best / kx, best % kx)
        } else {
            let off = (ky - 1) / 2;
            let a = best / kx;
            let b = best % kx;
            (
                (ci + a).wrapping_sub(off).min(h - 1),
                (cj + b).wrapping_sub(off).min(w - 1),
            )
        };
        let (ti, tj) = (to_cell(ny, h), to_cell(nx, w));
        let d2 = (bi as f64 - ti as f64).powi(2) + (bj as f64 - tj as f64).powi(2);
        if d2.sqrt() <= radius_cells {
            hits += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(Error::InvalidArgument(
            "no interior transitions to score".into(),
        ));
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelSection;

    fn small_config() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.model = ModelSection {
            stage_widths: vec![4, 8],
            stage_strides: vec![2, 2],
            insertion_stages: vec![2],
            temporal_channels: 8,
            hidden_size: 6,
            recurrent_layers: 1,
            ..ModelSection::default()
        };
        cfg.model.identification.reduction = 4;
        cfg.model.identification.spatial_scales = 2;
        cfg.model.identification.temporal_scales = 2;
        cfg.data.frame_size = 8;
        cfg.train.train_sentences = 4;
        cfg.train.dev_sentences = 3;
        cfg.train.epochs = 1;
        cfg
    }

    #[test]
    fn zero_epochs_writes_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let summary = train(&small_config(), dir.path(), 1, Some(0), true).unwrap();
        assert_eq!(summary.epochs, 0);
        assert!(last_checkpoint_path(dir.path()).exists());
        assert!(!best_checkpoint_path(dir.path()).exists());
        let metrics = std::fs::read_to_string(metrics_path(dir.path())).unwrap();
        assert!(metrics.is_empty());
        assert!(config_snapshot_path(dir.path()).exists());
        assert!(manifest_path(dir.path()).exists());
    }

    #[test]
    fn train_then_evaluate_reproduces_logged_dev_wer() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let summary = train(&cfg, dir.path(), 5, None, true).unwrap();
        assert_eq!(summary.records.len(), 1);
        let wer = evaluate(&cfg, &best_checkpoint_path(dir.path()), "dev", 5).unwrap();
        assert_eq!(wer.wer, summary.best_dev_wer);
    }

    #[test]
    fn identical_seed_and_config_reproduce_run_artifacts() {
        let cfg = small_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        train(&cfg, d1.path(), 9, None, true).unwrap();
        train(&cfg, d2.path(), 9, None, true).unwrap();
        let read = |f: PathBuf| std::fs::read(f).unwrap();
        assert_eq!(
            read(metrics_path(d1.path())),
            read(metrics_path(d2.path()))
        );
        assert_eq!(
            read(last_checkpoint_path(d1.path())),
            read(last_checkpoint_path(d2.path()))
        );
    }

    #[test]
    fn export_requires_an_inserted_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        train(&cfg, dir.path(), 2, Some(0), true).unwrap();
        let err = export_maps(
            &cfg,
            &last_checkpoint_path(dir.path()),
            0,
            1,
            dir.path(),
            2,
        )
        .unwrap_err();
        assert!(err.to_string().contains("no inserted block"), "{err}");
    }

    #[test]
    fn exported_correlation_values_stay_gated() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        train(&cfg, dir.path(), 3, Some(0), true).unwrap();
        let (corr_csv, attn_csv) = export_maps(
            &cfg,
            &last_checkpoint_path(dir.path()),
            0,
            2,
            dir.path(),
            3,
        )
        .unwrap();
        let text = std::fs::read_to_string(corr_csv).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("t,dir,i,j,a0"));
        for line in lines {
            for v in line.split(',').skip(4) {
                let x: f64 = v.parse().unwrap();
                assert!(x > -0.5 && x < 0.5, "gated value {x} out of range");
            }
        }
        assert!(std::fs::read_to_string(attn_csv).unwrap().starts_with("t,h,w,mean_m"));
    }

    #[test]
    fn zero_init_expand_exports_all_zero_attention() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.model.identification.zero_init_expand = true;
        train(&cfg, dir.path(), 4, Some(0), true).unwrap();
        let (_, attn_csv) = export_maps(
            &cfg,
            &last_checkpoint_path(dir.path()),
            1,
            2,
            dir.path(),
            4,
        )
        .unwrap();
        let text = std::fs::read_to_string(attn_csv).unwrap();
        for line in text.lines().skip(1) {
            let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn evaluating_a_mismatched_checkpoint_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        train(&cfg, dir.path(), 6, Some(0), true).unwrap();
        let mut other = cfg.clone();
        other.model.hidden_size = 4;
        let err = evaluate(&other, &last_checkpoint_path(dir.path()), "dev", 6).unwrap_err();
        assert!(err.to_string().contains("lstm."), "{err}");
    }

    #[test]
    fn empty_split_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        train(&cfg, dir.path(), 7, Some(0), true).unwrap();
        cfg.train.dev_sentences = 0;
        let err = evaluate(&cfg, &last_checkpoint_path(dir.path()), "dev", 7).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
    }
}
