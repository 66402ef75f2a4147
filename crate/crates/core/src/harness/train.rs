use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{corpus_vocab, load_train, sample_tokens};
use crate::align::{total_loss, BatchItem};
use crate::config::RunConfig;
use crate::dlm::{apply_forward_masking, forward, AttentionCapture, Checkpoint, ModelParams, NoisedSequence};
use crate::mask::{load_masks, SupervisionMask};
use crate::numerics::{AdamW, AdamWConfig, Tape, Tensor};
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_epoch_{epoch:03}.json")
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub loss_dlm: f64,
    pub loss_align: f64,
    pub gamma: f64,
    pub mean_ratio: f64,
    pub frac_rows_satisfied: f64,
    pub loss_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub loss_dlm: f64,
    pub mean_ratio: f64,
    pub wall_time_s: f64,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub run_id: String,
    pub dir: PathBuf,
    pub config: RunConfig,
    pub metrics: PathBuf,
    /// Index 0 is the initial model, index `e` the model after epoch `e`.
    pub checkpoints: Vec<PathBuf>,
    pub epochs: Vec<EpochSummary>,
    pub steps: u64,
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    step: u64,
    epoch: usize,
    sample_ids: Vec<&'a str>,
    masking_levels: Vec<f64>,
    loss_dlm: f64,
    loss_align: Option<f64>,
    loss_total: f64,
    gamma: f64,
}

/// Runs the configured training into `output_root/run_id`, which must not
/// exist yet.
pub fn train(cfg: &RunConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    if dir.exists() {
        return Err(Error::Contract(format!(
            "run directory {} already exists; choose another run_id",
            dir.display()
        )));
    }

    let vocab = corpus_vocab(&cfg.data.dir)?;
    let hash = vocab.hash();
    let mut cfg = cfg.clone();
    if cfg.model.vocab_size == 0 {
        cfg.model.vocab_size = vocab.len();
    } else if cfg.model.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model.vocab_size {} but the corpus has {} tokens",
            cfg.model.vocab_size,
            vocab.len()
        )));
    }
    cfg.model.validate()?;
    let response_len = cfg.response_len();

    let samples = load_train(&cfg)?;
    let toks = samples
        .iter()
        .map(|s| sample_tokens(s, &vocab, response_len))
        .collect::<Result<Vec<_>>>()?;
    if let Some(t) = toks.iter().find(|t| t.len() > cfg.model.max_len) {
        return Err(Error::Config(format!(
            "sequences of {} tokens exceed model.max_len {}",
            t.len(),
            cfg.model.max_len
        )));
    }

    let mask_path = cfg.mask_path();
    let masks: Option<IndexMap<String, SupervisionMask>> = if mask_path.exists() {
        Some(load_masks(&mask_path, &hash)?)
    } else if cfg.align.enabled {
        return Err(Error::file(
            &mask_path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "mask sidecar missing; run build-masks"),
        ));
    } else {
        None
    };
    let sample_masks: Vec<Option<&SupervisionMask>> = samples
        .iter()
        .map(|s| masks.as_ref().and_then(|m| m.get(&s.id)))
        .collect();

    fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
    let snapshot = dir.join(CONFIG_FILE);
    fs::write(&snapshot, serde_json::to_string_pretty(&cfg)? + "\n").map_err(|e| Error::file(&snapshot, e))?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut params = ModelParams::init(&cfg.model, &mut init_rng)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(1));
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.train.lr,
        weight_decay: cfg.train.weight_decay,
        ..AdamWConfig::default()
    });
    let batches_per_epoch = samples.len().div_ceil(cfg.train.batch);
    let schedule = cfg.align.schedule((cfg.train.epochs * batches_per_epoch) as u64);
    let layers = cfg.align.layers(cfg.model.n_layers)?;
    let want_capture = masks.is_some() && !layers.is_empty();

    let make_ckpt = |params: &ModelParams, opt: &AdamW, step: u64, epoch: usize| Checkpoint {
        config: cfg.model.clone(),
        params: params.clone(),
        optimizer: opt.clone(),
        step,
        epoch,
        vocab: vocab.clone(),
        tokenizer_hash: hash.clone(),
        response_len: Some(response_len),
    };
    let mut checkpoints = Vec::with_capacity(cfg.train.epochs + 1);
    let p0 = dir.join(checkpoint_name(0));
    make_ckpt(&params, &opt, 0, 0).save(&p0)?;
    checkpoints.push(p0);

    let metrics_path = dir.join(METRICS_FILE);
    let mut metrics = csv::Writer::from_path(&metrics_path)?;
    let mut epochs_out = csv::Writer::from_path(dir.join(EPOCHS_FILE))?;
    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    let started = Instant::now();
    let mut step: u64 = 0;

    for epoch in 1..=cfg.train.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut data_rng);
        let (mut epoch_dlm, mut epoch_ratio, mut ratio_batches) = (0.0, 0.0, 0usize);

        for batch in order.chunks(cfg.train.batch) {
            let noised: Vec<NoisedSequence> = batch
                .iter()
                .map(|&i| apply_forward_masking(&toks[i], &mut data_rng))
                .collect::<Result<_>>()?;
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, true);
            let mut outs: Vec<(crate::Var, AttentionCapture)> = Vec::with_capacity(batch.len());
            for n in &noised {
                let fo = forward(&mut tape, &p, &cfg.model, &n.noised, want_capture)?;
                outs.push((fo.logits, fo.capture));
            }
            let items: Vec<BatchItem<'_>> = batch
                .iter()
                .zip(&noised)
                .zip(&outs)
                .map(|((&i, n), (logits, capture))| BatchItem {
                    logits: *logits,
                    noised: n,
                    capture,
                    mask: if want_capture { sample_masks[i] } else { None },
                })
                .collect();
            let gamma = if cfg.align.enabled { schedule.at(step as f64) } else { 0.0 };
            let tl = total_loss(&mut tape, &items, gamma, &cfg.align, &hash, cfg.train.reweight_by_inv_t)?;
            let loss_total = tape.value(tl.loss).item()?;
            if !loss_total.is_finite() {
                let diag = Diagnostic {
                    step,
                    epoch,
                    sample_ids: batch.iter().map(|&i| samples[i].id.as_str()).collect(),
                    masking_levels: noised.iter().map(|n| n.t).collect(),
                    loss_dlm: tl.loss_dlm,
                    loss_align: tl.loss_align,
                    loss_total,
                    gamma,
                };
                let path = dir.join(DIAGNOSTIC_FILE);
                fs::write(&path, serde_json::to_string_pretty(&diag)?).map_err(|e| Error::file(&path, e))?;
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {step} (epoch {epoch}); diagnostic written to {}",
                    path.display()
                )));
            }
            tape.backward(tl.loss)?;
            let grads: Vec<Tensor> = p
                .named()
                .into_iter()
                .zip(params.named())
                .map(|((_, v), (_, t))| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            drop(tape);
            opt.step(&mut params.named_mut(), &grads)?;

            let ratios: Vec<f64> = tl.rows.iter().filter_map(|r| r.ratio).collect();
            let row = MetricsRow {
                step,
                epoch,
                loss_dlm: tl.loss_dlm,
                loss_align: tl.loss_align.unwrap_or(f64::NAN),
                gamma,
                mean_ratio: mean(&ratios),
                frac_rows_satisfied: if tl.rows.is_empty() {
                    f64::NAN
                } else {
                    tl.rows.iter().filter(|r| r.satisfied()).count() as f64 / tl.rows.len() as f64
                },
                loss_total,
            };
            metrics.serialize(&row)?;
            epoch_dlm += tl.loss_dlm;
            if row.mean_ratio.is_finite() {
                epoch_ratio += row.mean_ratio;
                ratio_batches += 1;
            }
            step += 1;
        }
        metrics.flush()?;

        let name = checkpoint_name(epoch);
        let path = dir.join(&name);
        make_ckpt(&params, &opt, step, epoch).save(&path)?;
        checkpoints.push(path);
        let summary = EpochSummary {
            epoch,
            loss_dlm: epoch_dlm / batches_per_epoch as f64,
            mean_ratio: if ratio_batches == 0 { f64::NAN } else { epoch_ratio / ratio_batches as f64 },
            wall_time_s: started.elapsed().as_secs_f64(),
            checkpoint: name,
        };
        epochs_out.serialize(&summary)?;
        epochs_out.flush()?;
        epochs.push(summary);
    }

    Ok(TrainRun {
        run_id: cfg.run_id.clone(),
        dir,
        metrics: metrics_path,
        checkpoints,
        epochs,
        steps: step,
        config: cfg,
    })
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Reopens a finished run directory.
pub(super) fn reopen(dir: &Path) -> Result<TrainRun> {
    let cfg_path = dir.join(CONFIG_FILE);
    let body = fs::read_to_string(&cfg_path).map_err(|e| Error::file(&cfg_path, e))?;
    let config: RunConfig = serde_json::from_str(&body)?;
    let mut r = csv::Reader::from_path(dir.join(EPOCHS_FILE))?;
    let epochs: Vec<EpochSummary> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    if epochs.len() != config.train.epochs {
        return Err(Error::Contract(format!(
            "{} is incomplete: {} of {} epochs",
            dir.display(),
            epochs.len(),
            config.train.epochs
        )));
    }
    let mut checkpoints = vec![dir.join(checkpoint_name(0))];
    checkpoints.extend(epochs.iter().map(|e| dir.join(&e.checkpoint)));
    let metrics = dir.join(METRICS_FILE);
    let steps = read_metrics(&metrics)?.len() as u64;
    Ok(TrainRun {
        run_id: config.run_id.clone(),
        dir: dir.to_path_buf(),
        config,
        metrics,
        checkpoints,
        epochs,
        steps,
    })
}
