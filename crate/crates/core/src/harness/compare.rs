use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::train::{reopen, CONFIG_FILE};
use super::{evaluate, load_test, train, TrainRun};
use crate::config::RunConfig;
use crate::dlm::Checkpoint;
use crate::{Error, Result};

pub const SFT_ARM: &str = "sft";
pub const ALIGN_ARM: &str = "align";

/// One (seed, arm, epoch) point of an accuracy curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub config: String,
    pub epoch: usize,
    pub accuracy: f64,
    pub loss_dlm: f64,
    pub mean_ratio: f64,
    pub wall_time_s: f64,
    /// First epoch reaching the seed's threshold; empty when never reached.
    pub epochs_to_threshold: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub config: String,
    pub final_accuracy_mean: f64,
    pub final_accuracy_std: f64,
    /// Over seeds that reached the threshold.
    pub epochs_to_threshold_mean: Option<f64>,
    pub epochs_to_threshold_std: Option<f64>,
    pub reached: usize,
    pub wall_time_mean_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub summary: Vec<ArmSummary>,
    pub thresholds: Vec<(u64, f64)>,
    pub table_path: PathBuf,
}

/// Trains matched SFT-only and alignment arms per seed and evaluates every
/// epoch checkpoint on the test split. Finished arm directories with an
/// identical config snapshot are reused.
pub fn compare_runs(cfg: &RunConfig) -> Result<ComparisonTable> {
    cfg.validate()?;
    let root = cfg.output_root.join(format!("{}-compare", cfg.run_id));
    fs::create_dir_all(&root).map_err(|e| Error::file(&root, e))?;
    let test = load_test(cfg)?;
    let opts = cfg.eval.decode_options();

    let mut rows = Vec::new();
    let mut thresholds = Vec::new();
    for &seed in &cfg.compare.seeds {
        let mut curves: Vec<(String, Vec<ComparisonRow>)> = Vec::new();
        for (arm, enabled) in [(SFT_ARM, false), (ALIGN_ARM, true)] {
            let mut arm_cfg = cfg.clone();
            arm_cfg.output_root = root.clone();
            arm_cfg.run_id = format!("seed{seed}_{arm}");
            arm_cfg.train.seed = seed;
            arm_cfg.align.enabled = enabled;
            let run = run_or_reuse(&arm_cfg)?;
            let mut curve = Vec::with_capacity(run.epochs.len());
            for e in &run.epochs {
                let ckpt = Checkpoint::load(&run.dir.join(&e.checkpoint))?;
                let report = evaluate(&ckpt, &test, &opts)?;
                curve.push(ComparisonRow {
                    seed,
                    config: arm.to_string(),
                    epoch: e.epoch,
                    accuracy: report.accuracy,
                    loss_dlm: e.loss_dlm,
                    mean_ratio: e.mean_ratio,
                    wall_time_s: e.wall_time_s,
                    epochs_to_threshold: None,
                });
            }
            curves.push((arm.to_string(), curve));
        }
        let threshold = cfg
            .compare
            .threshold
            .unwrap_or_else(|| curves[0].1.last().map_or(0.0, |r| r.accuracy));
        thresholds.push((seed, threshold));
        for (_, curve) in &mut curves {
            let reached = curve.iter().find(|r| r.accuracy >= threshold).map(|r| r.epoch);
            for r in curve.iter_mut() {
                r.epochs_to_threshold = reached;
            }
            rows.extend(curve.iter().cloned());
        }
    }

    let summary = [SFT_ARM, ALIGN_ARM].iter().map(|arm| summarize(arm, &rows)).collect();
    let table_path = root.join("compare_table.csv");
    let mut w = csv::Writer::from_path(&table_path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let table = ComparisonTable {
        rows,
        summary,
        thresholds,
        table_path,
    };
    let summary_path = root.join("compare_summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&table.summary)? + "\n")
        .map_err(|e| Error::file(&summary_path, e))?;
    Ok(table)
}

fn run_or_reuse(cfg: &RunConfig) -> Result<TrainRun> {
    let dir = cfg.run_dir();
    if !dir.exists() {
        return train(cfg);
    }
    let run = reopen(&dir)?;
    let mut expected = cfg.clone();
    expected.model.vocab_size = run.config.model.vocab_size;
    if run.config != expected {
        return Err(Error::Contract(format!(
            "{} exists with a different {CONFIG_FILE}; remove it or change run_id",
            dir.display()
        )));
    }
    Ok(run)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn summarize(arm: &str, rows: &[ComparisonRow]) -> ArmSummary {
    let mut finals = Vec::new();
    let mut reached = Vec::new();
    let mut walls = Vec::new();
    let mut seeds: Vec<u64> = rows.iter().filter(|r| r.config == arm).map(|r| r.seed).collect();
    seeds.dedup();
    for seed in seeds {
        let Some(last) = rows.iter().filter(|r| r.config == arm && r.seed == seed).max_by_key(|r| r.epoch) else {
            continue;
        };
        finals.push(last.accuracy);
        walls.push(last.wall_time_s);
        if let Some(e) = last.epochs_to_threshold {
            reached.push(e as f64);
        }
    }
    let (fm, fs) = mean_std(&finals);
    let (em, es) = mean_std(&reached);
    ArmSummary {
        config: arm.to_string(),
        final_accuracy_mean: fm,
        final_accuracy_std: fs,
        epochs_to_threshold_mean: (!reached.is_empty()).then_some(em),
        epochs_to_threshold_std: (!reached.is_empty()).then_some(es),
        reached: reached.len(),
        wall_time_mean_s: mean_std(&walls).0,
    }
}
