//! The hyper-parameter ablation table: six training variants, each run over a
//! set of seeds and scored by held-out mAP and the all-regions training loss.

use std::io::Write;
use std::path::Path;

use super::{eval_mean_loss, train, TrainConfig};
use crate::detecteval::{evaluate_dataset, DetectConfig};
use crate::error::Result;
use crate::sampler::Strategy;
use crate::synthdata::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    /// Mini-batch size of the all-regions variant.
    pub big_batch_size: usize,
    /// Learning-rate multiplier of the all-regions variant.
    pub big_batch_lr_multiplier: f64,
    pub detect: DetectConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            big_batch_size: 2048,
            big_batch_lr_multiplier: 3.0,
            detect: DetectConfig::default(),
        }
    }
}

/// The fixed variant list, each derived from `cfg.base`:
///
/// | name               | strategy  | N | B        | lr          | bg_lo |
/// |--------------------|-----------|---|----------|-------------|-------|
/// | `heuristic_bglo0.1`| heuristic | 2 | base     | base        | 0.1   |
/// | `heuristic_bglo0`  | heuristic | 2 | base     | base        | 0     |
/// | `heuristic_n1`     | heuristic | 1 | base     | base        | 0.1   |
/// | `all_rois_bigb`    | all       | 2 | big      | base x mult | 0     |
/// | `ohem_n1`          | ohem      | 1 | base     | base        | 0     |
/// | `ohem_n2`          | ohem      | 2 | base     | base        | 0     |
pub fn ablation_variants(cfg: &AblationConfig) -> Vec<(&'static str, TrainConfig)> {
    let with = |strategy: Strategy, n: usize, bg_lo: f64| {
        let mut c = cfg.base.clone();
        c.sampler.strategy = strategy;
        c.sampler.images_per_batch = n;
        c.sampler.bg_lo = bg_lo;
        c
    };
    let mut big = with(Strategy::All, 2, 0.0);
    big.sampler.batch_size = cfg.big_batch_size;
    big.lr_initial = cfg.base.lr_initial * cfg.big_batch_lr_multiplier;
    vec![
        ("heuristic_bglo0.1", with(Strategy::Heuristic, 2, 0.1)),
        ("heuristic_bglo0", with(Strategy::Heuristic, 2, 0.0)),
        ("heuristic_n1", with(Strategy::Heuristic, 1, 0.1)),
        ("all_rois_bigb", big),
        ("ohem_n1", with(Strategy::Ohem, 1, 0.0)),
        ("ohem_n2", with(Strategy::Ohem, 2, 0.0)),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub final_map: f64,
    /// mAP with iterative localisation and box voting.
    pub final_map_iterative: f64,
    pub final_mean_loss: f64,
    pub mean_iter_time_ms: f64,
    pub mean_forward_rois: f64,
    pub mean_backward_rois: f64,
}

pub const ABLATION_CSV_HEADER: &str =
    "variant,seed,final_map,final_mean_loss,mean_iter_time_ms,final_map_iterative,mean_forward_rois,mean_backward_rois";

/// Trains one variant with one seed and scores it.
pub fn run_variant(
    name: &str,
    config: &TrainConfig,
    seed: u64,
    detect: &DetectConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<AblationRow> {
    let mut c = config.clone();
    c.seed = seed;
    let out = train(&c, train_set, None)?;
    let loss = eval_mean_loss(&out.params, train_set)?;
    let (report, _) = evaluate_dataset(&out.params, test_set, detect, false)?;
    let (iterative, _) = evaluate_dataset(&out.params, test_set, detect, true)?;
    let n = out.records.len().max(1) as f64;
    let mean = |f: fn(&super::IterationRecord) -> f64| out.records.iter().map(f).sum::<f64>() / n;
    Ok(AblationRow {
        variant: name.to_string(),
        seed,
        final_map: report.map,
        final_map_iterative: iterative.map,
        final_mean_loss: loss.total,
        mean_iter_time_ms: mean(|r| r.wall_time_ms),
        mean_forward_rois: mean(|r| r.forward_roi_count as f64),
        mean_backward_rois: mean(|r| r.backward_roi_count as f64),
    })
}

/// Runs every variant for every seed, sequentially so the timing column is
/// not distorted by concurrent runs.
pub fn run_ablation_suite(
    cfg: &AblationConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<Vec<AblationRow>> {
    cfg.base.validate()?;
    let mut rows = Vec::new();
    for (name, variant) in ablation_variants(cfg) {
        for &seed in &cfg.seeds {
            rows.push(run_variant(name, &variant, seed, &cfg.detect, train_set, test_set)?);
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{ABLATION_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.3},{:.6},{:.2},{:.2}",
            r.variant,
            r.seed,
            r.final_map,
            r.final_mean_loss,
            r.mean_iter_time_ms,
            r.final_map_iterative,
            r.mean_forward_rois,
            r.mean_backward_rois
        )?;
    }
    w.flush()?;
    Ok(())
}
