//! Flat `key = value` run configuration.
//!
//! One namespace covers every command: dataset generation keys (as accepted
//! by `DatasetConfig::set`), training, detection and ablation keys. Blank
//! lines and `#` comments are ignored; a key may appear only once per file.
//! Command-line flags are applied on top of the file as further key/value
//! pairs, and the fully merged configuration is what gets hashed and stored in
//! the run manifest.

use std::path::PathBuf;

use ohem_core::detecteval::{DetectConfig, VoteWeight, VotedScore};
use ohem_core::sampler::Strategy;
use ohem_core::synthdata::DatasetConfig;
use ohem_core::trainer::{AblationConfig, TrainConfig};

pub const TRAIN_KEYS: &[&str] = &[
    "strategy",
    "images_per_batch",
    "batch_size",
    "fg_fraction",
    "bg_lo",
    "fg_thresh",
    "nms_dedup_iou",
    "joint_selection",
    "hidden",
    "class_agnostic",
    "lambda",
    "momentum",
    "lr",
    "lr_decay_factor",
    "lr_decay_every",
    "total_iters",
    "snapshot_every",
    "normalize_targets",
];

pub const DETECT_KEYS: &[&str] = &[
    "score_thresh",
    "nms_iou",
    "delta_clamp",
    "rescore_thresh",
    "vote_iou",
    "vote_weight",
    "voted_score",
    "iterative_bbox",
];

pub const OTHER_KEYS: &[&str] = &[
    "name",
    "seed",
    "dataset",
    "test_dataset",
    "ablation_seeds",
    "big_batch_size",
    "big_batch_lr_multiplier",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Base name of generated dataset files.
    pub name: Option<String>,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    pub iterative_bbox: bool,
    pub dataset_path: Option<PathBuf>,
    pub test_dataset_path: Option<PathBuf>,
    pub ablation_seeds: Vec<u64>,
    pub big_batch_size: usize,
    pub big_batch_lr_multiplier: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ablation = AblationConfig::default();
        Self {
            name: None,
            seed: 0,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            detect: DetectConfig::default(),
            iterative_bbox: false,
            dataset_path: None,
            test_dataset_path: None,
            ablation_seeds: ablation.seeds,
            big_batch_size: ablation.big_batch_size,
            big_batch_lr_multiplier: ablation.big_batch_lr_multiplier,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| ConfigError(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError(format!("{key}: expected true or false, got {value:?}"))),
    }
}

/// Splits a config file into `(line number, key, value)` triples.
pub fn parse_file(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError(format!("line {}: expected `key = value`, got {raw:?}", i + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError(format!("line {}: empty key", i + 1)));
        }
        if let Some((first, ..)) = out.iter().find(|(_, key, _)| key == k) {
            return Err(ConfigError(format!(
                "line {}: key {k:?} already set on line {first}",
                i + 1
            )));
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let s = &mut self.train.sampler;
        match key {
            "name" => {
                if value.is_empty() || value.contains(['/', '\\']) {
                    return Err(ConfigError(format!("name: {value:?} is not a plain file name")));
                }
                self.name = Some(value.to_string());
            }
            "seed" => {
                self.seed = parse(key, value)?;
                self.dataset.seed = self.seed;
                self.train.seed = self.seed;
            }
            "dataset" => self.dataset_path = Some(PathBuf::from(value)),
            "test_dataset" => self.test_dataset_path = Some(PathBuf::from(value)),
            "ablation_seeds" => {
                self.ablation_seeds = value
                    .split(',')
                    .map(|v| parse::<u64>(key, v.trim()))
                    .collect::<Result<_, _>>()?;
            }
            "big_batch_size" => self.big_batch_size = parse(key, value)?,
            "big_batch_lr_multiplier" => self.big_batch_lr_multiplier = parse(key, value)?,

            "strategy" => s.strategy = parse::<Strategy>(key, value)?,
            "images_per_batch" => s.images_per_batch = parse(key, value)?,
            "batch_size" => s.batch_size = parse(key, value)?,
            "fg_fraction" => s.fg_fraction = parse(key, value)?,
            "bg_lo" => s.bg_lo = parse(key, value)?,
            "fg_thresh" => s.fg_thresh = parse(key, value)?,
            "nms_dedup_iou" => s.nms_dedup_iou = parse(key, value)?,
            "joint_selection" => self.train.joint_selection = parse_bool(key, value)?,
            "hidden" => self.train.hidden = parse(key, value)?,
            "class_agnostic" => self.train.class_agnostic = parse_bool(key, value)?,
            "lambda" => self.train.lambda = parse(key, value)?,
            "momentum" => self.train.momentum = parse(key, value)?,
            "lr" => self.train.lr_initial = parse(key, value)?,
            "lr_decay_factor" => self.train.lr_decay_factor = parse(key, value)?,
            "lr_decay_every" => self.train.lr_decay_every = parse(key, value)?,
            "total_iters" => self.train.total_iters = parse(key, value)?,
            "snapshot_every" => self.train.snapshot_every = parse(key, value)?,
            "normalize_targets" => self.train.normalize_targets = parse_bool(key, value)?,

            "score_thresh" => self.detect.score_thresh = parse(key, value)?,
            "nms_iou" => self.detect.nms_iou = parse(key, value)?,
            "delta_clamp" => self.detect.delta_clamp = parse(key, value)?,
            "rescore_thresh" => self.detect.rescore_thresh = parse(key, value)?,
            "vote_iou" => self.detect.vote_iou = parse(key, value)?,
            "vote_weight" => {
                self.detect.vote_weight = match value {
                    "score" => VoteWeight::Score,
                    "uniform" => VoteWeight::Uniform,
                    _ => return Err(ConfigError(format!("vote_weight: expected score or uniform, got {value:?}"))),
                }
            }
            "voted_score" => {
                self.detect.voted_score = match value {
                    "max" => VotedScore::Max,
                    "mean" => VotedScore::Mean,
                    _ => return Err(ConfigError(format!("voted_score: expected max or mean, got {value:?}"))),
                }
            }
            "iterative_bbox" => self.iterative_bbox = parse_bool(key, value)?,

            _ if DatasetConfig::KEYS.contains(&key) => {
                self.dataset.set(key, value).map_err(|e| ConfigError(e.to_string()))?
            }
            _ => return Err(ConfigError(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<(), ConfigError> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// File contents followed by flag overrides.
    pub fn load(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        if let Some(text) = file_text {
            for (line, k, v) in parse_file(text)? {
                cfg.set(&k, &v).map_err(|e| ConfigError(format!("line {line}: {e}")))?;
            }
        }
        cfg.apply(overrides)?;
        Ok(cfg)
    }

    pub fn ablation(&self) -> AblationConfig {
        AblationConfig {
            base: self.train.clone(),
            seeds: self.ablation_seeds.clone(),
            big_batch_size: self.big_batch_size,
            big_batch_lr_multiplier: self.big_batch_lr_multiplier,
            detect: self.detect.clone(),
        }
    }

    /// Every key with its effective value, in a fixed order. Parsing the
    /// rendered text yields the same configuration.
    pub fn render(&self) -> String {
        let t = &self.train;
        let s = &t.sampler;
        let d = &self.detect;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut kv: Vec<(&str, Option<String>)> = vec![
            ("name", self.name.clone()),
            ("seed", Some(self.seed.to_string())),
        ];
        for (k, v) in self.dataset.to_kv() {
            if k != "seed" {
                kv.push((k, Some(v)));
            }
        }
        kv.extend([
            ("strategy", Some(s.strategy.name().to_string())),
            ("images_per_batch", Some(s.images_per_batch.to_string())),
            ("batch_size", Some(s.batch_size.to_string())),
            ("fg_fraction", Some(format!("{:?}", s.fg_fraction))),
            ("bg_lo", Some(format!("{:?}", s.bg_lo))),
            ("fg_thresh", Some(format!("{:?}", s.fg_thresh))),
            ("nms_dedup_iou", Some(format!("{:?}", s.nms_dedup_iou))),
            ("joint_selection", Some(t.joint_selection.to_string())),
            ("hidden", Some(t.hidden.to_string())),
            ("class_agnostic", Some(t.class_agnostic.to_string())),
            ("lambda", Some(format!("{:?}", t.lambda))),
            ("momentum", Some(format!("{:?}", t.momentum))),
            ("lr", Some(format!("{:?}", t.lr_initial))),
            ("lr_decay_factor", Some(format!("{:?}", t.lr_decay_factor))),
            ("lr_decay_every", Some(t.lr_decay_every.to_string())),
            ("total_iters", Some(t.total_iters.to_string())),
            ("snapshot_every", Some(t.snapshot_every.to_string())),
            ("normalize_targets", Some(t.normalize_targets.to_string())),
            ("score_thresh", Some(format!("{:?}", d.score_thresh))),
            ("nms_iou", Some(format!("{:?}", d.nms_iou))),
            ("delta_clamp", Some(format!("{:?}", d.delta_clamp))),
            ("rescore_thresh", Some(format!("{:?}", d.rescore_thresh))),
            ("vote_iou", Some(format!("{:?}", d.vote_iou))),
            (
                "vote_weight",
                Some(match d.vote_weight {
                    VoteWeight::Score => "score",
                    VoteWeight::Uniform => "uniform",
                }
                .to_string()),
            ),
            (
                "voted_score",
                Some(match d.voted_score {
                    VotedScore::Max => "max",
                    VotedScore::Mean => "mean",
                }
                .to_string()),
            ),
            ("iterative_bbox", Some(self.iterative_bbox.to_string())),
            ("dataset", path(&self.dataset_path)),
            ("test_dataset", path(&self.test_dataset_path)),
            (
                "ablation_seeds",
                Some(self.ablation_seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")),
            ),
            ("big_batch_size", Some(self.big_batch_size.to_string())),
            ("big_batch_lr_multiplier", Some(format!("{:?}", self.big_batch_lr_multiplier))),
        ]);
        let mut out = String::new();
        for (k, v) in kv {
            if let Some(v) = v {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}
