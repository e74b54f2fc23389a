//! SGD training of the region head.
//!
//! Each iteration draws `N` scenes (uniformly, with replacement). Per scene:
//!
//! 1. readonly phase (OHEM only): forward every non-excluded region under the
//!    current parameters and record its loss;
//! 2. select the mini-batch with the configured strategy;
//! 3. forward + backward the selected regions, accumulating gradients.
//!
//! After the `N` scenes, one momentum SGD step is taken with the summed
//! gradient divided by the number of selected regions. All randomness of
//! iteration `t` comes from generators derived from `(seed, t)`, so a run
//! resumed from a snapshot replays exactly.

mod ablation;

pub use ablation::{run_variant, 
    ablation_variants, run_ablation_suite, write_ablation_csv, AblationConfig, AblationRow,
    ABLATION_CSV_HEADER,
};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{BoxDelta, DeltaNormalizer};
use crate::roihead::{sgd_step, HeadDims, HeadGradients, HeadParams, Momentum, RoILoss, Snapshot};
use crate::rng::SplitMix64;
use crate::sampler::{
    all_sample, heuristic_sample, label_rois, ohem_select, ohem_select_joint, Candidates,
    LabeledRoI, SamplerConfig, Strategy,
};
use crate::synthdata::{Dataset, Scene};

const TAG_ITER: u64 = 0x17;
const TAG_SAMPLE: u64 = 0x18;
const TAG_INIT: u64 = 0x19;

/// IoU threshold for foreground in the mean-loss diagnostic.
pub const DIAGNOSTIC_FG_THRESH: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub sampler: SamplerConfig,
    pub hidden: usize,
    pub class_agnostic: bool,
    pub lambda: f64,
    pub momentum: f64,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub total_iters: usize,
    /// 0 disables intermediate snapshots; the final one is always taken.
    pub snapshot_every: usize,
    pub seed: u64,
    /// Rank hard examples over all `N` images together instead of per image.
    pub joint_selection: bool,
    /// Standardise regression targets with train-set statistics.
    pub normalize_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            hidden: 64,
            class_agnostic: false,
            lambda: 1.0,
            momentum: 0.9,
            lr_initial: 0.001,
            lr_decay_factor: 0.1,
            lr_decay_every: 1500,
            total_iters: 4000,
            snapshot_every: 500,
            seed: 0,
            joint_selection: false,
            normalize_targets: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.total_iters == 0 {
            return fail("total_iters must be >= 1".into());
        }
        if self.hidden == 0 {
            return fail("hidden must be >= 1".into());
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return fail(format!("lr_initial must be > 0, got {}", self.lr_initial));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return fail(format!(
                "lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            ));
        }
        if self.lr_decay_every == 0 {
            return fail("lr_decay_every must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        Ok(())
    }

    /// `lr_initial * decay^floor(iter / decay_every)`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        self.lr_initial * self.lr_decay_factor.powi((iter / self.lr_decay_every) as i32)
    }

    pub fn head_dims(&self, dataset: &Dataset) -> HeadDims {
        HeadDims {
            feature_dim: dataset.feature_dim(),
            hidden: self.hidden,
            num_classes: dataset.num_classes(),
            class_agnostic: self.class_agnostic,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub lr: f64,
    pub selected_count: usize,
    pub mean_selected_loss: f64,
    pub mean_selected_cls: f64,
    pub mean_selected_loc: f64,
    pub selected_fg: usize,
    /// Regions forwarded this iteration (readonly pass plus selected).
    pub forward_roi_count: usize,
    /// Regions that received a backward pass.
    pub backward_roi_count: usize,
    pub scene_ids: Vec<u64>,
    /// Empty selection: no parameter update was made.
    pub skipped: bool,
    pub wall_time_ms: f64,
}

pub const RECORDS_CSV_HEADER: &str = "iter,lr,selected_count,mean_selected_loss,forward_roi_count,\
backward_roi_count,selected_fg,mean_selected_cls,mean_selected_loc,skipped,scene_ids";

pub const TIMING_CSV_HEADER: &str = "iter,wall_time_ms";

/// Per-iteration records without timing, so identical runs give identical
/// files. Scene ids are `;`-separated.
pub fn write_records_csv(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{RECORDS_CSV_HEADER}")?;
    for r in records {
        let scenes: Vec<String> = r.scene_ids.iter().map(u64::to_string).collect();
        writeln!(
            w,
            "{},{:?},{},{:?},{},{},{},{:?},{:?},{},{}",
            r.iter,
            r.lr,
            r.selected_count,
            r.mean_selected_loss,
            r.forward_roi_count,
            r.backward_roi_count,
            r.selected_fg,
            r.mean_selected_cls,
            r.mean_selected_loc,
            r.skipped as u8,
            scenes.join(";")
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing_csv(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{TIMING_CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{},{:.3}", r.iter, r.wall_time_ms)?;
    }
    w.flush()?;
    Ok(())
}

/// Labels of one training scene under the sampler's thresholds, targets
/// already mapped through the parameter normaliser.
#[derive(Debug, Clone)]
struct PreparedScene {
    labeled: Vec<LabeledRoI>,
    candidates: Candidates,
}

fn prepare_scene(scene: &Scene, fg_thresh: f64, bg_lo: f64, norm: &DeltaNormalizer) -> PreparedScene {
    let mut labeled = label_rois(&scene.proposals, &scene.objects, fg_thresh, bg_lo);
    for l in labeled.iter_mut() {
        if let Some(t) = l.target {
            l.target = Some(norm.normalize(&t));
        }
    }
    let candidates = Candidates::of(&labeled);
    PreparedScene { labeled, candidates }
}

fn check_dims(params: &HeadParams, dataset: &Dataset) -> Result<()> {
    let d = &params.dims;
    if d.feature_dim != dataset.feature_dim() || d.num_classes != dataset.num_classes() {
        return Err(Error::Dimension(format!(
            "head is D={} K={}, dataset is D={} K={}",
            d.feature_dim,
            d.num_classes,
            dataset.feature_dim(),
            dataset.num_classes()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: HeadParams,
    pub records: Vec<IterationRecord>,
    /// `(completed iterations, parameters)` at every snapshot point.
    pub snapshots: Vec<(usize, HeadParams)>,
    pub snapshot_paths: Vec<PathBuf>,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a Dataset,
    scenes: Vec<PreparedScene>,
    params: HeadParams,
    momentum: Momentum,
    iteration: usize,
    dump_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Config("training split has no scenes".into()));
        }
        let dims = config.head_dims(dataset);
        let mut params = HeadParams::init(
            dims,
            config.lambda,
            crate::rng::derive_seed(config.seed, &[TAG_INIT]),
        );
        if config.normalize_targets {
            params.normalizer = fit_normalizer(dataset, config.sampler.fg_thresh);
        }
        let momentum = Momentum::new(&dims, config.momentum);
        Self::from_state(config, dataset, params, momentum, 0)
    }

    /// Continues a run from a snapshot taken by a trainer with the same config.
    pub fn resume(config: TrainConfig, dataset: &'a Dataset, snapshot: Snapshot) -> Result<Self> {
        config.validate()?;
        let momentum = snapshot
            .momentum
            .unwrap_or_else(|| Momentum::new(&snapshot.params.dims, config.momentum));
        Self::from_state(config, dataset, snapshot.params, momentum, snapshot.iteration)
    }

    fn from_state(
        config: TrainConfig,
        dataset: &'a Dataset,
        params: HeadParams,
        momentum: Momentum,
        iteration: usize,
    ) -> Result<Self> {
        check_dims(&params, dataset)?;
        let s = &config.sampler;
        let scenes = dataset
            .scenes
            .par_iter()
            .map(|sc| prepare_scene(sc, s.fg_thresh, s.bg_lo, &params.normalizer))
            .collect();
        Ok(Self {
            config,
            dataset,
            scenes,
            params,
            momentum,
            iteration,
            dump_dir: None,
        })
    }

    /// Directory for diagnostic dumps written when training aborts.
    pub fn with_dump_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.dump_dir = Some(dir.into());
        self
    }

    pub fn params(&self) -> &HeadParams {
        &self.params
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            iteration: self.iteration,
            params: self.params.clone(),
            momentum: Some(self.momentum.clone()),
        }
    }

    /// Scene positions (into the dataset) drawn for iteration `t`.
    pub fn scenes_for_iteration(&self, t: usize) -> Vec<usize> {
        let mut rng = SplitMix64::derived(self.config.seed, &[TAG_ITER, t as u64]);
        let n = self.dataset.scenes.len() as u64;
        (0..self.config.sampler.images_per_batch)
            .map(|_| rng.below(n) as usize)
            .collect()
    }

    fn non_finite(&self, scene: &Scene, l: &LabeledRoI, loss: &RoILoss) -> Error {
        let detail = format!(
            "scene {} roi {} label {} loss {:?}",
            scene.scene_id, l.roi_index, l.label, loss
        );
        let dump = self.dump_dir.as_ref().and_then(|dir| {
            let path = dir.join(format!("nonfinite_iter{}.txt", self.iteration));
            let body = format!(
                "{detail}\nbox {:?}\ntarget {:?}\nfeature {:?}\n",
                l.bbox,
                l.target,
                scene.feature(l.roi_index)
            );
            std::fs::write(&path, body).ok().map(|_| path)
        });
        Error::NonFinite {
            iter: self.iteration,
            detail,
            dump,
        }
    }

    /// Readonly pass: losses of every candidate region of one scene.
    fn readonly_losses(&self, scene: &Scene, prep: &PreparedScene) -> Result<Vec<f64>> {
        let params = &self.params;
        let losses: Vec<RoILoss> = prep
            .candidates
            .positions
            .par_iter()
            .map(|&pos| {
                let l = &prep.labeled[pos];
                let out = params.forward(scene.feature(l.roi_index))?;
                crate::roihead::loss(params, &out, l.label, l.target.as_ref())
            })
            .collect::<Result<_>>()?;
        for (loss, &pos) in losses.iter().zip(&prep.candidates.positions) {
            if !loss.total.is_finite() {
                return Err(self.non_finite(scene, &prep.labeled[pos], loss));
            }
        }
        Ok(losses.into_iter().map(|l| l.total).collect())
    }

    /// Runs one iteration and applies its update.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let start = Instant::now();
        let t = self.iteration;
        let cfg = &self.config;
        let quota = cfg.sampler.per_image_quota();
        let picks = self.scenes_for_iteration(t);

        let mut forward = 0usize;
        // Per image: positions into `labeled` that get a backward pass.
        let mut selections: Vec<Vec<usize>> = Vec::with_capacity(picks.len());
        match cfg.sampler.strategy {
            Strategy::Ohem if cfg.joint_selection => {
                let mut all_losses = Vec::with_capacity(picks.len());
                for &p in &picks {
                    let prep = &self.scenes[p];
                    all_losses.push(self.readonly_losses(&self.dataset.scenes[p], prep)?);
                    forward += prep.candidates.len();
                }
                let views: Vec<(&[f64], &[_])> = picks
                    .iter()
                    .zip(&all_losses)
                    .map(|(&p, l)| (l.as_slice(), self.scenes[p].candidates.boxes.as_slice()))
                    .collect();
                let joint = ohem_select_joint(&views, cfg.sampler.batch_size, cfg.sampler.nms_dedup_iou)?;
                selections = vec![Vec::new(); picks.len()];
                for (img, i) in joint {
                    selections[img].push(self.scenes[picks[img]].candidates.positions[i]);
                }
            }
            Strategy::Ohem => {
                for &p in &picks {
                    let prep = &self.scenes[p];
                    let losses = self.readonly_losses(&self.dataset.scenes[p], prep)?;
                    forward += prep.candidates.len();
                    let sel = ohem_select(&losses, &prep.candidates.boxes, quota, cfg.sampler.nms_dedup_iou)?;
                    selections.push(sel.into_iter().map(|i| prep.candidates.positions[i]).collect());
                }
            }
            Strategy::Heuristic => {
                for (slot, &p) in picks.iter().enumerate() {
                    let mut rng = SplitMix64::derived(cfg.seed, &[TAG_SAMPLE, t as u64, slot as u64]);
                    selections.push(heuristic_sample(
                        &self.scenes[p].labeled,
                        quota,
                        cfg.sampler.fg_fraction,
                        &mut rng,
                    )?);
                }
            }
            Strategy::All => {
                for (slot, &p) in picks.iter().enumerate() {
                    let mut rng = SplitMix64::derived(cfg.seed, &[TAG_SAMPLE, t as u64, slot as u64]);
                    selections.push(all_sample(&self.scenes[p].labeled, quota, &mut rng));
                }
            }
        }

        let mut grads = HeadGradients::zeros(&self.params.dims);
        let (mut sum_total, mut sum_cls, mut sum_loc) = (0.0, 0.0, 0.0);
        let mut selected = 0usize;
        let mut selected_fg = 0usize;
        for (&p, sel) in picks.iter().zip(&selections) {
            let scene = &self.dataset.scenes[p];
            let prep = &self.scenes[p];
            for &pos in sel {
                let l = &prep.labeled[pos];
                let loss = self.params.backward_into(
                    scene.feature(l.roi_index),
                    l.label,
                    l.target.as_ref(),
                    &mut grads,
                )?;
                if !loss.total.is_finite() {
                    return Err(self.non_finite(scene, l, &loss));
                }
                sum_total += loss.total;
                sum_cls += loss.cls;
                sum_loc += loss.loc;
                selected += 1;
                selected_fg += l.is_fg() as usize;
            }
        }
        forward += match cfg.sampler.strategy {
            // The readonly pass already forwarded the candidates; selected
            // regions are forwarded again by the trainable copy but counted once.
            Strategy::Ohem => 0,
            _ => selected,
        };

        let lr = cfg.lr_at(t);
        let skipped = selected == 0;
        if !skipped {
            grads.0.scale(1.0 / selected as f64);
            if !grads.0.is_finite() {
                return Err(Error::NonFinite {
                    iter: t,
                    detail: "accumulated gradient is not finite".into(),
                    dump: None,
                });
            }
            sgd_step(&mut self.params, &grads, lr, &mut self.momentum)?;
        }
        let denom = selected.max(1) as f64;
        self.iteration += 1;
        Ok(IterationRecord {
            iter: t,
            lr,
            selected_count: selected,
            mean_selected_loss: sum_total / denom,
            mean_selected_cls: sum_cls / denom,
            mean_selected_loc: sum_loc / denom,
            selected_fg,
            forward_roi_count: forward,
            backward_roi_count: selected,
            scene_ids: picks.iter().map(|&p| self.dataset.scenes[p].scene_id).collect(),
            skipped,
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Runs until `total_iters`, writing `snap_<iter>` files into `out_dir`
    /// when given.
    pub fn run(mut self, out_dir: Option<&Path>) -> Result<TrainOutcome> {
        let mut records = Vec::with_capacity(self.config.total_iters.saturating_sub(self.iteration));
        let mut snapshots = Vec::new();
        let mut snapshot_paths = Vec::new();
        while self.iteration < self.config.total_iters {
            records.push(self.step()?);
            let done = self.iteration;
            let every = self.config.snapshot_every;
            if (every > 0 && done.is_multiple_of(every)) || done == self.config.total_iters {
                snapshots.push((done, self.params.clone()));
                if let Some(dir) = out_dir {
                    let path = dir.join(format!("snap_{done}"));
                    self.snapshot().write(&path)?;
                    snapshot_paths.push(path);
                }
            }
        }
        Ok(TrainOutcome {
            params: self.params,
            records,
            snapshots,
            snapshot_paths,
        })
    }
}

/// Convenience wrapper: a fresh run over `dataset`.
pub fn train(config: &TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), dataset)?;
    if let Some(dir) = out_dir {
        trainer = trainer.with_dump_dir(dir);
    }
    trainer.run(out_dir)
}

fn fit_normalizer(dataset: &Dataset, fg_thresh: f64) -> DeltaNormalizer {
    let targets: Vec<BoxDelta> = dataset
        .scenes
        .iter()
        .flat_map(|s| label_rois(&s.proposals, &s.objects, fg_thresh, 0.0))
        .filter_map(|l| l.target)
        .collect();
    DeltaNormalizer::fit(&targets)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanLoss {
    pub total: f64,
    pub cls: f64,
    pub loc: f64,
    pub rois: usize,
}

/// Average loss over every region of every scene (`bg_lo = 0`), independent of
/// any sampling configuration.
pub fn eval_mean_loss(params: &HeadParams, dataset: &Dataset) -> Result<MeanLoss> {
    check_dims(params, dataset)?;
    let per_scene: Vec<(f64, f64, f64, usize)> = dataset
        .scenes
        .par_iter()
        .map(|scene| {
            let labeled = label_rois(&scene.proposals, &scene.objects, DIAGNOSTIC_FG_THRESH, 0.0);
            let mut acc = (0.0, 0.0, 0.0, 0usize);
            for l in &labeled {
                let target = l.target.map(|t| params.normalizer.normalize(&t));
                let out = params.forward(scene.feature(l.roi_index))?;
                let loss = crate::roihead::loss(params, &out, l.label, target.as_ref())?;
                acc.0 += loss.total;
                acc.1 += loss.cls;
                acc.2 += loss.loc;
                acc.3 += 1;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let (mut t, mut c, mut l, mut n) = (0.0, 0.0, 0.0, 0usize);
    for s in per_scene {
        t += s.0;
        c += s.1;
        l += s.2;
        n += s.3;
    }
    let d = n.max(1) as f64;
    Ok(MeanLoss {
        total: t / d,
        cls: c / d,
        loc: l / d,
        rois: n,
    })
}
