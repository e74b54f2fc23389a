//! Region labelling and mini-batch selection.
//!
//! Three strategies pick the regions that receive a backward pass:
//!
//! - `Heuristic`: a fixed foreground fraction, uniform sampling within the
//!   fg pool and the `[bg_lo, fg_thresh)` background pool.
//! - `All`: every non-excluded region, subsampled only if it exceeds the quota.
//! - `Ohem`: the highest-loss regions after NMS deduplication, with no class
//!   quota at all.

use crate::error::{Error, Result};
use crate::geometry::{encode_delta, iou, nms, BBox, BoxDelta};
use crate::rng::SplitMix64;
use crate::synthdata::GtObject;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Heuristic,
    Ohem,
    All,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Heuristic => "heuristic",
            Strategy::Ohem => "ohem",
            Strategy::All => "all",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heuristic" => Ok(Strategy::Heuristic),
            "ohem" => Ok(Strategy::Ohem),
            "all" => Ok(Strategy::All),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected heuristic, ohem or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    /// Total regions per mini-batch (`B`).
    pub batch_size: usize,
    /// Images per mini-batch (`N`).
    pub images_per_batch: usize,
    pub fg_fraction: f64,
    pub bg_lo: f64,
    pub fg_thresh: f64,
    pub nms_dedup_iou: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Heuristic,
            batch_size: 128,
            images_per_batch: 2,
            fg_fraction: 0.25,
            bg_lo: 0.1,
            fg_thresh: 0.5,
            nms_dedup_iou: 0.7,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.images_per_batch == 0 || self.batch_size == 0 {
            return fail("batch_size and images_per_batch must be >= 1".into());
        }
        if !self.batch_size.is_multiple_of(self.images_per_batch) {
            return fail(format!(
                "batch_size {} is not divisible by images_per_batch {}",
                self.batch_size, self.images_per_batch
            ));
        }
        for (name, v) in [
            ("fg_fraction", self.fg_fraction),
            ("bg_lo", self.bg_lo),
            ("fg_thresh", self.fg_thresh),
            ("nms_dedup_iou", self.nms_dedup_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.bg_lo >= self.fg_thresh {
            return fail(format!(
                "bg_lo ({}) must be below fg_thresh ({})",
                self.bg_lo, self.fg_thresh
            ));
        }
        Ok(())
    }

    /// Regions drawn per image, `B / N`.
    pub fn per_image_quota(&self) -> usize {
        self.batch_size / self.images_per_batch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRoI {
    pub roi_index: usize,
    pub bbox: BBox,
    /// 0 for background, otherwise the matched object's class.
    pub label: usize,
    pub max_iou: f64,
    pub matched_gt: Option<usize>,
    /// Present exactly for foreground regions.
    pub target: Option<BoxDelta>,
    /// Below `bg_lo`: never enters a mini-batch.
    pub excluded: bool,
}

impl LabeledRoI {
    pub fn is_fg(&self) -> bool {
        self.label >= 1
    }
}

/// Matches every proposal to its highest-IoU object (ties: lower object index).
pub fn label_rois(
    proposals: &[BBox],
    objects: &[GtObject],
    fg_thresh: f64,
    bg_lo: f64,
) -> Vec<LabeledRoI> {
    proposals
        .iter()
        .enumerate()
        .map(|(roi_index, b)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, o) in objects.iter().enumerate() {
                let v = iou(b, &o.bbox);
                if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            let max_iou = best.map_or(0.0, |(_, v)| v);
            let matched_gt = best.map(|(j, _)| j);
            if max_iou >= fg_thresh {
                let gt = &objects[matched_gt.unwrap()];
                LabeledRoI {
                    roi_index,
                    bbox: *b,
                    label: gt.class_id,
                    max_iou,
                    matched_gt,
                    target: Some(encode_delta(b, &gt.bbox)),
                    excluded: false,
                }
            } else {
                LabeledRoI {
                    roi_index,
                    bbox: *b,
                    label: 0,
                    max_iou,
                    matched_gt,
                    target: None,
                    excluded: max_iou < bg_lo,
                }
            }
        })
        .collect()
}

/// Fixed-ratio sampling. Returns positions into `labeled`: foreground first,
/// then background.
///
/// Foreground takes `min(round(fg_fraction * quota), #fg)` slots; background
/// fills the rest without replacement and, once exhausted, with replacement.
/// With no background at all the batch stays short rather than repeating fg.
pub fn heuristic_sample(
    labeled: &[LabeledRoI],
    quota: usize,
    fg_fraction: f64,
    rng: &mut SplitMix64,
) -> Result<Vec<usize>> {
    if quota == 0 {
        return Err(Error::Argument("quota must be >= 1".into()));
    }
    let fg: Vec<usize> = (0..labeled.len())
        .filter(|&i| !labeled[i].excluded && labeled[i].is_fg())
        .collect();
    let bg: Vec<usize> = (0..labeled.len())
        .filter(|&i| !labeled[i].excluded && !labeled[i].is_fg())
        .collect();
    if fg.is_empty() && bg.is_empty() {
        return Err(Error::Sampling("no non-excluded regions to sample".into()));
    }
    let fg_target = ((fg_fraction * quota as f64).round() as usize).min(quota);
    let n_fg = fg_target.min(fg.len());
    let mut out: Vec<usize> = rng
        .sample_without_replacement(fg.len(), n_fg)
        .into_iter()
        .map(|i| fg[i])
        .collect();
    let bg_needed = quota - n_fg;
    let n_bg = bg_needed.min(bg.len());
    out.extend(
        rng.sample_without_replacement(bg.len(), n_bg)
            .into_iter()
            .map(|i| bg[i]),
    );
    if !bg.is_empty() {
        for _ in n_bg..bg_needed {
            out.push(bg[rng.below(bg.len() as u64) as usize]);
        }
    }
    Ok(out)
}

/// Hard example selection: NMS over `(boxes, losses)` at `nms_dedup_iou`, then
/// the `quota` highest-loss survivors (ties: lower index). Returned in
/// descending-loss order.
pub fn ohem_select(
    losses: &[f64],
    boxes: &[BBox],
    quota: usize,
    nms_dedup_iou: f64,
) -> Result<Vec<usize>> {
    if losses.len() != boxes.len() {
        return Err(Error::Argument(format!(
            "ohem_select: {} losses but {} boxes",
            losses.len(),
            boxes.len()
        )));
    }
    let mut keep = nms(boxes, losses, nms_dedup_iou)?;
    keep.truncate(quota);
    Ok(keep)
}

/// Candidate view of the non-excluded regions of one image.
#[derive(Debug, Clone, Default)]
pub struct Candidates {
    /// Positions into the labelled list.
    pub positions: Vec<usize>,
    pub boxes: Vec<BBox>,
}

impl Candidates {
    pub fn of(labeled: &[LabeledRoI]) -> Self {
        let mut c = Self::default();
        for (i, l) in labeled.iter().enumerate() {
            if !l.excluded {
                c.positions.push(i);
                c.boxes.push(l.bbox);
            }
        }
        c
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Joint hard example selection across images: NMS inside each image, then the
/// `quota` highest-loss survivors over all images (ties: lower image, then
/// lower index). Returns `(image, index)` pairs, indices into each image's
/// loss list.
pub fn ohem_select_joint(
    images: &[(&[f64], &[BBox])],
    quota: usize,
    nms_dedup_iou: f64,
) -> Result<Vec<(usize, usize)>> {
    let mut pool: Vec<(f64, usize, usize)> = Vec::new();
    for (img, (losses, boxes)) in images.iter().enumerate() {
        for i in ohem_select(losses, boxes, usize::MAX, nms_dedup_iou)? {
            pool.push((losses[i], img, i));
        }
    }
    pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    Ok(pool.into_iter().take(quota).map(|(_, img, i)| (img, i)).collect())
}

/// Every non-excluded region, uniformly subsampled down to `quota` when there
/// are more. Returned in ascending position order.
pub fn all_sample(labeled: &[LabeledRoI], quota: usize, rng: &mut SplitMix64) -> Vec<usize> {
    let pool: Vec<usize> = (0..labeled.len()).filter(|&i| !labeled[i].excluded).collect();
    if pool.len() <= quota {
        return pool;
    }
    let mut picked: Vec<usize> = rng
        .sample_without_replacement(pool.len(), quota)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    picked
}
