//! Inference and VOC-style evaluation.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{decode_clipped, iou, nms, BBox, DEFAULT_DELTA_CLAMP};
use crate::roihead::HeadParams;
use rayon::prelude::*;

use crate::synthdata::{Dataset, FeatureModel, GtObject, Scene};

/// Match threshold of the evaluation protocol.
pub const VOC_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub scene_id: u64,
    pub class_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoteWeight {
    /// Weight each box by its score.
    Score,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VotedScore {
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    /// Class scores below this are dropped. The default sits above
    /// `1 / (K + 1)` for `K >= 5`, so an untrained head with uniform output
    /// detects nothing on the default dataset.
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub delta_clamp: f64,
    /// First-pass boxes at or above this score are rescored and relocalised.
    pub rescore_thresh: f64,
    /// Boxes with IoU at or above this with a kept box take part in its vote.
    pub vote_iou: f64,
    pub vote_weight: VoteWeight,
    pub voted_score: VotedScore,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.2,
            nms_iou: 0.3,
            delta_clamp: DEFAULT_DELTA_CLAMP,
            rescore_thresh: 0.5,
            vote_iou: 0.5,
            vote_weight: VoteWeight::Score,
            voted_score: VotedScore::Max,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectOutput {
    pub detections: Vec<Detection>,
    /// Candidates whose decoded box collapsed after clipping.
    pub degenerate: usize,
}

fn check_dims(params: &HeadParams, feature_dim: usize) -> Result<()> {
    if params.dims.feature_dim != feature_dim {
        return Err(Error::Dimension(format!(
            "head expects D={}, scene has D={}",
            params.dims.feature_dim, feature_dim
        )));
    }
    Ok(())
}

/// Scores and relocalises one box for every class; pushes candidates passing
/// `score_thresh`.
fn score_box<T: Copy + Into<f64>>(
    params: &HeadParams,
    scene: &Scene,
    proposal: &BBox,
    feature: &[T],
    cfg: &DetectConfig,
    out: &mut DetectOutput,
) -> Result<()> {
    let head = params.forward(feature)?;
    for c in 1..=params.dims.num_classes {
        let score = head.probs[c];
        if score < cfg.score_thresh {
            continue;
        }
        let delta = params.normalizer.denormalize(&head.delta(&params.dims, c));
        match decode_clipped(proposal, &delta, cfg.delta_clamp, scene.extent) {
            Some(bbox) => out.detections.push(Detection {
                scene_id: scene.scene_id,
                class_id: c,
                bbox,
                score,
            }),
            None => out.degenerate += 1,
        }
    }
    Ok(())
}

/// Per-class greedy NMS. Output grouped by class, each group in NMS order.
fn per_class_nms(dets: &[Detection], num_classes: usize, thresh: f64) -> Result<Vec<usize>> {
    let mut keep = Vec::new();
    for c in 1..=num_classes {
        let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == c).collect();
        let boxes: Vec<BBox> = idx.iter().map(|&i| dets[i].bbox).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| dets[i].score).collect();
        keep.extend(nms(&boxes, &scores, thresh)?.into_iter().map(|k| idx[k]));
    }
    Ok(keep)
}

fn first_pass(params: &HeadParams, scene: &Scene, cfg: &DetectConfig) -> Result<DetectOutput> {
    check_dims(params, scene.feature_dim)?;
    let mut out = DetectOutput::default();
    for (i, p) in scene.proposals.iter().enumerate() {
        score_box(params, scene, p, scene.feature(i), cfg, &mut out)?;
    }
    Ok(out)
}

/// Scores every proposal, decodes class-specific boxes, drops low scores and
/// runs per-class NMS.
pub fn detect(params: &HeadParams, scene: &Scene, cfg: &DetectConfig) -> Result<DetectOutput> {
    let r1 = first_pass(params, scene, cfg)?;
    let keep = per_class_nms(&r1.detections, params.dims.num_classes, cfg.nms_iou)?;
    Ok(DetectOutput {
        detections: keep.into_iter().map(|i| r1.detections[i]).collect(),
        degenerate: r1.degenerate,
    })
}

/// Two-pass detection with weighted box voting.
///
/// `R1` are the first-pass candidates; every `R1` box scoring at least
/// `rescore_thresh` is featurised at its new location and scored again,
/// yielding `R2` (same class). `RF = R1 ∪ R2` goes through per-class NMS, and
/// each kept box is replaced by the weighted mean of the same-class `RF` boxes
/// overlapping it by at least `vote_iou`.
pub fn detect_iterative(
    params: &HeadParams,
    scene: &Scene,
    features: &FeatureModel,
    cfg: &DetectConfig,
) -> Result<DetectOutput> {
    let r1 = first_pass(params, scene, cfg)?;
    let mut rf = r1.detections.clone();
    let mut degenerate = r1.degenerate;
    for d in r1.detections.iter().filter(|d| d.score >= cfg.rescore_thresh) {
        // Stored features are f32; rescoring uses the same representation.
        let f: Vec<f32> = features
            .featurize_in(scene, &d.bbox)
            .into_iter()
            .map(|x| x as f32)
            .collect();
        let head = params.forward(&f)?;
        let score = head.probs[d.class_id];
        if score < cfg.score_thresh {
            continue;
        }
        let delta = params
            .normalizer
            .denormalize(&head.delta(&params.dims, d.class_id));
        match decode_clipped(&d.bbox, &delta, cfg.delta_clamp, scene.extent) {
            Some(bbox) => rf.push(Detection {
                scene_id: scene.scene_id,
                class_id: d.class_id,
                bbox,
                score,
            }),
            None => degenerate += 1,
        }
    }
    dedup_exact(&mut rf);
    let keep = per_class_nms(&rf, params.dims.num_classes, cfg.nms_iou)?;
    let detections = keep.into_iter().map(|i| vote(&rf[i], &rf, cfg)).collect();
    Ok(DetectOutput {
        detections,
        degenerate,
    })
}

/// Set semantics for the union: drops later copies of bit-identical detections.
fn dedup_exact(dets: &mut Vec<Detection>) {
    let mut seen = std::collections::HashSet::new();
    dets.retain(|d| {
        let key = (
            d.class_id,
            d.bbox.as_array().map(f64::to_bits),
            d.score.to_bits(),
        );
        seen.insert(key)
    });
}

/// Weighted box vote around `kept` over same-class candidates with IoU >= `vote_iou`.
pub fn vote(kept: &Detection, pool: &[Detection], cfg: &DetectConfig) -> Detection {
    let group: Vec<&Detection> = pool
        .iter()
        .filter(|d| d.class_id == kept.class_id && iou(&kept.bbox, &d.bbox) >= cfg.vote_iou)
        .collect();
    let weight = |d: &Detection| match cfg.vote_weight {
        VoteWeight::Score => d.score,
        VoteWeight::Uniform => 1.0,
    };
    let total: f64 = group.iter().map(|d| weight(d)).sum();
    if group.is_empty() || total <= 0.0 {
        return *kept;
    }
    // Offsets from the kept box, so a group of identical boxes votes exactly.
    let base = kept.bbox.as_array();
    let mut acc = [0.0; 4];
    for d in &group {
        let w = weight(d);
        for (k, v) in d.bbox.as_array().iter().enumerate() {
            acc[k] += w * (v - base[k]);
        }
    }
    let voted: [f64; 4] = std::array::from_fn(|k| base[k] + acc[k] / total);
    let score = match cfg.voted_score {
        VotedScore::Max => group.iter().map(|d| d.score).fold(f64::NEG_INFINITY, f64::max),
        VotedScore::Mean => group.iter().map(|d| d.score).sum::<f64>() / group.len() as f64,
    };
    Detection {
        bbox: BBox {
            x1: voted[0],
            y1: voted[1],
            x2: voted[2],
            y2: voted[3],
        },
        score,
        ..*kept
    }
}

/// Runs detection over every scene of a dataset split (in scene order) and
/// scores the result at IoU 0.5.
pub fn evaluate_dataset(
    params: &HeadParams,
    dataset: &Dataset,
    cfg: &DetectConfig,
    iterative: bool,
) -> Result<(EvalReport, DetectOutput)> {
    if params.dims.num_classes != dataset.num_classes() {
        return Err(Error::Dimension(format!(
            "head has K={}, dataset has K={}",
            params.dims.num_classes,
            dataset.num_classes()
        )));
    }
    check_dims(params, dataset.feature_dim())?;
    let model = dataset.feature_model();
    let per_scene: Vec<DetectOutput> = dataset
        .scenes
        .par_iter()
        .map(|s| {
            if iterative {
                detect_iterative(params, s, &model, cfg)
            } else {
                detect(params, s, cfg)
            }
        })
        .collect::<Result<_>>()?;
    let mut all = DetectOutput::default();
    for o in per_scene {
        all.detections.extend(o.detections);
        all.degenerate += o.degenerate;
    }
    let report = voc_ap(
        &all.detections,
        &ground_truth(&dataset.scenes),
        dataset.num_classes(),
        VOC_IOU,
    );
    Ok((report, all))
}

/// Ground-truth boxes of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub scene_id: u64,
    pub objects: Vec<GtObject>,
}

pub fn ground_truth(scenes: &[Scene]) -> Vec<GroundTruth> {
    scenes
        .iter()
        .map(|s| GroundTruth {
            scene_id: s.scene_id,
            objects: s.objects.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class_id: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub num_detections: usize,
    pub num_gt: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    /// Mean AP over classes with at least one ground-truth instance.
    pub map: f64,
}

/// Area under the precision envelope (all-point interpolation). `tp` flags are
/// in descending-score order.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut rec = Vec::with_capacity(tp.len() + 2);
    let mut prec = Vec::with_capacity(tp.len() + 2);
    rec.push(0.0);
    prec.push(0.0);
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &t in tp {
        if t {
            ctp += 1;
        } else {
            cfp += 1;
        }
        rec.push(ctp as f64 / num_gt as f64);
        prec.push(ctp as f64 / (ctp + cfp) as f64);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..rec.len() {
        if rec[i] != rec[i - 1] {
            ap += (rec[i] - rec[i - 1]) * prec[i];
        }
    }
    ap
}

/// Greedy matching per class: detections in descending score order (ties keep
/// input order) each claim the highest-IoU unmatched ground truth of their
/// class in their scene when that IoU reaches `iou_thresh`.
pub fn voc_ap(
    detections: &[Detection],
    gt: &[GroundTruth],
    num_classes: usize,
    iou_thresh: f64,
) -> EvalReport {
    let mut classes = Vec::with_capacity(num_classes);
    for c in 1..=num_classes {
        let mut pool: Vec<(u64, Vec<BBox>, Vec<bool>)> = gt
            .iter()
            .map(|g| {
                let boxes: Vec<BBox> = g
                    .objects
                    .iter()
                    .filter(|o| o.class_id == c)
                    .map(|o| o.bbox)
                    .collect();
                let n = boxes.len();
                (g.scene_id, boxes, vec![false; n])
            })
            .collect();
        pool.sort_by_key(|p| p.0);
        let num_gt: usize = pool.iter().map(|p| p.1.len()).sum();

        let mut dets: Vec<&Detection> = detections.iter().filter(|d| d.class_id == c).collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let tp: Vec<bool> = dets
            .iter()
            .map(|d| {
                let Ok(slot) = pool.binary_search_by_key(&d.scene_id, |p| p.0) else {
                    return false;
                };
                let (_, boxes, used) = &mut pool[slot];
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in boxes.iter().enumerate() {
                    if used[j] {
                        continue;
                    }
                    let v = iou(&d.bbox, g);
                    if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((j, v));
                    }
                }
                match best {
                    Some((j, _)) => {
                        used[j] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        classes.push(ClassReport {
            class_id: c,
            ap: (num_gt > 0).then(|| average_precision(&tp, num_gt)),
            num_detections: dets.len(),
            num_gt,
        });
    }
    let present: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    EvalReport { classes, map }
}

pub const DETECTIONS_CSV_HEADER: &str = "scene_id,class_id,x1,y1,x2,y2,score";
pub const REPORT_CSV_HEADER: &str = "class_id,ap,num_detections,num_gt";

pub fn write_detections_csv(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{DETECTIONS_CSV_HEADER}")?;
    for d in dets {
        let b = d.bbox;
        writeln!(
            w,
            "{},{},{:?},{:?},{:?},{:?},{:?}",
            d.scene_id, d.class_id, b.x1, b.y1, b.x2, b.y2, d.score
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_detections_csv(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == DETECTIONS_CSV_HEADER => {}
        _ => return Err(Error::parse("line 1", "missing detections header")),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let loc = || format!("line {}", i + 1);
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::parse(loc(), format!("expected 7 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::parse(loc(), e.to_string()));
            Ok(Detection {
                scene_id: f[0].parse().map_err(|e: std::num::ParseIntError| Error::parse(loc(), e.to_string()))?,
                class_id: f[1].parse().map_err(|e: std::num::ParseIntError| Error::parse(loc(), e.to_string()))?,
                bbox: BBox::new(num(f[2])?, num(f[3])?, num(f[4])?, num(f[5])?)
                    .map_err(|e| Error::parse(loc(), e.to_string()))?,
                score: num(f[6])?,
            })
        })
        .collect()
}

/// Per-class rows followed by an `all` row carrying the mAP.
pub fn write_report_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{REPORT_CSV_HEADER}")?;
    for c in &report.classes {
        let ap = c.ap.map(|v| format!("{v:?}")).unwrap_or_default();
        writeln!(w, "{},{},{},{}", c.class_id, ap, c.num_detections, c.num_gt)?;
    }
    let dets: usize = report.classes.iter().map(|c| c.num_detections).sum();
    let gts: usize = report.classes.iter().map(|c| c.num_gt).sum();
    writeln!(w, "all,{:?},{},{}", report.map, dets, gts)?;
    w.flush()?;
    Ok(())
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "class      AP   dets    gt")?;
        for c in &self.classes {
            match c.ap {
                Some(ap) => writeln!(f, "{:>5} {:>7.4} {:>6} {:>5}", c.class_id, ap, c.num_detections, c.num_gt)?,
                None => writeln!(f, "{:>5} {:>7} {:>6} {:>5}", c.class_id, "absent", c.num_detections, c.num_gt)?,
            }
        }
        write!(f, "mAP {:.4}", self.map)
    }
}
