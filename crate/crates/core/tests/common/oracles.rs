// Straight-line reference implementations used to cross-check the library.
// They are written for readability, not speed, and share no code with the
// functions they check beyond the plain data types.
#![allow(dead_code, clippy::needless_range_loop)]

use ohem_core::detecteval::{Detection, GroundTruth};
use ohem_core::geometry::BBox;
use ohem_core::rng::SplitMix64;
use ohem_core::roihead::HeadParams;
use ohem_core::synthdata::Scene;

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
    let area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
    (inter / (area_a + area_b - inter)).clamp(0.0, 1.0)
}

/// Selection-sort order: repeatedly pick the highest remaining score, lowest
/// index on ties.
fn greedy_order(scores: &[f64]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut order = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for p in 1..left.len() {
            let (i, j) = (left[p], left[best]);
            if scores[i] > scores[j] || (scores[i] == scores[j] && i < j) {
                best = p;
            }
        }
        order.push(left.remove(best));
    }
    order
}

/// O(n^2) greedy NMS.
pub fn nms(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let order = greedy_order(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if box_iou(&boxes[i], &boxes[j]) > thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Explicit sort, greedy suppression, then the first `quota` survivors.
pub fn ohem_select(losses: &[f64], boxes: &[BBox], quota: usize, thresh: f64) -> Vec<usize> {
    let mut keep = nms(boxes, losses, thresh);
    keep.truncate(quota);
    keep
}

/// AP from an explicit precision/recall table: one row per rank, precision
/// replaced by the best precision at any deeper rank, summed over the ranks
/// where recall increases.
pub fn ap_from_flags(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut table: Vec<(f64, f64)> = Vec::new();
    let (mut hits, mut seen) = (0usize, 0usize);
    for &t in tp {
        seen += 1;
        if t {
            hits += 1;
        }
        table.push((hits as f64 / num_gt as f64, hits as f64 / seen as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for r in 0..table.len() {
        let (recall, _) = table[r];
        if recall == prev_recall {
            continue;
        }
        let best = table[r..].iter().map(|row| row.1).fold(0.0, f64::max);
        ap += (recall - prev_recall) * best;
        prev_recall = recall;
    }
    ap
}

/// Per-class AP with greedy matching to the best unmatched gt. `None` for
/// classes without ground truth.
pub fn class_ap(dets: &[Detection], gt: &[GroundTruth], class_id: usize, thresh: f64) -> Option<f64> {
    let mut mine: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class_id).collect();
    // Stable: equal scores keep input order.
    mine.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.objects.len()]).collect();
    let num_gt: usize = gt
        .iter()
        .map(|g| g.objects.iter().filter(|o| o.class_id == class_id).count())
        .sum();
    if num_gt == 0 {
        return None;
    }
    let mut flags = Vec::new();
    for d in mine {
        let mut hit = None;
        let mut best = thresh;
        for (s, g) in gt.iter().enumerate() {
            if g.scene_id != d.scene_id {
                continue;
            }
            for (j, o) in g.objects.iter().enumerate() {
                if o.class_id != class_id || used[s][j] {
                    continue;
                }
                let v = box_iou(&d.bbox, &o.bbox);
                if v >= best && (hit.is_none() || v > best) {
                    best = v;
                    hit = Some((s, j));
                }
            }
        }
        if let Some((s, j)) = hit {
            used[s][j] = true;
        }
        flags.push(hit.is_some());
    }
    Some(ap_from_flags(&flags, num_gt))
}

pub fn mean_ap(dets: &[Detection], gt: &[GroundTruth], num_classes: usize, thresh: f64) -> f64 {
    let aps: Vec<f64> = (1..=num_classes)
        .filter_map(|c| class_ap(dets, gt, c, thresh))
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Class probabilities and raw deltas by explicit matrix arithmetic.
pub fn head_forward(params: &HeadParams, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let dims = params.dims;
    let (d, h) = (dims.feature_dim, dims.hidden);
    let w = &params.weights;
    let mut hidden = vec![0.0; h];
    for j in 0..h {
        let mut acc = 0.0;
        for k in 0..d {
            acc += w.w1[j * d + k] * x[k];
        }
        hidden[j] = (w.b1[j] + acc).max(0.0);
    }
    let layer = |m: &[f64], b: &[f64]| -> Vec<f64> {
        (0..b.len())
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..h {
                    acc += m[i * h + j] * hidden[j];
                }
                b[i] + acc
            })
            .collect()
    };
    let logits = layer(&w.wc, &w.bc);
    let deltas = layer(&w.wl, &w.bl);
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - top).exp()).collect();
    let mut total = 0.0;
    for e in &exps {
        total += e;
    }
    (exps.iter().map(|e| e / total).collect(), deltas)
}

/// Single-pass detection written out step by step: score, decode, clip, drop
/// degenerate boxes, threshold, per-class NMS. Output grouped by class in NMS
/// order.
pub fn detect(params: &HeadParams, scene: &Scene, score_thresh: f64, nms_iou: f64, clamp: f64) -> Vec<Detection> {
    let dims = params.dims;
    let (width, height) = scene.extent;
    let mut cands: Vec<Detection> = Vec::new();
    for (i, p) in scene.proposals.iter().enumerate() {
        let x: Vec<f64> = scene.feature(i).iter().map(|&v| v as f64).collect();
        let (probs, deltas) = head_forward(params, &x);
        for c in 1..=dims.num_classes {
            if probs[c] < score_thresh {
                continue;
            }
            let s = if dims.class_agnostic { 0 } else { 4 * (c - 1) };
            let n = &params.normalizer;
            let t: Vec<f64> = (0..4).map(|k| deltas[s + k] * n.std[k] + n.mean[k]).collect();
            let pw = p.x2 - p.x1;
            let ph = p.y2 - p.y1;
            let cx = 0.5 * (p.x1 + p.x2) + t[0] * pw;
            let cy = 0.5 * (p.y1 + p.y2) + t[1] * ph;
            let w = pw * t[2].clamp(-clamp, clamp).exp();
            let h = ph * t[3].clamp(-clamp, clamp).exp();
            let b = BBox {
                x1: (cx - 0.5 * w).clamp(0.0, width),
                y1: (cy - 0.5 * h).clamp(0.0, height),
                x2: (cx + 0.5 * w).clamp(0.0, width),
                y2: (cy + 0.5 * h).clamp(0.0, height),
            };
            if !(b.x2 > b.x1 && b.y2 > b.y1) || (b.x2 - b.x1) * (b.y2 - b.y1) <= 1e-6 {
                continue;
            }
            cands.push(Detection { scene_id: scene.scene_id, class_id: c, bbox: b, score: probs[c] });
        }
    }
    let mut out = Vec::new();
    for c in 1..=dims.num_classes {
        let group: Vec<Detection> = cands.iter().filter(|d| d.class_id == c).copied().collect();
        let boxes: Vec<BBox> = group.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = group.iter().map(|d| d.score).collect();
        out.extend(nms(&boxes, &scores, nms_iou).into_iter().map(|k| group[k]));
    }
    out
}

// ---- random instances ------------------------------------------------------

/// Random valid box inside `[0, extent]^2` with side in `[min_side, max_side]`.
pub fn random_box(rng: &mut SplitMix64, extent: f64, min_side: f64, max_side: f64) -> BBox {
    let w = rng.uniform(min_side, max_side);
    let h = rng.uniform(min_side, max_side);
    let x1 = rng.uniform(0.0, extent - w);
    let y1 = rng.uniform(0.0, extent - h);
    BBox { x1, y1, x2: x1 + w, y2: y1 + h }
}

/// Boxes drawn around a few cluster centres so that overlaps are common, with
/// occasional exact duplicates.
pub fn clustered_boxes(rng: &mut SplitMix64, n: usize) -> Vec<BBox> {
    let centres: Vec<BBox> = (0..1 + rng.below(4)).map(|_| random_box(rng, 40.0, 4.0, 16.0)).collect();
    let mut out: Vec<BBox> = Vec::with_capacity(n);
    for _ in 0..n {
        if !out.is_empty() && rng.next_f64() < 0.1 {
            let k = rng.below(out.len() as u64) as usize;
            out.push(out[k]);
            continue;
        }
        let c = centres[rng.below(centres.len() as u64) as usize];
        let j = |rng: &mut SplitMix64| rng.uniform(-3.0, 3.0);
        let x1 = c.x1 + j(rng);
        let y1 = c.y1 + j(rng);
        let x2 = (c.x2 + j(rng)).max(x1 + 0.5);
        let y2 = (c.y2 + j(rng)).max(y1 + 0.5);
        out.push(BBox { x1, y1, x2, y2 });
    }
    out
}

/// Scores with deliberate ties.
pub fn random_scores(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if rng.next_f64() < 0.2 {
                (rng.below(4) as f64) / 4.0
            } else {
                rng.next_f64()
            }
        })
        .collect()
}
