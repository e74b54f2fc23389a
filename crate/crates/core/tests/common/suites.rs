// Randomised equivalence suites shared by the per-module tests and the
// acceptance run. Each returns a one-line summary, or the first mismatch.
#![allow(dead_code)]

use ohem_core::detecteval::{detect, voc_ap, DetectConfig, Detection, GroundTruth};
use ohem_core::geometry::{nms, BBox, BoxDelta, DeltaNormalizer, DEFAULT_DELTA_CLAMP};
use ohem_core::rng::SplitMix64;
use ohem_core::roihead::{loss, HeadDims, HeadGradients, HeadParams};
use ohem_core::sampler::ohem_select;
use ohem_core::synthdata::{GtObject, Scene};

use super::oracles;

pub type Outcome = Result<String, String>;

pub fn nms_suite(cases: usize, seed: u64) -> Outcome {
    let mut rng = SplitMix64::new(seed);
    for case in 0..cases {
        let n = rng.below(51) as usize;
        let boxes = oracles::clustered_boxes(&mut rng, n);
        let scores = oracles::random_scores(&mut rng, n);
        let thresh = [0.0, 0.3, 0.5, 0.7, 1.0][case % 5];
        let got = nms(&boxes, &scores, thresh).map_err(|e| format!("case {case}: {e}"))?;
        let want = oracles::nms(&boxes, &scores, thresh);
        if got != want {
            return Err(format!("case {case}: nms {got:?} vs reference {want:?}"));
        }
    }
    Ok(format!("{cases} instances identical"))
}

pub fn ohem_select_suite(cases: usize, seed: u64) -> Outcome {
    let mut rng = SplitMix64::new(seed);
    for case in 0..cases {
        let n = 1 + rng.below(50) as usize;
        let boxes = oracles::clustered_boxes(&mut rng, n);
        let losses: Vec<f64> = oracles::random_scores(&mut rng, n).iter().map(|s| 3.0 * s).collect();
        let quota = 1 + rng.below(n as u64 + 5) as usize;
        let thresh = if case % 4 == 0 { 1.0 } else { 0.7 };
        let got = ohem_select(&losses, &boxes, quota, thresh).map_err(|e| format!("case {case}: {e}"))?;
        let want = oracles::ohem_select(&losses, &boxes, quota, thresh);
        if got != want {
            return Err(format!("case {case}: ohem_select {got:?} vs brute force {want:?}"));
        }
    }
    Ok(format!("{cases} instances identical"))
}

pub fn random_eval_instance(rng: &mut SplitMix64) -> (Vec<Detection>, Vec<GroundTruth>) {
    let scenes = 1 + rng.below(3);
    let mut gt = Vec::new();
    let mut total_gt = 0;
    for s in 0..scenes {
        let budget = 5 - total_gt.min(5);
        let n = rng.below(budget as u64 + 1) as usize;
        total_gt += n;
        let objects = (0..n)
            .map(|_| GtObject {
                class_id: 1 + rng.below(2) as usize,
                bbox: oracles::random_box(rng, 30.0, 4.0, 12.0),
                hardness: 0.5,
            })
            .collect();
        gt.push(GroundTruth { scene_id: s, objects });
    }
    let n_det = rng.below(11) as usize;
    let dets = (0..n_det)
        .map(|_| {
            let scene_id = rng.below(scenes);
            let g = &gt[scene_id as usize];
            let class_id = 1 + rng.below(2) as usize;
            // Mostly perturbed copies of gt boxes so that hits, misses and
            // duplicate claims all occur.
            let bbox = if !g.objects.is_empty() && rng.next_f64() < 0.7 {
                let o = g.objects[rng.below(g.objects.len() as u64) as usize].bbox;
                let j = |r: &mut SplitMix64| r.uniform(-2.0, 2.0);
                let x1 = o.x1 + j(rng);
                let y1 = o.y1 + j(rng);
                BBox { x1, y1, x2: (o.x2 + j(rng)).max(x1 + 1.0), y2: (o.y2 + j(rng)).max(y1 + 1.0) }
            } else {
                oracles::random_box(rng, 30.0, 4.0, 12.0)
            };
            Detection { scene_id, class_id, bbox, score: (rng.below(6) as f64) / 5.0 }
        })
        .collect();
    (dets, gt)
}

pub fn voc_ap_suite(cases: usize, seed: u64) -> Outcome {
    let mut rng = SplitMix64::new(seed);
    for case in 0..cases {
        let (dets, gt) = random_eval_instance(&mut rng);
        let report = voc_ap(&dets, &gt, 2, 0.5);
        for c in &report.classes {
            let want = oracles::class_ap(&dets, &gt, c.class_id, 0.5);
            if c.ap != want {
                return Err(format!("case {case} class {}: AP {:?} vs oracle {want:?}", c.class_id, c.ap));
            }
        }
        let want = oracles::mean_ap(&dets, &gt, 2, 0.5);
        if report.map != want {
            return Err(format!("case {case}: mAP {} vs oracle {want}", report.map));
        }
    }
    Ok(format!("{cases} instances identical"))
}

pub fn random_detect_instance(rng: &mut SplitMix64) -> (HeadParams, Scene, f64) {
    let k = 2 + rng.below(2) as usize;
    let d = 8;
    let dims = HeadDims { class_agnostic: rng.next_f64() < 0.3, ..HeadDims::new(d, 6, k) };
    let mut params = HeadParams::zeros(dims, 1.0);
    for v in params.weights.values_mut() {
        *v = rng.normal();
    }
    if rng.next_f64() < 0.3 {
        params.normalizer = DeltaNormalizer { mean: [0.01, -0.02, 0.05, 0.0], std: [0.1, 0.1, 0.2, 0.2] };
    }
    let n = 5 + rng.below(26) as usize;
    let proposals: Vec<BBox> = (0..n).map(|_| oracles::random_box(rng, 50.0, 2.0, 25.0)).collect();
    let features: Vec<f32> = (0..n * d).map(|_| rng.normal() as f32).collect();
    let scene = Scene {
        scene_id: rng.below(1000),
        extent: (50.0, 50.0),
        objects: vec![GtObject { class_id: 1, bbox: proposals[0], hardness: 0.5 }],
        distractors: vec![],
        proposals,
        features,
        feature_dim: d,
    };
    (params, scene, rng.uniform(0.05, 0.6))
}

pub fn detect_suite(cases: usize, seed: u64) -> Outcome {
    let mut rng = SplitMix64::new(seed);
    let mut nonempty = 0;
    for case in 0..cases {
        let (params, scene, thresh) = random_detect_instance(&mut rng);
        let cfg = DetectConfig { score_thresh: thresh, ..DetectConfig::default() };
        let got = detect(&params, &scene, &cfg).map_err(|e| format!("case {case}: {e}"))?.detections;
        let want = oracles::detect(&params, &scene, thresh, cfg.nms_iou, DEFAULT_DELTA_CLAMP);
        if got != want {
            return Err(format!("case {case}: detect differs from the straight-line pipeline"));
        }
        nonempty += !want.is_empty() as usize;
    }
    if nonempty * 2 <= cases {
        return Err(format!("only {nonempty} of {cases} instances produced detections"));
    }
    Ok(format!("{cases} instances identical ({nonempty} non-empty)"))
}

pub const FD_STEP: f64 = 1e-4;

pub struct GradInstance {
    pub params: HeadParams,
    pub feature: Vec<f64>,
    pub label: usize,
    pub target: Option<BoxDelta>,
}

pub fn random_grad_instance(rng: &mut SplitMix64, class_agnostic: bool) -> GradInstance {
    let dims = HeadDims { class_agnostic, ..HeadDims::new(8, 6, 3) };
    let mut params = HeadParams::zeros(dims, rng.uniform(0.5, 2.0));
    for v in params.weights.values_mut() {
        *v = rng.normal() * 0.7;
    }
    let feature: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
    let label = rng.below(4) as usize;
    let target = (label >= 1).then(|| {
        BoxDelta::new(rng.normal() * 0.5, rng.normal() * 0.5, rng.normal() * 0.5, rng.normal() * 0.5)
    });
    GradInstance { params, feature, label, target }
}

pub fn total_loss(inst: &GradInstance, params: &HeadParams) -> f64 {
    let out = params.forward(&inst.feature).unwrap();
    loss(params, &out, inst.label, inst.target.as_ref()).unwrap().total
}

/// True when the instance sits far enough from the ReLU and smooth-L1 kinks for
/// a central difference with `FD_STEP` to be meaningful.
pub fn away_from_kinks(inst: &GradInstance) -> bool {
    let p = &inst.params;
    let (d, h) = (p.dims.feature_dim, p.dims.hidden);
    let w = &p.weights;
    let xnorm: f64 = inst.feature.iter().map(|x| x.abs()).sum::<f64>() + 1.0;
    for j in 0..h {
        let pre: f64 = w.b1[j] + (0..d).map(|k| w.w1[j * d + k] * inst.feature[k]).sum::<f64>();
        if pre.abs() < 50.0 * FD_STEP * xnorm {
            return false;
        }
    }
    if let Some(t) = inst.target {
        let out = p.forward(&inst.feature).unwrap();
        let s = p.dims.loc_slot(inst.label);
        for (k, tk) in t.as_array().iter().enumerate() {
            if ((out.deltas[s + k] - tk).abs() - 1.0).abs() < 1e-2 {
                return false;
            }
        }
    }
    true
}

/// Central differences against `backward` on every parameter of `instances`
/// random heads.
pub fn finite_difference_suite(instances: usize, rel_tol: f64, seed: u64) -> Outcome {
    let mut rng = SplitMix64::new(seed);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < instances {
        let inst = random_grad_instance(&mut rng, checked % 5 == 4);
        if !away_from_kinks(&inst) {
            continue;
        }
        let (_, grads) = inst
            .params
            .backward(&inst.feature, inst.label, inst.target.as_ref())
            .map_err(|e| e.to_string())?;
        let mut probe = inst.params.clone();
        for (i, a) in grads.0.values().enumerate() {
            let orig = *probe.weights.values().nth(i).unwrap();
            *probe.weights.values_mut().nth(i).unwrap() = orig + FD_STEP;
            let up = total_loss(&inst, &probe);
            *probe.weights.values_mut().nth(i).unwrap() = orig - FD_STEP;
            let down = total_loss(&inst, &probe);
            *probe.weights.values_mut().nth(i).unwrap() = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            if rel > rel_tol {
                return Err(format!("instance {checked} param {i}: analytic {a} numeric {numeric} rel {rel:.2e}"));
            }
        }
        checked += 1;
    }
    Ok(format!("{checked} instances, worst relative error {worst:.2e}"))
}

/// Gradients of two regions accumulated in one buffer equal the sum of the
/// separately computed gradients, bit for bit.
pub fn accumulation_suite(cases: usize, seed: u64) -> Outcome {
    let mut rng = SplitMix64::new(seed);
    for case in 0..cases {
        let a = random_grad_instance(&mut rng, false);
        let b = random_grad_instance(&mut rng, false);
        let params = &a.params;
        let (_, ga) = params.backward(&a.feature, a.label, a.target.as_ref()).map_err(|e| e.to_string())?;
        let (_, gb) = params.backward(&b.feature, b.label, b.target.as_ref()).map_err(|e| e.to_string())?;
        let mut separate = HeadGradients::zeros(&params.dims);
        separate.accumulate(&ga);
        separate.accumulate(&gb);
        let mut batched = HeadGradients::zeros(&params.dims);
        params.backward_into(&a.feature, a.label, a.target.as_ref(), &mut batched).map_err(|e| e.to_string())?;
        params.backward_into(&b.feature, b.label, b.target.as_ref(), &mut batched).map_err(|e| e.to_string())?;
        if separate != batched {
            return Err(format!("case {case}: accumulated gradient differs from the sum"));
        }
    }
    Ok(format!("{cases} pairs exactly additive"))
}
