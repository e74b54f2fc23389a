mod common;

use common::{oracles, suites};
use ohem_core::detecteval::{average_precision, detect, voc_ap, DetectConfig, Detection};
use ohem_core::geometry::{BBox, DEFAULT_DELTA_CLAMP};
use ohem_core::rng::SplitMix64;
use ohem_core::roihead::{HeadDims, HeadParams};
use ohem_core::sampler::ohem_select;
use ohem_core::synthdata::{GtObject, Scene};
use proptest::prelude::*;

#[test]
fn nms_equals_quadratic_reference() {
    suites::nms_suite(1000, 11).unwrap();
}

#[test]
fn ohem_select_equals_brute_force() {
    suites::ohem_select_suite(1000, 12).unwrap();
}

#[test]
fn voc_ap_equals_pr_table_oracle() {
    suites::voc_ap_suite(500, 13).unwrap();
}

#[test]
fn average_precision_equals_pr_table_oracle() {
    let mut rng = SplitMix64::new(14);
    for _ in 0..500 {
        let n = rng.below(11) as usize;
        let flags: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.5).collect();
        let hits = flags.iter().filter(|&&f| f).count();
        let num_gt = hits + rng.below(3) as usize;
        assert_eq!(average_precision(&flags, num_gt), oracles::ap_from_flags(&flags, num_gt));
    }
}

#[test]
fn detect_equals_straight_line_pipeline() {
    suites::detect_suite(100, 15).unwrap();
}

#[test]
fn five_proposal_two_class_instance() {
    // Hidden layer is the identity on the positive orthant; logits are read
    // straight off the two feature coordinates.
    let dims = HeadDims::new(2, 2, 2);
    let mut params = HeadParams::zeros(dims, 1.0);
    params.weights.w1 = vec![1.0, 0.0, 0.0, 1.0];
    params.weights.wc = vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    let b = |x1: f64, y1: f64, x2: f64, y2: f64| BBox { x1, y1, x2, y2 };
    let proposals = vec![
        b(0.0, 0.0, 10.0, 10.0),
        b(1.0, 1.0, 11.0, 11.0),
        b(30.0, 30.0, 40.0, 40.0),
        b(0.0, 0.0, 10.0, 10.0),
        b(60.0, 60.0, 70.0, 70.0),
    ];
    let features: Vec<f32> = vec![3.0, 0.0, 2.0, 0.0, 0.0, 2.5, 0.0, 3.0, 0.1, 0.1];
    let scene = Scene {
        scene_id: 0,
        extent: (100.0, 100.0),
        objects: vec![GtObject { class_id: 1, bbox: proposals[0], hardness: 0.5 }],
        distractors: vec![],
        proposals,
        features,
        feature_dim: 2,
    };
    let cfg = DetectConfig { score_thresh: 0.5, ..DetectConfig::default() };
    let got = detect(&params, &scene, &cfg).unwrap().detections;
    let want = oracles::detect(&params, &scene, 0.5, 0.3, DEFAULT_DELTA_CLAMP);
    assert_eq!(got, want);
    // class 1: proposals 0 and 1 overlap (IoU 0.68), 1 is suppressed.
    // class 2: proposals 2 and 3.
    let summary: Vec<(usize, BBox)> = got.iter().map(|d| (d.class_id, d.bbox)).collect();
    assert_eq!(
        summary,
        vec![(1, scene.proposals[0]), (2, scene.proposals[3]), (2, scene.proposals[2])]
    );
}

#[test]
fn raising_a_loss_above_the_cut_selects_it() {
    let mut rng = SplitMix64::new(16);
    for _ in 0..200 {
        let n = 2 + rng.below(30) as usize;
        let boxes: Vec<BBox> = (0..n)
            .map(|i| BBox { x1: 20.0 * i as f64, y1: 0.0, x2: 20.0 * i as f64 + 10.0, y2: 10.0 })
            .collect();
        let mut losses: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let quota = 1 + rng.below(n as u64 - 1) as usize;
        let sel = ohem_select(&losses, &boxes, quota, 0.7).unwrap();
        let min = sel.iter().map(|&i| losses[i]).fold(f64::INFINITY, f64::min);
        let outside: Vec<usize> = (0..n).filter(|i| !sel.contains(i)).collect();
        let pick = outside[rng.below(outside.len() as u64) as usize];
        losses[pick] = min + 0.01;
        assert!(ohem_select(&losses, &boxes, quota, 0.7).unwrap().contains(&pick));
    }
}

proptest! {
    #[test]
    fn ap_depends_only_on_rank(seed in any::<u64>(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let mut rng = SplitMix64::new(seed);
        let (dets, gt) = suites::random_eval_instance(&mut rng);
        // Strictly increasing, so the order of the scores is preserved.
        let warped: Vec<Detection> = dets
            .iter()
            .map(|d| Detection { score: (a * d.score + b).exp() + d.score.powi(3), ..*d })
            .collect();
        let before = voc_ap(&dets, &gt, 2, 0.5);
        let after = voc_ap(&warped, &gt, 2, 0.5);
        prop_assert_eq!(before.map, after.map);
    }

    #[test]
    fn ohem_without_dedup_is_plain_top_k(seed in any::<u64>(), n in 1usize..40, quota in 1usize..50) {
        let mut rng = SplitMix64::new(seed);
        let boxes = oracles::clustered_boxes(&mut rng, n);
        let mut losses: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
        for i in (1..n).rev() {
            let j = rng.below(i as u64 + 1) as usize;
            losses.swap(i, j);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| losses[j].partial_cmp(&losses[i]).unwrap());
        order.truncate(quota);
        prop_assert_eq!(ohem_select(&losses, &boxes, quota, 1.0).unwrap(), order);
    }
}
