//! Deterministic synthetic detection world.
//!
//! A scene holds ground-truth objects, "distractor" sites and a list of region
//! proposals with one feature vector each. Proposals are jittered copies of the
//! objects (the foreground pool), jittered copies of the distractor sites and
//! uniformly random boxes. Features stand in for pooled conv features:
//!
//! ```text
//! f(box) = sum_obj  iou(box, obj) * (proto[obj.class] + cue * R * clamp(delta(box, obj)))
//!        + sum_dist iou(box, dist) * dist.strength * decoy[dist.class]
//!        + position_scale * pe(box)
//!        + noise_sigma * n,   n ~ N(0, I) seeded by (seed, scene_id, box)
//! ```
//!
//! and the whole vector is multiplied by `feature_scale`.
//!
//! `decoy[c]` is the prototype of class `c` bent towards a fixed signature
//! direction, so distractors look like class `c` but remain separable once a
//! model has trained on them. Most distractor proposals have near-zero overlap
//! with any object, which is exactly the population a `bg_lo = 0.1` sampler
//! never sees.

mod format;

pub use format::{read_dataset, write_dataset, FORMAT_VERSION};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{encode_delta, iou, BBox};
use crate::rng::SplitMix64;

const TAG_SCENE: u64 = 1;
const TAG_PROTOTYPE: u64 = 2;
const TAG_SIGNATURE: u64 = 3;
const TAG_CUE: u64 = 4;
const TAG_NOISE: u64 = 5;

/// Regression-cue deltas are clamped to this magnitude before projection.
const CUE_DELTA_CLAMP: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    /// Scenes in the train split; test scene ids follow them.
    pub num_scenes: usize,
    pub test_scenes: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub proposals_per_scene: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub extent_width: f64,
    pub extent_height: f64,
    pub object_size_min: f64,
    pub object_size_max: f64,
    /// Jittered proposals generated around each object and each distractor site.
    pub jitter_per_object: usize,
    pub jitter_scale: f64,
    /// Probability that an object spawns a distractor site of another class.
    pub distractor_rate: f64,
    /// Weight of the signature direction inside a decoy prototype.
    pub distractor_mix: f64,
    pub hardness_min: f64,
    pub hardness_max: f64,
    pub position_scale: f64,
    pub regression_cue: f64,
    pub noise_sigma: f64,
    /// Overall gain applied to the feature vector, standing in for the large
    /// activation magnitudes of pooled conv features.
    pub feature_scale: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_scenes: 500,
            test_scenes: 200,
            num_classes: 5,
            feature_dim: 32,
            proposals_per_scene: 200,
            objects_min: 1,
            objects_max: 3,
            extent_width: 100.0,
            extent_height: 100.0,
            object_size_min: 12.0,
            object_size_max: 36.0,
            jitter_per_object: 3,
            jitter_scale: 0.1,
            distractor_rate: 1.0,
            distractor_mix: 0.3,
            hardness_min: 0.5,
            hardness_max: 1.0,
            position_scale: 0.1,
            regression_cue: 2.0,
            noise_sigma: 0.03,
            feature_scale: 16.0,
            seed: 0,
        }
    }
}

macro_rules! kv_fields {
    ($mac:ident) => {
        $mac! {
            num_scenes: usize,
            test_scenes: usize,
            num_classes: usize,
            feature_dim: usize,
            proposals_per_scene: usize,
            objects_min: usize,
            objects_max: usize,
            extent_width: f64,
            extent_height: f64,
            object_size_min: f64,
            object_size_max: f64,
            jitter_per_object: usize,
            jitter_scale: f64,
            distractor_rate: f64,
            distractor_mix: f64,
            hardness_min: f64,
            hardness_max: f64,
            position_scale: f64,
            regression_cue: f64,
            noise_sigma: f64,
            feature_scale: f64,
            seed: u64,
        }
    };
}

macro_rules! impl_kv {
    ($($name:ident: $ty:ty,)*) => {
        impl DatasetConfig {
            /// Every key accepted by [`DatasetConfig::set`].
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// `(key, value)` pairs; floats use the shortest exact representation.
            pub fn to_kv(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($name), format!("{:?}", self.$name))),*]
            }

            /// Sets one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => {
                        self.$name = value.trim().parse::<$ty>().map_err(|e| {
                            Error::Config(format!("{key}: cannot parse {value:?}: {e}"))
                        })?;
                    })*
                    _ => return Err(Error::Config(format!("unknown dataset key {key:?}"))),
                }
                Ok(())
            }
        }
    };
}

kv_fields!(impl_kv);

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.feature_dim < 8 {
            return fail(format!("feature_dim must be >= 8, got {}", self.feature_dim));
        }
        if self.proposals_per_scene < 32 {
            return fail(format!(
                "proposals_per_scene must be >= 32, got {}",
                self.proposals_per_scene
            ));
        }
        if self.objects_min < 1 || self.objects_max < self.objects_min {
            return fail(format!(
                "objects range [{}, {}] is invalid",
                self.objects_min, self.objects_max
            ));
        }
        if 2 * self.objects_max * self.jitter_per_object > self.proposals_per_scene {
            return fail("jittered proposals alone exceed proposals_per_scene".into());
        }
        let finite_pos = [
            ("extent_width", self.extent_width),
            ("extent_height", self.extent_height),
            ("object_size_min", self.object_size_min),
            ("object_size_max", self.object_size_max),
            ("jitter_scale", self.jitter_scale),
            ("feature_scale", self.feature_scale),
        ];
        for (name, v) in finite_pos {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be finite and > 0, got {v}"));
            }
        }
        let finite_nonneg = [
            ("distractor_mix", self.distractor_mix),
            ("position_scale", self.position_scale),
            ("regression_cue", self.regression_cue),
            ("noise_sigma", self.noise_sigma),
        ];
        for (name, v) in finite_nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        let unit = [
            ("distractor_rate", self.distractor_rate),
            ("hardness_min", self.hardness_min),
            ("hardness_max", self.hardness_max),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.hardness_max < self.hardness_min {
            return fail("hardness_max < hardness_min".into());
        }
        if self.object_size_max < self.object_size_min
            || self.object_size_max >= self.extent_width.min(self.extent_height)
        {
            return fail("object size range must be ordered and smaller than the extent".into());
        }
        Ok(())
    }

    pub fn extent(&self) -> (f64, f64) {
        (self.extent_width, self.extent_height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn scene_ids(self, config: &DatasetConfig) -> std::ops::Range<u64> {
        let n = config.num_scenes as u64;
        match self {
            Split::Train => 0..n,
            Split::Test => n..n + config.test_scenes as u64,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtObject {
    /// In `1..=K`; 0 is background.
    pub class_id: usize,
    pub bbox: BBox,
    pub hardness: f64,
}

/// A location that produces object-like features of `class_id` without being
/// an object.
#[derive(Debug, Clone, PartialEq)]
pub struct Distractor {
    pub class_id: usize,
    pub bbox: BBox,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    pub extent: (f64, f64),
    pub objects: Vec<GtObject>,
    pub distractors: Vec<Distractor>,
    pub proposals: Vec<BBox>,
    /// Row-major `proposals.len() x D`.
    pub features: Vec<f32>,
    pub feature_dim: usize,
}

impl Scene {
    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn num_proposals(&self) -> usize {
        self.proposals.len()
    }

    pub fn max_iou(&self, b: &BBox) -> f64 {
        self.objects
            .iter()
            .map(|o| iou(b, &o.bbox))
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.extent;
        let bad = |m: String| Err(Error::Argument(format!("scene {}: {m}", self.scene_id)));
        if self.objects.is_empty() || self.proposals.is_empty() {
            return bad("needs at least one object and one proposal".into());
        }
        if self.features.len() != self.proposals.len() * self.feature_dim {
            return bad("feature matrix does not match proposal count".into());
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return bad("non-finite feature".into());
        }
        for p in &self.proposals {
            if !p.is_valid() || !p.is_within(w, h) {
                return bad(format!("proposal {p:?} outside extent"));
            }
        }
        for o in &self.objects {
            if o.class_id == 0 || !o.bbox.is_valid() || !o.bbox.is_within(w, h) {
                return bad(format!("invalid object {o:?}"));
            }
        }
        Ok(())
    }
}

/// Rounds every coordinate to the nearest `f32` so stored boxes survive the
/// 32-bit file format unchanged.
fn quantize(b: BBox) -> BBox {
    BBox {
        x1: b.x1 as f32 as f64,
        y1: b.y1 as f32 as f64,
        x2: b.x2 as f32 as f64,
        y2: b.y2 as f32 as f64,
    }
}

fn unit_vector(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// The seed-derived constants that turn a box into a feature vector.
#[derive(Debug, Clone)]
pub struct FeatureModel {
    config: DatasetConfig,
    /// `prototypes[c]` for `c` in `1..=K`; index 0 unused.
    prototypes: Vec<Vec<f64>>,
    decoys: Vec<Vec<f64>>,
    /// `D x 4`, row-major.
    cue: Vec<f64>,
}

impl FeatureModel {
    pub fn new(config: &DatasetConfig) -> Self {
        let d = config.feature_dim;
        let k = config.num_classes;
        let mut prototypes = vec![vec![0.0; d]];
        for c in 1..=k {
            let mut rng = SplitMix64::derived(config.seed, &[TAG_PROTOTYPE, c as u64]);
            prototypes.push(unit_vector(&mut rng, d));
        }
        let signature = unit_vector(
            &mut SplitMix64::derived(config.seed, &[TAG_SIGNATURE]),
            d,
        );
        let decoys = prototypes
            .iter()
            .enumerate()
            .map(|(c, p)| {
                if c == 0 {
                    return vec![0.0; d];
                }
                let mut v: Vec<f64> = p
                    .iter()
                    .zip(&signature)
                    .map(|(a, s)| a + config.distractor_mix * s)
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                v
            })
            .collect();
        let mut rng = SplitMix64::derived(config.seed, &[TAG_CUE]);
        let scale = 1.0 / (d as f64).sqrt();
        let cue = (0..d * 4).map(|_| rng.normal() * scale).collect();
        Self {
            config: config.clone(),
            prototypes,
            decoys,
            cue,
        }
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn prototype(&self, class_id: usize) -> &[f64] {
        &self.prototypes[class_id]
    }

    pub fn decoy_prototype(&self, class_id: usize) -> &[f64] {
        &self.decoys[class_id]
    }

    /// Positional encoding of the normalised `(cx, cy, w, h)`, unscaled.
    pub fn positional_encoding(&self, b: &BBox) -> Vec<f64> {
        let (w, h) = self.config.extent();
        let (cx, cy) = b.center();
        let v = [cx / w, cy / h, b.width() / w, b.height() / h];
        (0..self.config.feature_dim)
            .map(|j| {
                let freq = std::f64::consts::PI * (1 + j / 4) as f64;
                (freq * v[j % 4]).sin()
            })
            .collect()
    }

    /// Feature vector of `b` in the context of a scene's objects and distractors.
    pub fn featurize(
        &self,
        scene_id: u64,
        objects: &[GtObject],
        distractors: &[Distractor],
        b: &BBox,
    ) -> Vec<f64> {
        let cfg = &self.config;
        let d = cfg.feature_dim;
        let mut f: Vec<f64> = self
            .positional_encoding(b)
            .into_iter()
            .map(|x| x * cfg.position_scale)
            .collect();
        for o in objects {
            let w = iou(b, &o.bbox);
            if w == 0.0 {
                continue;
            }
            let proto = &self.prototypes[o.class_id];
            let delta = encode_delta(b, &o.bbox)
                .as_array()
                .map(|x| x.clamp(-CUE_DELTA_CLAMP, CUE_DELTA_CLAMP));
            for j in 0..d {
                let row = &self.cue[j * 4..j * 4 + 4];
                let cue: f64 = row.iter().zip(&delta).map(|(r, x)| r * x).sum();
                f[j] += w * (proto[j] + cfg.regression_cue * cue);
            }
        }
        for dist in distractors {
            let w = iou(b, &dist.bbox) * dist.strength;
            if w == 0.0 {
                continue;
            }
            for (fj, pj) in f.iter_mut().zip(&self.decoys[dist.class_id]) {
                *fj += w * pj;
            }
        }
        if cfg.noise_sigma > 0.0 {
            let keys = [
                TAG_NOISE,
                scene_id,
                (b.x1 as f32).to_bits() as u64,
                (b.y1 as f32).to_bits() as u64,
                (b.x2 as f32).to_bits() as u64,
                (b.y2 as f32).to_bits() as u64,
            ];
            let mut rng = SplitMix64::derived(cfg.seed, &keys);
            for fj in f.iter_mut() {
                *fj += cfg.noise_sigma * rng.normal();
            }
        }
        if cfg.feature_scale != 1.0 {
            f.iter_mut().for_each(|x| *x *= cfg.feature_scale);
        }
        f
    }

    pub fn featurize_in(&self, scene: &Scene, b: &BBox) -> Vec<f64> {
        self.featurize(scene.scene_id, &scene.objects, &scene.distractors, b)
    }
}

fn random_box(rng: &mut SplitMix64, cfg: &DatasetConfig, size_lo: f64, size_hi: f64) -> BBox {
    let (ew, eh) = cfg.extent();
    let w = rng.uniform(size_lo, size_hi).min(ew);
    let h = rng.uniform(size_lo, size_hi).min(eh);
    let x1 = rng.uniform(0.0, ew - w);
    let y1 = rng.uniform(0.0, eh - h);
    quantize(BBox {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    })
}

/// A perturbed copy of `b`, clipped to the extent. Retries until the clipped
/// box keeps a reasonable size.
fn jitter(rng: &mut SplitMix64, cfg: &DatasetConfig, b: &BBox) -> BBox {
    let (ew, eh) = cfg.extent();
    let (cx, cy) = b.center();
    loop {
        let s = cfg.jitter_scale;
        let ncx = cx + rng.normal() * s * b.width();
        let ncy = cy + rng.normal() * s * b.height();
        let nw = b.width() * (rng.normal() * s).exp();
        let nh = b.height() * (rng.normal() * s).exp();
        let j = quantize(BBox::from_center(ncx, ncy, nw, nh).clip(ew, eh));
        if j.width() >= 1.0 && j.height() >= 1.0 {
            return j;
        }
    }
}

/// Generates one scene; a pure function of `(config, scene_id)`.
pub fn generate_scene(config: &DatasetConfig, model: &FeatureModel, scene_id: u64) -> Scene {
    let cfg = config;
    let mut rng = SplitMix64::derived(cfg.seed, &[TAG_SCENE, scene_id]);
    let k = cfg.num_classes as u64;
    let n_obj = cfg.objects_min + rng.below((cfg.objects_max - cfg.objects_min + 1) as u64) as usize;

    let mut objects = Vec::with_capacity(n_obj);
    let mut distractors = Vec::new();
    for _ in 0..n_obj {
        let class_id = 1 + rng.below(k) as usize;
        let bbox = random_box(&mut rng, cfg, cfg.object_size_min, cfg.object_size_max);
        let hardness = rng.uniform(cfg.hardness_min, cfg.hardness_max) as f32 as f64;
        if rng.next_f64() < cfg.distractor_rate {
            let other = 1 + ((class_id as u64 - 1 + 1 + rng.below(k - 1)) % k) as usize;
            let site = random_box(&mut rng, cfg, cfg.object_size_min, cfg.object_size_max);
            distractors.push(Distractor {
                class_id: other,
                bbox: site,
                strength: hardness,
            });
        }
        objects.push(GtObject {
            class_id,
            bbox,
            hardness,
        });
    }

    let mut proposals = Vec::with_capacity(cfg.proposals_per_scene);
    for o in &objects {
        for _ in 0..cfg.jitter_per_object {
            proposals.push(jitter(&mut rng, cfg, &o.bbox));
        }
    }
    for dist in &distractors {
        for _ in 0..cfg.jitter_per_object {
            proposals.push(jitter(&mut rng, cfg, &dist.bbox));
        }
    }
    let (lo, hi) = (0.5 * cfg.object_size_min, 1.5 * cfg.object_size_max);
    while proposals.len() < cfg.proposals_per_scene {
        proposals.push(random_box(&mut rng, cfg, lo, hi));
    }
    // Fisher-Yates so proposal order carries no information about its origin.
    for i in (1..proposals.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        proposals.swap(i, j);
    }

    let d = cfg.feature_dim;
    let mut features = Vec::with_capacity(proposals.len() * d);
    for p in &proposals {
        let f = model.featurize(scene_id, &objects, &distractors, p);
        features.extend(f.into_iter().map(|x| x as f32));
    }
    Scene {
        scene_id,
        extent: (cfg.extent_width as f32 as f64, cfg.extent_height as f32 as f64),
        objects,
        distractors,
        proposals,
        features,
        feature_dim: d,
    }
}

/// One split of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub split: Split,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn generate(config: &DatasetConfig, split: Split) -> Result<Self> {
        config.validate()?;
        let model = FeatureModel::new(config);
        let ids: Vec<u64> = split.scene_ids(config).collect();
        let scenes = ids
            .par_iter()
            .map(|&id| generate_scene(config, &model, id))
            .collect();
        Ok(Self {
            config: config.clone(),
            split,
            scenes,
        })
    }

    pub fn feature_model(&self) -> FeatureModel {
        FeatureModel::new(&self.config)
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}
