//! The region head: one ReLU hidden layer feeding a `(K+1)`-way softmax
//! classifier and a box-delta regressor, trained with
//! `cls + lambda * [u >= 1] * smooth_l1`.
//!
//! Parameters are kept at `f32` precision (stored as `f64`): every SGD step
//! rounds its result, so snapshots written as 32-bit floats restore a model
//! exactly.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{BoxDelta, DeltaNormalizer};
use crate::rng::SplitMix64;

/// Floor applied to `p_u` before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadDims {
    pub feature_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    /// One shared 4-vector of deltas instead of one per class.
    pub class_agnostic: bool,
}

impl HeadDims {
    pub fn new(feature_dim: usize, hidden: usize, num_classes: usize) -> Self {
        Self {
            feature_dim,
            hidden,
            num_classes,
            class_agnostic: false,
        }
    }

    pub fn num_outputs(&self) -> usize {
        self.num_classes + 1
    }

    pub fn loc_outputs(&self) -> usize {
        if self.class_agnostic {
            4
        } else {
            4 * self.num_classes
        }
    }

    /// Offset of class `u`'s delta slot (`u >= 1`).
    pub fn loc_slot(&self, u: usize) -> usize {
        if self.class_agnostic {
            0
        } else {
            4 * (u - 1)
        }
    }
}

/// The six weight blocks of the head. Used for parameters, gradients and
/// momentum buffers alike.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors {
    /// `H x D`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `(K+1) x H`
    pub wc: Vec<f64>,
    pub bc: Vec<f64>,
    /// `L x H`, `L` = 4K or 4
    pub wl: Vec<f64>,
    pub bl: Vec<f64>,
}

impl Tensors {
    pub fn zeros(d: &HeadDims) -> Self {
        Self {
            w1: vec![0.0; d.hidden * d.feature_dim],
            b1: vec![0.0; d.hidden],
            wc: vec![0.0; d.num_outputs() * d.hidden],
            bc: vec![0.0; d.num_outputs()],
            wl: vec![0.0; d.loc_outputs() * d.hidden],
            bl: vec![0.0; d.loc_outputs()],
        }
    }

    pub fn blocks(&self) -> [&Vec<f64>; 6] {
        [&self.w1, &self.b1, &self.wc, &self.bc, &self.wl, &self.bl]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.wc,
            &mut self.bc,
            &mut self.wl,
            &mut self.bl,
        ]
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.blocks().into_iter().flat_map(|b| b.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.blocks_mut().into_iter().flat_map(|b| b.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensors) -> bool {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .all(|(a, b)| a.len() == b.len())
    }

    pub fn add_assign(&mut self, other: &Tensors) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values_mut().for_each(|v| *v *= s);
    }

    fn round_to_f32(&mut self) {
        self.values_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub dims: HeadDims,
    /// Weight of the localisation term.
    pub lambda: f64,
    /// Standardisation applied to regression targets; identity unless enabled.
    pub normalizer: DeltaNormalizer,
    pub weights: Tensors,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients(pub Tensors);

impl HeadGradients {
    pub fn zeros(d: &HeadDims) -> Self {
        Self(Tensors::zeros(d))
    }

    pub fn accumulate(&mut self, other: &HeadGradients) {
        self.0.add_assign(&other.0);
    }
}

/// Forward results for one region.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// Softmax over background (index 0) and the K classes.
    pub probs: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl HeadOutput {
    /// Predicted delta for class `u >= 1` (in normalised target space).
    pub fn delta(&self, dims: &HeadDims, u: usize) -> BoxDelta {
        let s = dims.loc_slot(u);
        BoxDelta::from_slice(&self.deltas[s..s + 4])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoILoss {
    pub total: f64,
    pub cls: f64,
    pub loc: f64,
    pub label: usize,
    /// `p_u` hit the log floor.
    pub clamped: bool,
}

impl HeadParams {
    /// Hidden weights ~ N(0, 1/D), zero biases and zero output layers, so the
    /// initial class distribution is exactly uniform.
    pub fn init(dims: HeadDims, lambda: f64, seed: u64) -> Self {
        let mut weights = Tensors::zeros(&dims);
        let mut rng = SplitMix64::new(seed);
        let scale = 1.0 / (dims.feature_dim as f64).sqrt();
        weights.w1.iter_mut().for_each(|w| *w = rng.normal() * scale);
        weights.round_to_f32();
        Self {
            dims,
            lambda,
            normalizer: DeltaNormalizer::identity(),
            weights,
        }
    }

    pub fn zeros(dims: HeadDims, lambda: f64) -> Self {
        Self {
            dims,
            lambda,
            normalizer: DeltaNormalizer::identity(),
            weights: Tensors::zeros(&dims),
        }
    }

    fn check_feature<T>(&self, feature: &[T]) -> Result<()> {
        if feature.len() != self.dims.feature_dim {
            return Err(Error::Dimension(format!(
                "feature has {} entries, head expects {}",
                feature.len(),
                self.dims.feature_dim
            )));
        }
        Ok(())
    }

    fn hidden_pre<T: Copy + Into<f64>>(&self, x: &[T]) -> Vec<f64> {
        let d = self.dims.feature_dim;
        let w = &self.weights;
        (0..self.dims.hidden)
            .map(|j| {
                let row = &w.w1[j * d..(j + 1) * d];
                w.b1[j] + row.iter().zip(x).map(|(a, &b)| a * b.into()).sum::<f64>()
            })
            .collect()
    }

    fn heads(&self, hidden: &[f64]) -> HeadOutput {
        let h = self.dims.hidden;
        let w = &self.weights;
        let affine = |m: &[f64], b: &[f64]| -> Vec<f64> {
            b.iter()
                .enumerate()
                .map(|(i, bi)| bi + m[i * h..(i + 1) * h].iter().zip(hidden).map(|(a, b)| a * b).sum::<f64>())
                .collect()
        };
        let logits = affine(&w.wc, &w.bc);
        let deltas = affine(&w.wl, &w.bl);
        HeadOutput {
            probs: softmax(&logits),
            deltas,
        }
    }

    pub fn forward<T: Copy + Into<f64>>(&self, feature: &[T]) -> Result<HeadOutput> {
        self.check_feature(feature)?;
        let hidden: Vec<f64> = self.hidden_pre(feature).into_iter().map(relu).collect();
        Ok(self.heads(&hidden))
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn backward<T: Copy + Into<f64>>(
        &self,
        feature: &[T],
        label: usize,
        target: Option<&BoxDelta>,
    ) -> Result<(RoILoss, HeadGradients)> {
        let mut g = HeadGradients::zeros(&self.dims);
        let loss = self.backward_into(feature, label, target, &mut g)?;
        Ok((loss, g))
    }

    /// Like [`HeadParams::backward`] but adds the gradient into `grads`.
    pub fn backward_into<T: Copy + Into<f64>>(
        &self,
        feature: &[T],
        label: usize,
        target: Option<&BoxDelta>,
        grads: &mut HeadGradients,
    ) -> Result<RoILoss> {
        self.check_feature(feature)?;
        let dims = &self.dims;
        let (d, h) = (dims.feature_dim, dims.hidden);
        let pre = self.hidden_pre(feature);
        let hidden: Vec<f64> = pre.iter().copied().map(relu).collect();
        let out = self.heads(&hidden);
        let loss = loss(self, &out, label, target)?;

        let gt = &mut grads.0;
        let w = &self.weights;

        // d cls / d logits = p - onehot(u)
        let mut dlogits = out.probs;
        dlogits[label] -= 1.0;
        let mut ddeltas = vec![0.0; dims.loc_outputs()];
        if label >= 1 {
            let t = target.expect("checked by loss()").as_array();
            let s = dims.loc_slot(label);
            for k in 0..4 {
                ddeltas[s + k] = self.lambda * smooth_l1_grad(out.deltas[s + k] - t[k]);
            }
        }

        let mut dhidden = vec![0.0; h];
        for (i, &dl) in dlogits.iter().enumerate() {
            gt.bc[i] += dl;
            if dl == 0.0 {
                continue;
            }
            let wrow = &w.wc[i * h..(i + 1) * h];
            let grow = &mut gt.wc[i * h..(i + 1) * h];
            for j in 0..h {
                grow[j] += dl * hidden[j];
                dhidden[j] += wrow[j] * dl;
            }
        }
        for (i, &dd) in ddeltas.iter().enumerate() {
            if dd == 0.0 {
                continue;
            }
            gt.bl[i] += dd;
            let wrow = &w.wl[i * h..(i + 1) * h];
            let grow = &mut gt.wl[i * h..(i + 1) * h];
            for j in 0..h {
                grow[j] += dd * hidden[j];
                dhidden[j] += wrow[j] * dd;
            }
        }
        for j in 0..h {
            let dpre = if pre[j] > 0.0 { dhidden[j] } else { 0.0 };
            if dpre == 0.0 {
                continue;
            }
            gt.b1[j] += dpre;
            let grow = &mut gt.w1[j * d..(j + 1) * d];
            for (g, &x) in grow.iter_mut().zip(feature) {
                *g += dpre * x.into();
            }
        }
        Ok(loss)
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Multi-task loss of one region. `target` must be present exactly when `label >= 1`.
pub fn loss(
    params: &HeadParams,
    out: &HeadOutput,
    label: usize,
    target: Option<&BoxDelta>,
) -> Result<RoILoss> {
    let dims = &params.dims;
    if label > dims.num_classes {
        return Err(Error::Argument(format!(
            "label {label} outside [0, {}]",
            dims.num_classes
        )));
    }
    if (label >= 1) != target.is_some() {
        return Err(Error::Argument(format!(
            "label {label} requires {} box target",
            if label >= 1 { "a" } else { "no" }
        )));
    }
    let p = out.probs[label];
    let clamped = p < PROB_FLOOR;
    let cls = -p.max(PROB_FLOOR).ln();
    let loc = match target {
        Some(t) => {
            let s = dims.loc_slot(label);
            t.as_array()
                .iter()
                .enumerate()
                .map(|(k, tk)| smooth_l1(out.deltas[s + k] - tk))
                .sum()
        }
        None => 0.0,
    };
    Ok(RoILoss {
        total: cls + if label >= 1 { params.lambda * loc } else { 0.0 },
        cls,
        loc,
        label,
        clamped,
    })
}

/// Heavy-ball momentum state: `v = mu * v + g; p = p - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    pub mu: f64,
    pub velocity: Tensors,
}

impl Momentum {
    pub fn new(dims: &HeadDims, mu: f64) -> Self {
        Self {
            mu,
            velocity: Tensors::zeros(dims),
        }
    }
}

/// One SGD update. A non-finite gradient leaves parameters and momentum untouched.
pub fn sgd_step(
    params: &mut HeadParams,
    grads: &HeadGradients,
    lr: f64,
    momentum: &mut Momentum,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Argument(format!("learning rate must be > 0, got {lr}")));
    }
    if !grads.0.same_shape(&params.weights) || !momentum.velocity.same_shape(&params.weights) {
        return Err(Error::Dimension("gradient shape does not match parameters".into()));
    }
    if !grads.0.is_finite() {
        return Err(Error::Argument("non-finite gradient; update skipped".into()));
    }
    let mu = momentum.mu;
    for ((p, v), g) in params
        .weights
        .values_mut()
        .zip(momentum.velocity.values_mut())
        .zip(grads.0.values())
    {
        *v = (mu * *v + g) as f32 as f64;
        *p = (*p - lr * *v) as f32 as f64;
    }
    Ok(())
}

// Snapshot file: text header, then the parameter blocks (w1, b1, wc, bc, wl,
// bl) as little-endian f32, then the momentum velocity in the same layout
// when `has_velocity 1`.

pub const SNAPSHOT_VERSION: u32 = 1;
const SNAPSHOT_MAGIC: &str = "OHEM-HEAD";

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub params: HeadParams,
    pub momentum: Option<Momentum>,
}

impl Snapshot {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(std::fs::File::open(path)?))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let p = &self.params;
        let d = &p.dims;
        writeln!(w, "{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}")?;
        writeln!(w, "feature_dim {}", d.feature_dim)?;
        writeln!(w, "hidden {}", d.hidden)?;
        writeln!(w, "num_classes {}", d.num_classes)?;
        writeln!(w, "class_agnostic {}", d.class_agnostic as u8)?;
        writeln!(w, "lambda {:?}", p.lambda)?;
        writeln!(w, "iteration {}", self.iteration)?;
        let join = |v: &[f64; 4]| v.map(|x| format!("{x:?}")).join(" ");
        writeln!(w, "normalizer_mean {}", join(&p.normalizer.mean))?;
        writeln!(w, "normalizer_std {}", join(&p.normalizer.std))?;
        match &self.momentum {
            Some(m) => writeln!(w, "momentum {:?}\nhas_velocity 1", m.mu)?,
            None => writeln!(w, "has_velocity 0")?,
        }
        writeln!(w, "end_header")?;
        let mut buf = Vec::with_capacity(p.weights.len() * 8);
        let mut put = |t: &Tensors| {
            for v in t.values() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        };
        put(&p.weights);
        if let Some(m) = &self.momentum {
            put(&m.velocity);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        let mut line_no = 0;
        loop {
            line_no += 1;
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::parse(format!("header line {line_no}"), "unexpected end of file"));
            }
            let line = line.trim_end();
            if line_no == 1 {
                let mut it = line.split_whitespace();
                if it.next() != Some(SNAPSHOT_MAGIC) {
                    return Err(Error::parse("header line 1", "not a head snapshot"));
                }
                let v = it.next().unwrap_or("");
                if v != SNAPSHOT_VERSION.to_string() {
                    return Err(Error::Version {
                        found: v.into(),
                        expected: SNAPSHOT_VERSION.to_string(),
                    });
                }
                continue;
            }
            if line == "end_header" {
                break;
            }
            let (k, v) = line.split_once(' ').ok_or_else(|| {
                Error::parse(format!("header line {line_no}"), format!("malformed line {line:?}"))
            })?;
            fields.insert(k.to_string(), (line_no, v.to_string()));
        }
        fn get<T: std::str::FromStr>(
            fields: &std::collections::HashMap<String, (usize, String)>,
            key: &str,
        ) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            let (ln, v) = fields
                .get(key)
                .ok_or_else(|| Error::parse("header", format!("missing key {key}")))?;
            v.trim()
                .parse()
                .map_err(|e| Error::parse(format!("header line {ln}"), format!("{key}: {e}")))
        }
        let four = |key: &str| -> Result<[f64; 4]> {
            let s: String = get(&fields, key)?;
            let v: Vec<f64> = s
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse("header", format!("{key}: {e}")))?;
            v.try_into()
                .map_err(|_| Error::parse("header", format!("{key}: expected 4 values")))
        };
        let dims = HeadDims {
            feature_dim: get(&fields, "feature_dim")?,
            hidden: get(&fields, "hidden")?,
            num_classes: get(&fields, "num_classes")?,
            class_agnostic: get::<u8>(&fields, "class_agnostic")? != 0,
        };
        let normalizer = DeltaNormalizer {
            mean: four("normalizer_mean")?,
            std: four("normalizer_std")?,
        };
        let mut params = HeadParams {
            dims,
            lambda: get(&fields, "lambda")?,
            normalizer,
            weights: Tensors::zeros(&dims),
        };
        let mut take = |t: &mut Tensors, what: &str| -> Result<()> {
            for (i, v) in t.values_mut().enumerate() {
                let mut b = [0u8; 4];
                r.read_exact(&mut b).map_err(|_| {
                    Error::parse(format!("{what} payload value {i}"), "truncated payload")
                })?;
                *v = f32::from_le_bytes(b) as f64;
            }
            Ok(())
        };
        take(&mut params.weights, "parameter")?;
        let momentum = if get::<u8>(&fields, "has_velocity")? != 0 {
            let mut m = Momentum::new(&dims, get(&fields, "momentum")?);
            take(&mut m.velocity, "velocity")?;
            Some(m)
        } else {
            None
        };
        Ok(Self {
            iteration: get(&fields, "iteration")?,
            params,
            momentum,
        })
    }
}
