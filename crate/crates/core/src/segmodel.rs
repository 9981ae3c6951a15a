//! Linear softmax pixel classifier trained on extracted labels.
//!
//! Each pixel maps to `[r, g, b, sin h, cos h, s, v, 1]`. Training is
//! full-batch gradient descent from zero on mean cross-entropy plus
//! `l2 * ||W||²`. A step that would raise the loss is retried at half the
//! step size, so the recorded loss never increases.

use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorops::rgb_to_hsv;
use crate::model::{ImageRgb, Mask, ModelError, PairedSample};

pub const FEATURES: usize = 8;
pub const MAGIC: &[u8; 8] = b"LUVSEG01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SegError {
    #[error("no labeled pixels to train on")]
    EmptyLabels,
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("bad model file: {0}")]
    BadModel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type PixelFeatures = [f64; FEATURES];

pub fn features(rgb: [f64; 3]) -> PixelFeatures {
    let hsv = rgb_to_hsv(rgb[0], rgb[1], rgb[2]);
    let (s, c) = hsv.h.to_radians().sin_cos();
    [rgb[0], rgb[1], rgb[2], s, c, hsv.s, hsv.v, 1.0]
}

fn pixel_features(p: [u8; 3]) -> PixelFeatures {
    features(p.map(|c| c as f64 / 255.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub learning_rate: f64,
    pub iterations: usize,
    pub l2: f64,
    /// Seeds pixel subsampling only.
    pub seed: u64,
    /// Fraction of each image's pixels used for training, in (0, 1].
    pub subsample: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self { learning_rate: 4.0, iterations: 300, l2: 1e-5, seed: 0, subsample: 0.05 }
    }
}

impl Hyper {
    fn validate(&self) -> Result<(), SegError> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && self.l2.is_finite()
            && self.l2 >= 0.0
            && self.subsample > 0.0
            && self.subsample <= 1.0;
        if ok { Ok(()) } else { Err(SegError::InvalidHyper(format!("{self:?}"))) }
    }
}

/// Row-major `(classes × FEATURES)` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub classes: usize,
    pub weights: Vec<f64>,
    pub hyper: Hyper,
}

impl ModelParams {
    pub fn zeros(classes: usize, hyper: Hyper) -> Self {
        Self { classes, weights: vec![0.0; classes * FEATURES], hyper }
    }

    pub fn scores(&self, x: &PixelFeatures) -> Vec<f64> {
        self.weights.chunks_exact(FEATURES).map(|w| dot(w, x)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.weights.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        out.extend_from_slice(&(FEATURES as u32).to_le_bytes());
        let h = &self.hyper;
        out.extend_from_slice(&h.learning_rate.to_le_bytes());
        out.extend_from_slice(&(h.iterations as u64).to_le_bytes());
        out.extend_from_slice(&h.l2.to_le_bytes());
        out.extend_from_slice(&h.seed.to_le_bytes());
        out.extend_from_slice(&h.subsample.to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SegError> {
        let mut r = Reader(bytes);
        if r.take(8)? != MAGIC {
            return Err(SegError::BadModel("wrong magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(SegError::BadModel(format!("unsupported version {version}")));
        }
        let classes = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if cols != FEATURES || classes == 0 || classes > 256 {
            return Err(SegError::BadModel(format!("unexpected shape {classes}x{cols}")));
        }
        let hyper = Hyper {
            learning_rate: r.f64()?,
            iterations: r.u64()? as usize,
            l2: r.f64()?,
            seed: r.u64()?,
            subsample: r.f64()?,
        };
        let weights = (0..classes * FEATURES).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        if !r.0.is_empty() {
            return Err(SegError::BadModel(format!("{} trailing bytes", r.0.len())));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(SegError::BadModel("non-finite weight".into()));
        }
        Ok(Self { classes, weights, hyper })
    }

    pub fn save(&self, path: &Path) -> Result<(), SegError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, SegError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], SegError> {
        if self.0.len() < n {
            return Err(SegError::BadModel("truncated".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, SegError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, SegError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, SegError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub x: Vec<PixelFeatures>,
    pub y: Vec<u8>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Mean cross-entropy plus `l2 * ||W||²`, and its gradient.
pub fn loss_and_gradient(weights: &[f64], classes: usize, batch: &Batch, l2: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; weights.len()];
    let mut loss = 0.0;
    let mut z = vec![0.0; classes];
    for (x, &y) in batch.x.iter().zip(&batch.y) {
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = dot(&weights[k * FEATURES..(k + 1) * FEATURES], x);
        }
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let log_sum = m + sum.ln();
        loss += log_sum - z[y as usize];
        for k in 0..classes {
            let r = (z[k] - log_sum).exp() - (k == y as usize) as u8 as f64;
            for (g, xi) in grad[k * FEATURES..(k + 1) * FEATURES].iter_mut().zip(x) {
                *g += r * xi;
            }
        }
    }
    let n = batch.len().max(1) as f64;
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    loss += l2 * weights.iter().map(|w| w * w).sum::<f64>();
    for (g, w) in grad.iter_mut().zip(weights) {
        *g += 2.0 * l2 * w;
    }
    (loss, grad)
}

fn id_hash(id: &str) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    id.hash(&mut h);
    h.finish()
}

/// Training pixels, in sample-id order. Each sample's subset depends only on
/// the seed and its id.
pub fn build_batch(samples: &[PairedSample], hyper: &Hyper) -> (Batch, usize) {
    let mut labeled: Vec<&PairedSample> = samples.iter().filter(|s| s.labels.is_some()).collect();
    labeled.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut batch = Batch::default();
    let mut max_class = 0u8;
    for s in labeled {
        let mask = &s.labels.as_ref().expect("filtered").mask;
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ id_hash(&s.sample_id));
        for (p, &c) in s.std_image.pixels().iter().zip(mask.classes()) {
            if hyper.subsample >= 1.0 || rng.random::<f64>() < hyper.subsample {
                batch.x.push(pixel_features(*p));
                batch.y.push(c);
                max_class = max_class.max(c);
            }
        }
    }
    (batch, max_class as usize + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub params: ModelParams,
    /// Loss after each accepted step, starting with the initial loss.
    pub loss_trace: Vec<f64>,
    pub pixels: usize,
}

/// Trains on the standard images and masks of all labeled samples.
pub fn fit(samples: &[PairedSample], hyper: Hyper) -> Result<FitReport, SegError> {
    hyper.validate()?;
    let (batch, classes) = build_batch(samples, &hyper);
    if batch.is_empty() {
        return Err(SegError::EmptyLabels);
    }
    Ok(fit_batch(&batch, classes, hyper))
}

pub fn fit_batch(batch: &Batch, classes: usize, hyper: Hyper) -> FitReport {
    let mut params = ModelParams::zeros(classes, hyper);
    let (mut loss, mut grad) = loss_and_gradient(&params.weights, classes, batch, hyper.l2);
    let mut trace = vec![loss];
    let mut lr = hyper.learning_rate;
    'outer: for _ in 0..hyper.iterations {
        loop {
            let cand: Vec<f64> = params.weights.iter().zip(&grad).map(|(w, g)| w - lr * g).collect();
            let (l, g) = loss_and_gradient(&cand, classes, batch, hyper.l2);
            if l <= loss {
                params.weights = cand;
                loss = l;
                grad = g;
                break;
            }
            lr *= 0.5;
            if lr < 1e-12 {
                break 'outer;
            }
        }
        trace.push(loss);
    }
    FitReport { params, loss_trace: trace, pixels: batch.len() }
}

/// Per-pixel argmax; ties go to the lower class.
pub fn predict(params: &ModelParams, img: &ImageRgb) -> Mask {
    let mut cache = std::collections::HashMap::new();
    let classes = img
        .pixels()
        .iter()
        .map(|p| {
            *cache.entry(*p).or_insert_with(|| {
                let s = params.scores(&pixel_features(*p));
                let mut best = 0;
                for k in 1..s.len() {
                    if s[k] > s[best] {
                        best = k;
                    }
                }
                best as u8
            })
        })
        .collect();
    Mask::new(img.width(), img.height(), classes).expect("image dimensions are valid")
}

/// Fraction of batch pixels whose argmax matches the label.
pub fn accuracy(params: &ModelParams, batch: &Batch) -> f64 {
    let hits = batch
        .x
        .iter()
        .zip(&batch.y)
        .filter(|(x, y)| {
            let s = params.scores(x);
            let best = (1..s.len()).fold(0, |b, k| if s[k] > s[b] { k } else { b });
            best == **y as usize
        })
        .count();
    hits as f64 / batch.len().max(1) as f64
}
