//! Exposure fusion of bracketed UV frames.
//!
//! Each input gets a per-pixel quality weight (contrast × saturation ×
//! well-exposedness). Weights are normalized across inputs, then the inputs'
//! Laplacian pyramids are blended level by level with the Gaussian pyramids of
//! the weights and collapsed. Pyramids use the separable binomial kernel
//! `(1, 4, 6, 4, 1) / 16`, clamp at the edges and halve dimensions rounding up.

use thiserror::Error;

use crate::model::{ImageRgb, ModelError};

/// Standard deviation of the well-exposedness Gaussian around 0.5.
pub const WELL_EXPOSED_SIGMA: f64 = 0.2;
/// Lower bound applied to every raw weight.
pub const WEIGHT_FLOOR: f64 = 1e-12;

const KERNEL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("nothing to fuse")]
    Empty,
    #[error("exposure {index} is {got:?}, expected {expected:?}")]
    DimensionMismatch { index: usize, expected: (usize, usize), got: (usize, usize) },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Single-channel float raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "plane buffer length");
        Self { width, height, data }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![0.0; width * height])
    }

    fn at(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    pub fn max_abs_diff(&self, other: &Plane) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// R, G, B planes of one image.
pub type RgbPlanes = [Plane; 3];

pub fn to_planes(img: &ImageRgb) -> RgbPlanes {
    let norm = img.to_normalized();
    std::array::from_fn(|c| Plane::new(img.width(), img.height(), norm.iter().map(|p| p[c]).collect()))
}

pub fn from_planes(planes: &RgbPlanes) -> Result<ImageRgb, ModelError> {
    let [r, g, b] = planes;
    let rgb: Vec<[f64; 3]> = (0..r.data.len()).map(|i| [r.data[i], g.data[i], b.data[i]]).collect();
    ImageRgb::from_normalized(r.width, r.height, &rgb)
}

/// Pyramid depth for an image of the given size.
pub fn pyramid_levels(width: usize, height: usize) -> usize {
    let min = width.min(height).max(1);
    let log2 = usize::BITS as usize - 1 - min.leading_zeros() as usize;
    log2.saturating_sub(2).max(1)
}

/// Blur then keep every other sample; output is `ceil(n / 2)` per axis.
fn reduce(p: &Plane) -> Plane {
    let (w, h) = (p.width, p.height);
    let mut rows = Plane::zeros(w.div_ceil(2), h);
    for y in 0..h {
        for ox in 0..rows.width {
            let x = (2 * ox) as isize;
            rows.data[y * rows.width + ox] =
                KERNEL.iter().enumerate().map(|(k, wk)| wk * p.at(x + k as isize - 2, y as isize)).sum();
        }
    }
    let mut out = Plane::zeros(rows.width, h.div_ceil(2));
    for oy in 0..out.height {
        let y = (2 * oy) as isize;
        for x in 0..out.width {
            out.data[oy * out.width + x] =
                KERNEL.iter().enumerate().map(|(k, wk)| wk * rows.at(x as isize, y + k as isize - 2)).sum();
        }
    }
    out
}

/// 1-D expand: `out[i] = 2 Σ_k w[k] in[(i - k) / 2]` over taps where `i - k`
/// is even, with clamped source indices.
fn expand_axis(get: impl Fn(isize) -> f64, i: isize) -> f64 {
    let mut acc = 0.0;
    for (k, wk) in KERNEL.iter().enumerate() {
        let j = i - (k as isize - 2);
        if j.rem_euclid(2) == 0 {
            acc += wk * get(j / 2);
        }
    }
    2.0 * acc
}

fn expand(p: &Plane, width: usize, height: usize) -> Plane {
    let mut rows = Plane::zeros(width, p.height);
    for y in 0..p.height {
        for x in 0..width {
            rows.data[y * width + x] = expand_axis(|j| p.at(j, y as isize), x as isize);
        }
    }
    let mut out = Plane::zeros(width, height);
    for y in 0..height {
        for x in 0..width {
            out.data[y * width + x] = expand_axis(|j| rows.at(x as isize, j), y as isize);
        }
    }
    out
}

pub fn gaussian_pyramid(p: &Plane, levels: usize) -> Vec<Plane> {
    let mut out = vec![p.clone()];
    while out.len() < levels.max(1) {
        let next = reduce(out.last().expect("non-empty"));
        out.push(next);
    }
    out
}

pub fn laplacian_pyramid(p: &Plane, levels: usize) -> Vec<Plane> {
    let gauss = gaussian_pyramid(p, levels);
    let mut out = Vec::with_capacity(gauss.len());
    for l in 0..gauss.len() - 1 {
        let up = expand(&gauss[l + 1], gauss[l].width, gauss[l].height);
        let data = gauss[l].data.iter().zip(&up.data).map(|(a, b)| a - b).collect();
        out.push(Plane::new(gauss[l].width, gauss[l].height, data));
    }
    out.push(gauss.last().expect("non-empty").clone());
    out
}

pub fn collapse(pyramid: &[Plane]) -> Plane {
    let mut cur = pyramid.last().expect("empty pyramid").clone();
    for level in pyramid.iter().rev().skip(1) {
        let up = expand(&cur, level.width, level.height);
        let data = level.data.iter().zip(&up.data).map(|(a, b)| a + b).collect();
        cur = Plane::new(level.width, level.height, data);
    }
    cur
}

pub fn well_exposedness(c: f64) -> f64 {
    (-(c - 0.5).powi(2) / (2.0 * WELL_EXPOSED_SIGMA * WELL_EXPOSED_SIGMA)).exp()
}

/// Raw (unnormalized) quality weight per pixel.
pub fn quality_weights(img: &ImageRgb) -> Plane {
    planes_quality(&to_planes(img))
}

fn planes_quality(planes: &RgbPlanes) -> Plane {
    let [r, g, b] = planes;
    let (w, h) = (r.width, r.height);
    let gray = Plane::new(
        w,
        h,
        (0..w * h).map(|i| 0.299 * r.data[i] + 0.587 * g.data[i] + 0.114 * b.data[i]).collect(),
    );
    let mut out = Plane::zeros(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let lap = gray.at(x - 1, y) + gray.at(x + 1, y) + gray.at(x, y - 1) + gray.at(x, y + 1) - 4.0 * gray.at(x, y);
            let px = [r.data[i], g.data[i], b.data[i]];
            let mean = (px[0] + px[1] + px[2]) / 3.0;
            let sat = (px.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
            let exposed: f64 = px.iter().map(|&c| well_exposedness(c)).product();
            out.data[i] = (lap.abs() * sat * exposed).max(WEIGHT_FLOOR);
        }
    }
    out
}

/// Per-pixel weights normalized to sum to one across inputs.
pub fn normalized_weights(inputs: &[RgbPlanes]) -> Vec<Plane> {
    let mut weights: Vec<Plane> = inputs.iter().map(planes_quality).collect();
    let n = weights[0].data.len();
    for i in 0..n {
        let total: f64 = weights.iter().map(|w| w.data[i]).sum();
        for w in weights.iter_mut() {
            w.data[i] /= total;
        }
    }
    weights
}

/// Pyramid blend of float images; output is clamped to `[0, 1]`.
pub fn fuse_planes(inputs: &[RgbPlanes]) -> Result<RgbPlanes, FusionError> {
    let first = inputs.first().ok_or(FusionError::Empty)?;
    let dims = (first[0].width, first[0].height);
    for (index, p) in inputs.iter().enumerate() {
        if (p[0].width, p[0].height) != dims {
            return Err(FusionError::DimensionMismatch { index, expected: dims, got: (p[0].width, p[0].height) });
        }
    }
    let levels = pyramid_levels(dims.0, dims.1);
    let weights = normalized_weights(inputs);
    let weight_pyrs: Vec<Vec<Plane>> = weights.iter().map(|w| gaussian_pyramid(w, levels)).collect();
    let fused = std::array::from_fn(|c| {
        let mut blended: Vec<Plane> = Vec::new();
        for (input, wp) in inputs.iter().zip(&weight_pyrs) {
            let lp = laplacian_pyramid(&input[c], levels);
            if blended.is_empty() {
                blended = lp.iter().map(|l| Plane::zeros(l.width, l.height)).collect();
            }
            for ((acc, l), wl) in blended.iter_mut().zip(&lp).zip(wp) {
                for ((a, lv), wv) in acc.data.iter_mut().zip(&l.data).zip(&wl.data) {
                    *a += lv * wv;
                }
            }
        }
        let mut out = collapse(&blended);
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    });
    Ok(fused)
}

pub fn fuse_exposures(imgs: &[ImageRgb]) -> Result<ImageRgb, FusionError> {
    let first = imgs.first().ok_or(FusionError::Empty)?;
    for (index, img) in imgs.iter().enumerate() {
        if img.dims() != first.dims() {
            return Err(FusionError::DimensionMismatch { index, expected: first.dims(), got: img.dims() });
        }
    }
    let planes: Vec<RgbPlanes> = imgs.iter().map(to_planes).collect();
    Ok(from_planes(&fuse_planes(&planes)?)?)
}
