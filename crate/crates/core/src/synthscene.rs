//! Synthetic paired scenes with exact ground truth.
//!
//! A [`SceneSpec`] is a list of objects drawn in order over a textured
//! background. Every object has a base color (what the camera sees under
//! ordinary light) and, when painted, a fluorescent color it emits under UV.
//! Paint is invisible in [`render_standard`]; [`render_uv`] dims everything
//! unpainted by [`UV_DIM_FACTOR`] and lets painted regions glow. Ground truth
//! comes from the same rasterization, never from thresholding.
//!
//! Pixel `(x, y)` covers `[x, x + 1) × [y, y + 1)` and is inside a shape when
//! its center is.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::colorops::rgb_to_hsv;
use crate::model::{CalibrationProfile, ClassSpec, HsvBand, ImageRgb, Keypoint, LabelSet, Mask, PaintType};

/// Brightness of unpainted material under UV relative to ordinary light.
pub const UV_DIM_FACTOR: f64 = 0.15;
/// Exposure at which radiance maps one-to-one onto pixel values.
pub const NOMINAL_EXPOSURE: f64 = 50.0;
/// Faint blue emitted by white materials under UV when enabled.
pub const WHITE_FLUORESCENCE: [f64; 3] = [0.06, 0.10, 0.34];

pub const CORNER_CLASS: u8 = 1;
pub const CABLE_CLASS: u8 = 2;
pub const NEEDLE_CLASS: u8 = 3;

pub const CORNER_FLUOR: [f64; 3] = [0.15, 0.85, 0.25];
pub const CABLE_FLUOR: [f64; 3] = [0.85, 0.78, 0.12];
pub const NEEDLE_FLUOR: [f64; 3] = [0.88, 0.10, 0.16];

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Disk { center: Point, radius: f64 },
    Polygon { points: Vec<Point> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "archetype", rename_all = "snake_case")]
pub enum Geometry {
    /// Quadrilateral cloth; painted marks are disks centered on the corners.
    Towel { corners: [Point; 4], mark_radius: f64 },
    /// Polyline swept by a disk of diameter `thickness`.
    Cable { points: Vec<Point>, thickness: f64 },
    /// Half circle swept by a disk of diameter `thickness`.
    Needle { center: Point, radius: f64, start_angle: f64, thickness: f64 },
    Distractor { shape: Shape },
}

impl Geometry {
    pub fn archetype(&self) -> Archetype {
        match self {
            Geometry::Towel { .. } => Archetype::Towel,
            Geometry::Cable { .. } => Archetype::Cable,
            Geometry::Needle { .. } => Archetype::Needle,
            Geometry::Distractor { .. } => Archetype::Distractor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    Towel,
    Cable,
    Needle,
    Distractor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub geometry: Geometry,
    pub painted: bool,
    pub class_id: u8,
    pub base_color: [f64; 3],
    pub fluor_color: [f64; 3],
}

impl SceneObject {
    fn is_white(&self) -> bool {
        self.base_color.iter().all(|&c| c >= 0.8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub color: [f64; 3],
    /// Relative amplitude of the sinusoidal texture.
    pub amplitude: f64,
    /// Texture period in pixels.
    pub period: f64,
}

impl Background {
    fn at(&self, x: usize, y: usize) -> [f64; 3] {
        let t = std::f64::consts::TAU / self.period.max(1.0);
        let m = 1.0 + self.amplitude * ((x as f64 + 0.5) * t).sin() * ((y as f64 + 0.5) * t * 0.7).cos();
        self.color.map(|c| (c * m).clamp(0.0, 1.0))
    }
}

/// Fluorescence and sensor response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureResponse {
    pub nominal_exposure: f64,
    /// Multiplier on fluorescent emission.
    pub uv_gain: f64,
}

impl Default for ExposureResponse {
    fn default() -> Self {
        Self { nominal_exposure: NOMINAL_EXPOSURE, uv_gain: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub background: Background,
    /// White materials fluoresce faint blue under UV.
    pub ambient_fluorescence: bool,
    /// Standard deviation of additive radiance noise, clipped at ±3σ.
    pub noise_sigma: f64,
    pub response: ExposureResponse,
}

/// Scene families produced by [`SceneSpec::generate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// Towel with four painted corner marks.
    Towel,
    /// One or two painted cables.
    Cable,
    /// Painted needle among red decoys.
    Needle,
    /// Towel, cable and needle together.
    Mixed,
    /// A weakly and a strongly fluorescing patch, for exposure bracketing.
    Bracket,
}

impl std::str::FromStr for SceneKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "towel" => Ok(Self::Towel),
            "cable" => Ok(Self::Cable),
            "needle" => Ok(Self::Needle),
            "mixed" => Ok(Self::Mixed),
            "bracket" => Ok(Self::Bracket),
            other => Err(format!("unknown scene kind {other:?}")),
        }
    }
}

// ---------------------------------------------------------------------------
// Rasterization

fn for_each_in_box(w: usize, h: usize, min: Point, max: Point, mut f: impl FnMut(usize, usize, f64, f64)) {
    let x0 = (min[0].floor().max(0.0)) as usize;
    let y0 = (min[1].floor().max(0.0)) as usize;
    let x1 = (max[0].ceil().min(w as f64)).max(0.0) as usize;
    let y1 = (max[1].ceil().min(h as f64)).max(0.0) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            f(x, y, x as f64 + 0.5, y as f64 + 0.5);
        }
    }
}

fn fill_disk(buf: &mut [u32], w: usize, h: usize, c: Point, r: f64, id: u32) {
    for_each_in_box(w, h, [c[0] - r, c[1] - r], [c[0] + r, c[1] + r], |x, y, px, py| {
        if (px - c[0]).powi(2) + (py - c[1]).powi(2) <= r * r {
            buf[y * w + x] = id;
        }
    });
}

fn point_in_polygon(p: Point, poly: &[Point]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn fill_polygon(buf: &mut [u32], w: usize, h: usize, poly: &[Point], id: u32) {
    if poly.len() < 3 {
        return;
    }
    let min = poly.iter().fold([f64::INFINITY; 2], |m, p| [m[0].min(p[0]), m[1].min(p[1])]);
    let max = poly.iter().fold([f64::NEG_INFINITY; 2], |m, p| [m[0].max(p[0]), m[1].max(p[1])]);
    for_each_in_box(w, h, min, max, |x, y, px, py| {
        if point_in_polygon([px, py], poly) {
            buf[y * w + x] = id;
        }
    });
}

fn segment_distance2(p: Point, a: Point, b: Point) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 { (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let q = [a[0] + t * d[0] - p[0], a[1] + t * d[1] - p[1]];
    q[0] * q[0] + q[1] * q[1]
}

fn fill_polyline(buf: &mut [u32], w: usize, h: usize, pts: &[Point], thickness: f64, id: u32) {
    let r = thickness / 2.0;
    for seg in pts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let min = [a[0].min(b[0]) - r, a[1].min(b[1]) - r];
        let max = [a[0].max(b[0]) + r, a[1].max(b[1]) + r];
        for_each_in_box(w, h, min, max, |x, y, px, py| {
            if segment_distance2([px, py], a, b) <= r * r {
                buf[y * w + x] = id;
            }
        });
    }
    if pts.len() == 1 {
        fill_disk(buf, w, h, pts[0], r, id);
    }
}

/// Points along a needle's half circle.
pub fn needle_polyline(center: Point, radius: f64, start_angle: f64) -> Vec<Point> {
    const SEGMENTS: usize = 48;
    (0..=SEGMENTS)
        .map(|i| {
            let a = start_angle + std::f64::consts::PI * i as f64 / SEGMENTS as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

/// What a rasterized pixel is made of.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    pub object: usize,
    /// Index of the towel corner mark, if this is one.
    pub mark: Option<usize>,
    pub base: [f64; 3],
    /// Fluorescent emission and class when painted.
    pub paint: Option<([f64; 3], u8)>,
    pub white: bool,
}

/// Per-pixel material indices. `u32::MAX` is background.
#[derive(Debug, Clone)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<u32>,
    pub materials: Vec<Material>,
}

impl SceneSpec {
    pub fn rasterize(&self) -> Raster {
        let (w, h) = (self.width, self.height);
        let mut ids = vec![u32::MAX; w * h];
        let mut materials = Vec::new();
        for (index, obj) in self.objects.iter().enumerate() {
            let paint = obj.painted.then_some((obj.fluor_color, obj.class_id));
            let body = Material { object: index, mark: None, base: obj.base_color, paint, white: obj.is_white() };
            match &obj.geometry {
                Geometry::Towel { corners, mark_radius } => {
                    let id = materials.len() as u32;
                    materials.push(Material { paint: None, ..body });
                    fill_polygon(&mut ids, w, h, corners, id);
                    for (k, c) in corners.iter().enumerate() {
                        let id = materials.len() as u32;
                        materials.push(Material { mark: Some(k), ..body });
                        fill_disk(&mut ids, w, h, *c, *mark_radius, id);
                    }
                }
                Geometry::Cable { points, thickness } => {
                    let id = materials.len() as u32;
                    materials.push(body);
                    fill_polyline(&mut ids, w, h, points, *thickness, id);
                }
                Geometry::Needle { center, radius, start_angle, thickness } => {
                    let id = materials.len() as u32;
                    materials.push(body);
                    fill_polyline(&mut ids, w, h, &needle_polyline(*center, *radius, *start_angle), *thickness, id);
                }
                Geometry::Distractor { shape } => {
                    let id = materials.len() as u32;
                    materials.push(body);
                    match shape {
                        Shape::Disk { center, radius } => fill_disk(&mut ids, w, h, *center, *radius, id),
                        Shape::Polygon { points } => fill_polygon(&mut ids, w, h, points, id),
                    }
                }
            }
        }
        Raster { width: w, height: h, ids, materials }
    }

    fn material_at<'a>(&self, raster: &'a Raster, i: usize) -> Option<&'a Material> {
        raster.ids.get(i).and_then(|&id| raster.materials.get(id as usize))
    }

    fn noise_rng(&self, stream: u64, exposure: f64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ stream ^ exposure.to_bits().rotate_left(17))
    }

    /// Adds clipped noise to radiance, scales by exposure, quantizes.
    fn finish(&self, radiance: Vec<[f64; 3]>, exposure: f64, stream: u64) -> ImageRgb {
        let scale = (exposure / self.response.nominal_exposure).max(0.0);
        let sigma = self.noise_sigma.max(0.0);
        let mut out = radiance;
        if sigma > 0.0 && scale > 0.0 {
            let mut rng = self.noise_rng(stream, exposure);
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            for px in out.iter_mut() {
                for c in px.iter_mut() {
                    let n: f64 = normal.sample(&mut rng);
                    *c += n.clamp(-3.0 * sigma, 3.0 * sigma);
                }
            }
        }
        for px in out.iter_mut() {
            for c in px.iter_mut() {
                *c = (*c * scale).clamp(0.0, 1.0);
            }
        }
        ImageRgb::from_normalized(self.width, self.height, &out).expect("scene dimensions are valid")
    }

    /// Ordinary-light radiance before noise and exposure.
    pub fn standard_radiance(&self) -> Vec<[f64; 3]> {
        let raster = self.rasterize();
        (0..self.width * self.height)
            .map(|i| match self.material_at(&raster, i) {
                Some(m) => m.base,
                None => self.background.at(i % self.width, i / self.width),
            })
            .collect()
    }

    pub fn uv_radiance(&self) -> Vec<[f64; 3]> {
        let raster = self.rasterize();
        let gain = self.response.uv_gain;
        (0..self.width * self.height)
            .map(|i| match self.material_at(&raster, i) {
                Some(Material { paint: Some((fluor, _)), .. }) => fluor.map(|c| c * gain),
                Some(m) if m.white && self.ambient_fluorescence => WHITE_FLUORESCENCE,
                Some(m) => m.base.map(|c| c * UV_DIM_FACTOR),
                None => self.background.at(i % self.width, i / self.width).map(|c| c * UV_DIM_FACTOR),
            })
            .collect()
    }

    /// Painted copy of the scene with every paint flag cleared.
    pub fn unpainted(&self) -> SceneSpec {
        let mut s = self.clone();
        s.objects.iter_mut().for_each(|o| o.painted = false);
        s
    }

    pub fn class_ids(&self) -> Vec<u8> {
        let mut ids: Vec<u8> = self.objects.iter().filter(|o| o.painted).map(|o| o.class_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

const STD_STREAM: u64 = 0x5354_445f_0000_0001;
const UV_STREAM: u64 = 0x5556_5f5f_0000_0002;

pub fn render_standard(spec: &SceneSpec, exposure: f64) -> ImageRgb {
    spec.finish(spec.standard_radiance(), exposure, STD_STREAM)
}

pub fn render_uv(spec: &SceneSpec, exposure: f64) -> ImageRgb {
    spec.finish(spec.uv_radiance(), exposure, UV_STREAM)
}

/// Exact labels: mask of painted non-towel objects (later objects own shared
/// pixels) and one keypoint per visible painted towel corner.
pub fn ground_truth(spec: &SceneSpec) -> LabelSet {
    let raster = spec.rasterize();
    let (w, h) = (spec.width, spec.height);
    let mut classes = vec![0u8; w * h];
    let mut mark_area = vec![0usize; raster.materials.len()];
    for (i, &id) in raster.ids.iter().enumerate() {
        let Some(m) = raster.materials.get(id as usize) else { continue };
        match (m.paint, m.mark) {
            (Some(_), Some(_)) => mark_area[id as usize] += 1,
            (Some((_, class)), None) => classes[i] = class,
            _ => {}
        }
    }
    let mut keypoints = Vec::new();
    for (id, m) in raster.materials.iter().enumerate() {
        let (Some((_, class)), Some(k)) = (m.paint, m.mark) else { continue };
        let Geometry::Towel { corners, .. } = &spec.objects[m.object].geometry else { continue };
        let c = corners[k];
        let inside = c[0] >= 0.0 && c[1] >= 0.0 && c[0] < w as f64 && c[1] < h as f64;
        if mark_area[id] > 0 && inside {
            keypoints.push(Keypoint { class_id: class, u: c[0], v: c[1], area: mark_area[id] });
        }
    }
    LabelSet { mask: Mask::new(w, h, classes).expect("scene dimensions are valid"), keypoints }
}

// ---------------------------------------------------------------------------
// Generation

fn hsv_color(h: f64, s: f64, v: f64) -> [f64; 3] {
    crate::colorops::hsv_to_rgb(crate::colorops::Hsv { h, s, v })
}

fn scale_of(w: usize, h: usize) -> f64 {
    w.min(h) as f64
}

fn towel_geometry(rng: &mut ChaCha8Rng, w: usize, h: usize, mark_radius: f64) -> Geometry {
    let m = scale_of(w, h);
    let short = m * rng.random_range(0.25..0.40);
    let long = short * rng.random_range(1.0..1.5);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let half_diag = 0.5 * (short * short + long * long).sqrt();
    let margin = half_diag + 3.0 * mark_radius;
    let cx = rng.random_range(margin.min(w as f64 / 2.0)..(w as f64 - margin).max(w as f64 / 2.0 + 1e-9));
    let cy = rng.random_range(margin.min(h as f64 / 2.0)..(h as f64 - margin).max(h as f64 / 2.0 + 1e-9));
    let jitter = Normal::new(0.0, 0.03 * short).expect("finite");
    let (s, c) = angle.sin_cos();
    let local = [[-long / 2.0, -short / 2.0], [long / 2.0, -short / 2.0], [long / 2.0, short / 2.0], [-long / 2.0, short / 2.0]];
    let corners = local.map(|[x, y]| {
        let jx: f64 = jitter.sample(rng);
        let jy: f64 = jitter.sample(rng);
        let p = [cx + x * c - y * s + jx, cy + x * s + y * c + jy];
        [p[0].clamp(mark_radius, w as f64 - mark_radius - 1e-6), p[1].clamp(mark_radius, h as f64 - mark_radius - 1e-6)]
    });
    Geometry::Towel { corners, mark_radius }
}

fn cable_geometry(rng: &mut ChaCha8Rng, w: usize, h: usize, thickness: f64) -> Geometry {
    let (wf, hf) = (w as f64, h as f64);
    let margin = 2.0 * thickness;
    let step = 1.5 * thickness;
    let mut p = [rng.random_range(margin..wf - margin), rng.random_range(margin..hf - margin)];
    let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let n = rng.random_range(40..80);
    let mut points = vec![p];
    for _ in 0..n {
        heading += rng.random_range(-0.35..0.35);
        let mut next = [p[0] + step * heading.cos(), p[1] + step * heading.sin()];
        if next[0] < margin || next[0] > wf - margin {
            heading = std::f64::consts::PI - heading;
        }
        if next[1] < margin || next[1] > hf - margin {
            heading = -heading;
        }
        next = [(p[0] + step * heading.cos()).clamp(margin, wf - margin), (p[1] + step * heading.sin()).clamp(margin, hf - margin)];
        points.push(next);
        p = next;
    }
    Geometry::Cable { points, thickness }
}

fn needle_geometry(rng: &mut ChaCha8Rng, w: usize, h: usize, thickness: f64) -> Geometry {
    let m = scale_of(w, h);
    let radius = m * rng.random_range(0.08..0.15);
    let margin = radius + thickness;
    let center = [rng.random_range(margin..w as f64 - margin), rng.random_range(margin..h as f64 - margin)];
    Geometry::Needle { center, radius, start_angle: rng.random_range(0.0..std::f64::consts::TAU), thickness }
}

fn distractor_geometry(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Geometry {
    let m = scale_of(w, h);
    let size = m * rng.random_range(0.04..0.10);
    let center = [rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)];
    let shape = if rng.random_bool(0.5) {
        Shape::Disk { center, radius: size }
    } else {
        let n = rng.random_range(3..7);
        let offset: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let points = (0..n)
            .map(|i| {
                let a = offset + std::f64::consts::TAU * i as f64 / n as f64;
                let r = size * rng.random_range(0.6..1.2);
                [center[0] + r * a.cos(), center[1] + r * a.sin()]
            })
            .collect();
        Shape::Polygon { points }
    };
    Geometry::Distractor { shape }
}

fn mark_radius_for(w: usize, h: usize) -> f64 {
    (scale_of(w, h) / 60.0).clamp(4.0, 10.0)
}

fn cable_thickness_for(w: usize, h: usize) -> f64 {
    (scale_of(w, h) / 60.0).clamp(4.0, 12.0)
}

fn needle_thickness_for(w: usize, h: usize) -> f64 {
    (scale_of(w, h) / 120.0).clamp(3.0, 6.0)
}

/// Base color of generated cables: saturated orange.
pub const CABLE_BASE: [f64; 3] = [0.85, 0.45, 0.10];
pub const NEEDLE_BASE: [f64; 3] = [0.74, 0.75, 0.78];

fn regenerate_geometry(rng: &mut ChaCha8Rng, g: &Geometry, w: usize, h: usize) -> Geometry {
    match g {
        Geometry::Towel { mark_radius, .. } => towel_geometry(rng, w, h, *mark_radius),
        Geometry::Cable { thickness, .. } => cable_geometry(rng, w, h, *thickness),
        Geometry::Needle { thickness, .. } => needle_geometry(rng, w, h, *thickness),
        Geometry::Distractor { .. } => distractor_geometry(rng, w, h),
    }
}

/// Distractor color away from the cable's orange hue.
fn distractor_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    hsv_color(rng.random_range(90.0..330.0), rng.random_range(0.3..0.9), rng.random_range(0.3..0.9))
}

impl SceneSpec {
    /// Random scene of the given family.
    pub fn generate(kind: SceneKind, width: usize, height: usize, seed: u64, noise_sigma: f64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ kind as u64);
        let (w, h) = (width, height);
        let mut objects = Vec::new();
        let n_distractors = if kind == SceneKind::Bracket { 0 } else { rng.random_range(3..7) };
        for _ in 0..n_distractors {
            objects.push(SceneObject {
                geometry: distractor_geometry(&mut rng, w, h),
                painted: false,
                class_id: 0,
                base_color: distractor_color(&mut rng),
                fluor_color: [0.0; 3],
            });
        }
        if kind == SceneKind::Needle {
            // Red decoys: same color as the needle's glow, but not painted.
            for _ in 0..2 {
                objects.push(SceneObject {
                    geometry: distractor_geometry(&mut rng, w, h),
                    painted: false,
                    class_id: 0,
                    base_color: NEEDLE_FLUOR,
                    fluor_color: [0.0; 3],
                });
            }
        }
        let towel = |rng: &mut ChaCha8Rng| SceneObject {
            geometry: towel_geometry(rng, w, h, mark_radius_for(w, h)),
            painted: true,
            class_id: CORNER_CLASS,
            base_color: if rng.random_bool(0.25) {
                [0.92, 0.92, 0.90]
            } else {
                hsv_color(rng.random_range(90.0..330.0), rng.random_range(0.2..0.7), rng.random_range(0.4..0.9))
            },
            fluor_color: CORNER_FLUOR,
        };
        let cable = |rng: &mut ChaCha8Rng| SceneObject {
            geometry: cable_geometry(rng, w, h, cable_thickness_for(w, h)),
            painted: true,
            class_id: CABLE_CLASS,
            base_color: CABLE_BASE,
            fluor_color: CABLE_FLUOR,
        };
        let needle = |rng: &mut ChaCha8Rng| SceneObject {
            geometry: needle_geometry(rng, w, h, needle_thickness_for(w, h)),
            painted: true,
            class_id: NEEDLE_CLASS,
            base_color: NEEDLE_BASE,
            fluor_color: NEEDLE_FLUOR,
        };
        match kind {
            SceneKind::Towel => objects.push(towel(&mut rng)),
            SceneKind::Cable => {
                for _ in 0..rng.random_range(1..3) {
                    objects.push(cable(&mut rng));
                }
            }
            SceneKind::Needle => objects.push(needle(&mut rng)),
            SceneKind::Mixed => {
                objects.push(towel(&mut rng));
                objects.push(cable(&mut rng));
                objects.push(needle(&mut rng));
            }
            SceneKind::Bracket => {
                let m = scale_of(w, h);
                let patch = |cx: f64, fluor: [f64; 3], class_id: u8| SceneObject {
                    geometry: Geometry::Distractor {
                        shape: Shape::Disk { center: [cx, h as f64 / 2.0], radius: 0.2 * m },
                    },
                    painted: true,
                    class_id,
                    base_color: [0.5, 0.5, 0.5],
                    fluor_color: fluor,
                };
                objects.push(patch(w as f64 * 0.28, [0.07, 0.012, 0.02], NEEDLE_CLASS));
                objects.push(patch(w as f64 * 0.72, [1.0, 0.92, 0.16], CABLE_CLASS));
            }
        }
        let gray = rng.random_range(0.15..0.45);
        SceneSpec {
            width,
            height,
            seed,
            objects,
            background: Background {
                color: [gray, gray * rng.random_range(0.9..1.1), gray * rng.random_range(0.9..1.1)],
                amplitude: rng.random_range(0.0..0.15),
                period: rng.random_range(40.0..160.0),
            },
            ambient_fluorescence: true,
            noise_sigma,
            response: ExposureResponse::default(),
        }
    }
}

/// New poses for every object, same colors, paint and classes. Deterministic
/// in `seed`.
pub fn randomize(spec: &SceneSpec, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1B5_4A32_D192_ED03);
    let mut out = spec.clone();
    out.seed = seed;
    for obj in out.objects.iter_mut() {
        obj.geometry = regenerate_geometry(&mut rng, &obj.geometry, spec.width, spec.height);
    }
    out
}

/// Profile whose bands match the fluorescent colors used by generated scenes.
pub fn companion_profile() -> CalibrationProfile {
    let band = |hue: (f64, f64)| HsvBand::new(hue, (0.45, 1.0), (0.3, 1.0)).expect("static band");
    let mut corner = ClassSpec::new(CORNER_CLASS, "towel_corner", band((100.0, 160.0)));
    corner.keypoint_mode = true;
    corner.paint_type = PaintType::WaterBased;
    let mut cable = ClassSpec::new(CABLE_CLASS, "cable", band((35.0, 75.0)));
    cable.morphology_open_radius = 0;
    cable.paint_type = PaintType::Lacquer;
    let mut needle = ClassSpec::new(NEEDLE_CLASS, "needle", band((335.0, 20.0)));
    needle.morphology_open_radius = 0;
    needle.paint_type = PaintType::Dye;
    CalibrationProfile {
        name: "synthetic".into(),
        classes: vec![corner, cable, needle],
        uv_exposure: NOMINAL_EXPOSURE,
        std_exposure: NOMINAL_EXPOSURE,
        white_balance: 4600,
        settle_delay_ms: 0,
        bracket: vec![],
    }
}

/// Hue of a color, for test assertions and tooling.
pub fn hue_of(c: [f64; 3]) -> f64 {
    rgb_to_hsv(c[0], c[1], c[2]).h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorops::{image_to_hsv, in_band};

    fn blank(w: usize, h: usize) -> SceneSpec {
        SceneSpec {
            width: w,
            height: h,
            seed: 1,
            objects: vec![],
            background: Background { color: [0.3, 0.3, 0.3], amplitude: 0.0, period: 50.0 },
            ambient_fluorescence: false,
            noise_sigma: 0.0,
            response: ExposureResponse::default(),
        }
    }

    #[test]
    fn paint_is_invisible_under_standard_light() {
        let spec = SceneSpec::generate(SceneKind::Mixed, 160, 120, 4, 0.02);
        assert_eq!(render_standard(&spec, 50.0), render_standard(&spec.unpainted(), 50.0));
        assert_ne!(render_uv(&spec, 50.0), render_uv(&spec.unpainted(), 50.0));
    }

    #[test]
    fn zero_exposure_is_black() {
        let spec = SceneSpec::generate(SceneKind::Towel, 64, 48, 2, 0.05);
        assert!(render_standard(&spec, 0.0).pixels().iter().all(|p| *p == [0, 0, 0]));
        assert!(render_uv(&spec, 0.0).pixels().iter().all(|p| *p == [0, 0, 0]));
    }

    #[test]
    fn renders_are_deterministic() {
        let spec = SceneSpec::generate(SceneKind::Cable, 96, 64, 9, 0.02);
        assert_eq!(render_standard(&spec, 50.0), render_standard(&spec, 50.0));
        assert_eq!(render_uv(&spec, 30.0), render_uv(&spec, 30.0));
        assert_eq!(SceneSpec::generate(SceneKind::Cable, 96, 64, 9, 0.02), spec);
    }

    #[test]
    fn unpainted_uv_stays_dim() {
        let sigma = 0.02;
        let mut spec = SceneSpec::generate(SceneKind::Mixed, 200, 150, 5, sigma);
        spec.objects.retain(|o| !o.is_white());
        let spec = spec.unpainted();
        let img = render_uv(&spec, NOMINAL_EXPOSURE);
        let max = img.pixels().iter().flat_map(|p| p.iter()).copied().max().unwrap() as f64 / 255.0;
        // Half an 8-bit step of quantization slack.
        assert!(max <= UV_DIM_FACTOR + 3.0 * sigma + 0.5 / 255.0, "max {max}");
    }

    #[test]
    fn red_needle_is_exactly_in_band() {
        let mut spec = blank(120, 90);
        spec.objects.push(SceneObject {
            geometry: Geometry::Needle { center: [60.0, 45.0], radius: 25.0, start_angle: 0.3, thickness: 4.0 },
            painted: true,
            class_id: NEEDLE_CLASS,
            base_color: NEEDLE_BASE,
            fluor_color: NEEDLE_FLUOR,
        });
        let gt = ground_truth(&spec);
        let plane = image_to_hsv(&render_uv(&spec, NOMINAL_EXPOSURE));
        let band = companion_profile().class(NEEDLE_CLASS).unwrap().band;
        for (i, hsv) in plane.data().iter().enumerate() {
            assert_eq!(in_band(*hsv, &band), gt.mask.classes()[i] == NEEDLE_CLASS, "pixel {i}");
        }
        assert!(gt.mask.binary(NEEDLE_CLASS).count() > 100);
    }

    #[test]
    fn towel_truth_has_four_corners() {
        let spec = SceneSpec::generate(SceneKind::Towel, 320, 240, 3, 0.0);
        let gt = ground_truth(&spec);
        let Geometry::Towel { corners, .. } = spec.objects.last().unwrap().geometry.clone() else { panic!() };
        assert_eq!(gt.keypoints.len(), 4);
        for (kp, c) in gt.keypoints.iter().zip(corners) {
            assert_eq!((kp.u, kp.v), (c[0], c[1]));
            assert_eq!(kp.class_id, CORNER_CLASS);
        }
        assert_eq!(gt.mask.max_class(), 0);
    }

    #[test]
    fn empty_scene_has_empty_truth() {
        let gt = ground_truth(&blank(30, 20));
        assert_eq!(gt.mask.max_class(), 0);
        assert!(gt.keypoints.is_empty());
    }

    #[test]
    fn later_object_owns_overlap() {
        let mut spec = blank(40, 40);
        let disk = |cx: f64, class_id: u8, fluor: [f64; 3]| SceneObject {
            geometry: Geometry::Distractor { shape: Shape::Disk { center: [cx, 20.0], radius: 10.0 } },
            painted: true,
            class_id,
            base_color: [0.5; 3],
            fluor_color: fluor,
        };
        spec.objects.push(disk(15.0, CABLE_CLASS, CABLE_FLUOR));
        spec.objects.push(disk(25.0, NEEDLE_CLASS, NEEDLE_FLUOR));
        let gt = ground_truth(&spec);
        assert_eq!(gt.mask.get(20, 20), NEEDLE_CLASS);
        assert_eq!(gt.mask.get(8, 20), CABLE_CLASS);
        let uv = render_uv(&spec, NOMINAL_EXPOSURE);
        assert_eq!(uv.pixel(20, 20), ImageRgb::from_normalized(1, 1, &[NEEDLE_FLUOR]).unwrap().pixel(0, 0));
    }

    #[test]
    fn randomize_properties() {
        let spec = SceneSpec::generate(SceneKind::Towel, 320, 240, 0, 0.0);
        assert_eq!(randomize(&spec, 17), randomize(&spec, 17));
        let mut corner_sets = std::collections::HashSet::new();
        for seed in 0..100 {
            let r = randomize(&spec, seed);
            assert_eq!(r.class_ids(), spec.class_ids());
            let Geometry::Towel { corners, .. } = &r.objects.last().unwrap().geometry else { panic!() };
            corner_sets.insert(format!("{corners:?}"));
        }
        assert!(corner_sets.len() >= 95);
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = SceneSpec::generate(SceneKind::Mixed, 64, 64, 8, 0.01);
        let back: SceneSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn fluorescent_colors_sit_inside_companion_bands() {
        let p = companion_profile();
        for (class, c) in [(CORNER_CLASS, CORNER_FLUOR), (CABLE_CLASS, CABLE_FLUOR), (NEEDLE_CLASS, NEEDLE_FLUOR)] {
            let hsv = rgb_to_hsv(c[0], c[1], c[2]);
            assert!(in_band(hsv, &p.class(class).unwrap().band), "class {class}");
        }
        assert!(!in_band(rgb_to_hsv(WHITE_FLUORESCENCE[0], WHITE_FLUORESCENCE[1], WHITE_FLUORESCENCE[2]), &p.classes[0].band));
    }
}
