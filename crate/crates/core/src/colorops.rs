//! RGB to HSV conversion and band membership.

use serde::{Deserialize, Serialize};

use crate::model::{HsvBand, ImageRgb};

/// Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Hsv {
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

/// Hexcone conversion. Achromatic pixels get hue 0.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> Hsv {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    if delta <= 0.0 || max <= 0.0 {
        return Hsv { h: 0.0, s: 0.0, v };
    }
    let s = delta / max;
    let sector = if max == r {
        (g - b) / delta
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let mut h = 60.0 * sector;
    if h < 0.0 {
        h += 360.0;
    }
    if h >= 360.0 {
        h -= 360.0;
    }
    Hsv { h, s, v }
}

/// Inverse of [`rgb_to_hsv`].
pub fn hsv_to_rgb(hsv: Hsv) -> [f64; 3] {
    let Hsv { h, s, v } = hsv;
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Closed-interval membership; wrapped hue bands accept `h >= min || h <= max`.
pub fn in_band(hsv: Hsv, band: &HsvBand) -> bool {
    let (smin, smax) = band.sat();
    let (vmin, vmax) = band.val();
    if hsv.s < smin || hsv.s > smax || hsv.v < vmin || hsv.v > vmax {
        return false;
    }
    let (hmin, hmax) = band.hue();
    if band.wraps() {
        hsv.h >= hmin || hsv.h <= hmax
    } else {
        hsv.h >= hmin && hsv.h <= hmax
    }
}

/// Per-pixel HSV of an image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HsvPlane {
    width: usize,
    height: usize,
    data: Vec<Hsv>,
}

impl HsvPlane {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> Hsv {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[Hsv] {
        &self.data
    }
}

pub fn image_to_hsv(img: &ImageRgb) -> HsvPlane {
    let norm: [f64; 256] = std::array::from_fn(|i| i as f64 / 255.0);
    let data = img
        .pixels()
        .iter()
        .map(|&[r, g, b]| rgb_to_hsv(norm[r as usize], norm[g as usize], norm[b as usize]))
        .collect();
    HsvPlane { width: img.width(), height: img.height(), data }
}
