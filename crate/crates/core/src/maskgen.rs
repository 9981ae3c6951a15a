//! Mask and keypoint extraction from UV frames.
//!
//! Each class in a [`CalibrationProfile`] runs the same chain: HSV threshold,
//! morphological open/close with a disk, 8-connected components, and a
//! minimum-area filter. Keypoint classes reduce surviving blobs to centroids
//! and leave the mask untouched; region classes write their id into the mask
//! in profile order, so later classes win overlapping pixels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorops::{image_to_hsv, in_band, HsvPlane};
use crate::fusion::{self, FusionError};
use crate::model::{BinaryMask, CalibrationProfile, ClassSpec, HsvBand, ImageRgb, Keypoint, LabelSet, Mask, ModelError};

#[derive(Debug, Error)]
pub enum MaskgenError {
    #[error("no UV images supplied")]
    NoImages,
    #[error("UV image {index} is {got:?}, expected {expected:?}")]
    DimensionMismatch { index: usize, expected: (usize, usize), got: (usize, usize) },
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_u: usize,
    pub min_v: usize,
    pub max_u: usize,
    pub max_v: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobStats {
    pub class_id: u8,
    pub pixel_count: usize,
    /// Mean of pixel centers `(x + 0.5, y + 0.5)`.
    pub centroid: (f64, f64),
    pub bbox: BoundingBox,
}

pub fn threshold_class(uv_img: &ImageRgb, spec: &ClassSpec) -> BinaryMask {
    threshold_plane(&image_to_hsv(uv_img), &spec.band)
}

pub fn threshold_plane(plane: &HsvPlane, band: &HsvBand) -> BinaryMask {
    let bits = plane.data().iter().map(|p| in_band(*p, band)).collect();
    BinaryMask::new(plane.width(), plane.height(), bits).expect("plane dimensions are valid")
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Erosion (`all`) or dilation (`any`) with a disk. Offsets falling outside
/// the image are ignored, so the border neither erodes nor grows shapes.
fn morph(mask: &BinaryMask, radius: usize, erode: bool) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = mask.dims();
    let src = mask.bits();
    let offsets = disk_offsets(radius);
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let centre = src[y * w + x];
            // Erosion can only clear set pixels and dilation only set clear ones.
            if erode != centre {
                out[y * w + x] = centre;
                continue;
            }
            let mut result = erode;
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let on = src[ny as usize * w + nx as usize];
                if erode && !on {
                    result = false;
                    break;
                }
                if !erode && on {
                    result = true;
                    break;
                }
            }
            out[y * w + x] = result;
        }
    }
    BinaryMask::new(w, h, out).expect("same dimensions")
}

pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    morph(mask, radius, true)
}

pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    morph(mask, radius, false)
}

/// Opening with a disk of `open_radius`, then closing with `close_radius`.
pub fn morph_clean(mask: &BinaryMask, open_radius: usize, close_radius: usize) -> BinaryMask {
    let opened = if open_radius > 0 { dilate(&erode(mask, open_radius), open_radius) } else { mask.clone() };
    if close_radius > 0 {
        erode(&dilate(&opened, close_radius), close_radius)
    } else {
        opened
    }
}

/// Component id per pixel (`u32::MAX` for background) and per-component stats.
fn label_components(mask: &BinaryMask) -> (Vec<u32>, Vec<BlobStats>) {
    const NONE: u32 = u32::MAX;
    let (w, h) = mask.dims();
    let bits = mask.bits();
    let mut labels = vec![NONE; w * h];
    let mut blobs = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !bits[start] || labels[start] != NONE {
            continue;
        }
        let id = blobs.len() as u32;
        labels[start] = id;
        stack.push(start);
        let (mut count, mut su, mut sv) = (0usize, 0.0f64, 0.0f64);
        let mut bbox = BoundingBox { min_u: usize::MAX, min_v: usize::MAX, max_u: 0, max_v: 0 };
        while let Some(idx) = stack.pop() {
            let (x, y) = (idx % w, idx / w);
            count += 1;
            su += x as f64 + 0.5;
            sv += y as f64 + 0.5;
            bbox.min_u = bbox.min_u.min(x);
            bbox.max_u = bbox.max_u.max(x);
            bbox.min_v = bbox.min_v.min(y);
            bbox.max_v = bbox.max_v.max(y);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let n = ny * w + nx;
                    if bits[n] && labels[n] == NONE {
                        labels[n] = id;
                        stack.push(n);
                    }
                }
            }
        }
        blobs.push(BlobStats {
            class_id: 0,
            pixel_count: count,
            centroid: (su / count as f64, sv / count as f64),
            bbox,
        });
    }
    (labels, blobs)
}

/// 8-connected components ordered by their first pixel in raster order.
/// `class_id` is left at 0.
pub fn connected_components(mask: &BinaryMask) -> Vec<BlobStats> {
    label_components(mask).1
}

/// Result of running one class through the threshold chain.
#[derive(Debug, Clone)]
pub struct ClassOutput {
    /// Threshold result before morphology.
    pub raw: BinaryMask,
    /// Cleaned mask restricted to blobs that passed the area filter.
    pub kept: BinaryMask,
    pub blobs: Vec<BlobStats>,
}

pub fn process_class(plane: &HsvPlane, spec: &ClassSpec) -> ClassOutput {
    let raw = threshold_plane(plane, &spec.band);
    let cleaned = morph_clean(&raw, spec.morphology_open_radius, spec.morphology_close_radius);
    let (labels, blobs) = label_components(&cleaned);
    let keep: Vec<bool> = blobs.iter().map(|b| b.pixel_count >= spec.min_area.max(1)).collect();
    let (w, h) = cleaned.dims();
    let bits = labels.iter().map(|&l| l != u32::MAX && keep[l as usize]).collect();
    let kept = BinaryMask::new(w, h, bits).expect("same dimensions");
    let blobs = blobs
        .into_iter()
        .zip(keep)
        .filter_map(|(mut b, k)| {
            b.class_id = spec.class_id;
            k.then_some(b)
        })
        .collect();
    ClassOutput { raw, kept, blobs }
}

/// Labels from a single (already fused, if bracketed) UV frame.
pub fn extract_labels_single(uv: &ImageRgb, profile: &CalibrationProfile) -> Result<LabelSet, MaskgenError> {
    let plane = image_to_hsv(uv);
    let mut mask = Mask::background(uv.width(), uv.height())?;
    let mut keypoints = Vec::new();
    for spec in &profile.classes {
        let out = process_class(&plane, spec);
        if spec.keypoint_mode {
            keypoints.extend(out.blobs.iter().map(|b| Keypoint {
                class_id: spec.class_id,
                u: b.centroid.0,
                v: b.centroid.1,
                area: b.pixel_count,
            }));
        } else {
            mask.paint(&out.kept, spec.class_id)?;
        }
    }
    Ok(LabelSet { mask, keypoints })
}

/// Labels from one or more UV exposures. Multiple exposures are fused first.
pub fn extract_labels(uv_imgs: &[(f64, ImageRgb)], profile: &CalibrationProfile) -> Result<LabelSet, MaskgenError> {
    let (_, first) = uv_imgs.first().ok_or(MaskgenError::NoImages)?;
    for (index, (_, img)) in uv_imgs.iter().enumerate() {
        if img.dims() != first.dims() {
            return Err(MaskgenError::DimensionMismatch { index, expected: first.dims(), got: img.dims() });
        }
    }
    if uv_imgs.len() == 1 {
        return extract_labels_single(first, profile);
    }
    let imgs: Vec<ImageRgb> = uv_imgs.iter().map(|(_, img)| img.clone()).collect();
    let fused = fusion::fuse_exposures(&imgs)?;
    extract_labels_single(&fused, profile)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PaintType;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from_rows(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::from_fn(w, h, |x, y| rows[y].as_bytes()[x] == b'#').unwrap()
    }

    fn red_spec() -> ClassSpec {
        let mut c = ClassSpec::new(1, "red", HsvBand::new((340.0, 20.0), (0.5, 1.0), (0.3, 1.0)).unwrap());
        c.paint_type = PaintType::Lacquer;
        c
    }

    #[test]
    fn threshold_black_image_is_empty() {
        let img = ImageRgb::filled(8, 8, [0, 0, 0]).unwrap();
        assert_eq!(threshold_class(&img, &red_spec()).count(), 0);
    }

    #[test]
    fn threshold_full_band_is_full() {
        let img = ImageRgb::filled(5, 4, [12, 200, 7]).unwrap();
        let spec = ClassSpec::new(1, "all", HsvBand::full());
        assert_eq!(threshold_class(&img, &spec).count(), 20);
    }

    #[test]
    fn threshold_red_blob_exact() {
        let blob = |x: usize, y: usize| (3..7).contains(&x) && (2..5).contains(&y);
        let px = (0..100).map(|i| if blob(i % 10, i / 10) { [230, 10, 20] } else { [40, 60, 200] }).collect();
        let img = ImageRgb::from_pixels(10, 10, px).unwrap();
        let expected = BinaryMask::from_fn(10, 10, blob).unwrap();
        assert_eq!(threshold_class(&img, &red_spec()), expected);
    }

    #[test]
    fn morph_identity_at_zero() {
        let m = mask_from_rows(&["#..#", ".##.", "#..."]);
        assert_eq!(morph_clean(&m, 0, 0), m);
    }

    #[test]
    fn opening_removes_speck() {
        let m = mask_from_rows(&[".....", ".....", "..#..", ".....", "....."]);
        assert_eq!(morph_clean(&m, 1, 0).count(), 0);
    }

    /// Direct set-based morphology on small grids; shares nothing with `morph`.
    fn oracle_morph(m: &BinaryMask, r: usize, erode: bool) -> BinaryMask {
        let (w, h) = m.dims();
        let r = r as i64;
        BinaryMask::from_fn(w, h, |x, y| {
            let mut vals = Vec::new();
            for yy in 0..h as i64 {
                for xx in 0..w as i64 {
                    let (dx, dy) = (xx - x as i64, yy - y as i64);
                    if dx * dx + dy * dy <= r * r {
                        vals.push(m.get(xx as usize, yy as usize));
                    }
                }
            }
            if erode {
                vals.iter().all(|&v| v)
            } else {
                vals.iter().any(|&v| v)
            }
        })
        .unwrap()
    }

    #[test]
    fn closing_fills_hole() {
        let m = BinaryMask::from_fn(20, 20, |x, y| !(x == 9 && y == 11)).unwrap();
        let closed = morph_clean(&m, 0, 1);
        assert_eq!(closed.count(), 400);
        let oracle = oracle_morph(&oracle_morph(&m, 1, false), 1, true);
        assert_eq!(closed, oracle);
    }

    #[test]
    fn morphology_matches_oracle_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for r in 1..=2 {
            let m = BinaryMask::from_fn(14, 11, |_, _| rng.random_bool(0.55)).unwrap();
            assert_eq!(erode(&m, r), oracle_morph(&m, r, true));
            assert_eq!(dilate(&m, r), oracle_morph(&m, r, false));
        }
    }

    #[test]
    fn components_basic() {
        assert!(connected_components(&BinaryMask::empty(4, 4).unwrap()).is_empty());
        let diag = mask_from_rows(&["#.", ".#"]);
        let blobs = connected_components(&diag);
        assert_eq!(blobs.len(), 1);
        assert_eq!(blobs[0].pixel_count, 2);
        assert_eq!(blobs[0].centroid, (1.0, 1.0));
    }

    #[test]
    fn components_order_and_bbox() {
        let m = mask_from_rows(&["....##", "#.....", "#....#"]);
        let blobs = connected_components(&m);
        assert_eq!(blobs.len(), 3);
        assert_eq!(blobs[0].bbox, BoundingBox { min_u: 4, min_v: 0, max_u: 5, max_v: 0 });
        assert_eq!(blobs[1].bbox.min_u, 0);
        assert_eq!(blobs[2].bbox, BoundingBox { min_u: 5, min_v: 2, max_u: 5, max_v: 2 });
    }

    /// Recursive-free BFS flood fill over a visited grid, sizes sorted.
    fn flood_fill_sizes(m: &BinaryMask) -> Vec<usize> {
        let (w, h) = m.dims();
        let mut seen = vec![vec![false; w]; h];
        let mut sizes = Vec::new();
        for y0 in 0..h {
            for x0 in 0..w {
                if !m.get(x0, y0) || seen[y0][x0] {
                    continue;
                }
                let mut queue = std::collections::VecDeque::from([(x0, y0)]);
                seen[y0][x0] = true;
                let mut n = 0;
                while let Some((x, y)) = queue.pop_front() {
                    n += 1;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                            if nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 {
                                let (nx, ny) = (nx as usize, ny as usize);
                                if m.get(nx, ny) && !seen[ny][nx] {
                                    seen[ny][nx] = true;
                                    queue.push_back((nx, ny));
                                }
                            }
                        }
                    }
                }
                sizes.push(n);
            }
        }
        sizes.sort_unstable();
        sizes
    }

    #[test]
    fn components_match_flood_fill() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = BinaryMask::from_fn(64, 64, |_, _| rng.random_bool(0.4)).unwrap();
            let mut sizes: Vec<usize> = connected_components(&m).iter().map(|b| b.pixel_count).collect();
            sizes.sort_unstable();
            assert_eq!(sizes, flood_fill_sizes(&m));
        }
    }

    fn profile(classes: Vec<ClassSpec>) -> CalibrationProfile {
        CalibrationProfile {
            name: "t".into(),
            classes,
            uv_exposure: 50.0,
            std_exposure: 50.0,
            white_balance: 4600,
            settle_delay_ms: 0,
            bracket: vec![],
        }
    }

    #[test]
    fn no_in_band_pixels_gives_empty_labels() {
        let img = ImageRgb::filled(16, 16, [10, 10, 10]).unwrap();
        let labels = extract_labels(&[(50.0, img)], &profile(vec![red_spec()])).unwrap();
        assert_eq!(labels.mask.max_class(), 0);
        assert!(labels.keypoints.is_empty());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = ImageRgb::filled(8, 8, [0; 3]).unwrap();
        let b = ImageRgb::filled(8, 9, [0; 3]).unwrap();
        let err = extract_labels(&[(10.0, a), (20.0, b)], &profile(vec![red_spec()])).unwrap_err();
        assert!(matches!(err, MaskgenError::DimensionMismatch { index: 1, .. }));
        assert!(matches!(extract_labels(&[], &profile(vec![red_spec()])), Err(MaskgenError::NoImages)));
    }

    #[test]
    fn later_class_overwrites_and_keypoints_stay_out_of_mask() {
        let px = (0..400)
            .map(|i| {
                let (x, y) = (i % 20, i / 20);
                if x < 10 && y < 10 {
                    [230, 20, 20]
                } else if x >= 14 && y >= 14 {
                    [20, 230, 20]
                } else {
                    [0, 0, 0]
                }
            })
            .collect();
        let img = ImageRgb::from_pixels(20, 20, px).unwrap();
        let first = red_spec();
        let mut second = ClassSpec::new(2, "anything-bright", HsvBand::new((0.0, 359.0), (0.0, 1.0), (0.5, 1.0)).unwrap());
        second.min_area = 1;
        let mut kp = ClassSpec::new(3, "green", HsvBand::new((100.0, 140.0), (0.5, 1.0), (0.5, 1.0)).unwrap());
        kp.keypoint_mode = true;
        kp.morphology_open_radius = 0;
        let labels = extract_labels_single(&img, &profile(vec![first, second, kp])).unwrap();
        assert_eq!(labels.mask.get(2, 2), 2);
        assert_eq!(labels.mask.get(15, 15), 2);
        assert_eq!(labels.keypoints.len(), 1);
        let k = labels.keypoints[0];
        assert_eq!((k.class_id, k.u, k.v, k.area), (3, 17.0, 17.0, 36));
    }

    #[test]
    fn area_filter_drops_small_blobs() {
        let m = mask_from_rows(&["##....", "##....", "....#."]);
        let px = m.bits().iter().map(|&b| if b { [250, 0, 0] } else { [0, 0, 0] }).collect();
        let img = ImageRgb::from_pixels(6, 3, px).unwrap();
        let mut spec = red_spec();
        spec.morphology_open_radius = 0;
        spec.morphology_close_radius = 0;
        spec.min_area = 2;
        let out = process_class(&image_to_hsv(&img), &spec);
        assert_eq!(out.blobs.len(), 1);
        assert_eq!(out.kept.count(), 4);
    }

    proptest! {
        #[test]
        fn mask_pixels_pass_band_before_morphology(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let px = (0..24 * 24).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let img = ImageRgb::from_pixels(24, 24, px).unwrap();
            let spec = red_spec();
            let plane = image_to_hsv(&img);
            let out = process_class(&plane, &spec);
            for (i, &on) in out.raw.bits().iter().enumerate() {
                if on {
                    prop_assert!(in_band(plane.data()[i], &spec.band));
                }
            }
            for b in &out.blobs {
                prop_assert!(b.pixel_count >= spec.min_area);
            }
            let again = extract_labels_single(&img, &profile(vec![spec.clone()])).unwrap();
            let once = extract_labels_single(&img, &profile(vec![spec])).unwrap();
            prop_assert_eq!(again, once);
        }
    }
}
