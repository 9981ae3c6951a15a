//! Label agreement metrics, seconds-per-label statistics and the cost model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BinaryMask, Keypoint, LabelSet, Mask, TimingRecord};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("{0} must be positive and finite")]
    NonPositive(&'static str),
    #[error("no records to summarize")]
    Empty,
    #[error("sample sets are misaligned: {0}")]
    Misaligned(String),
}

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<(), EvalError> {
    if a != b {
        return Err(EvalError::DimensionMismatch(a.0, a.1, b.0, b.1));
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 { 1.0 } else { num as f64 / den as f64 }
}

/// Intersection over union of two binary masks. Two empty masks agree fully.
pub fn iou_binary(a: &BinaryMask, b: &BinaryMask) -> Result<f64, EvalError> {
    check_dims(a.dims(), b.dims())?;
    let (mut inter, mut union) = (0, 0);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(ratio(inter, union))
}

/// IOU of one class between two class masks.
pub fn iou_class(a: &Mask, b: &Mask, class: u8) -> Result<f64, EvalError> {
    check_dims(a.dims(), b.dims())?;
    let (mut inter, mut union) = (0, 0);
    for (&x, &y) in a.classes().iter().zip(b.classes()) {
        inter += (x == class && y == class) as usize;
        union += (x == class || y == class) as usize;
    }
    Ok(ratio(inter, union))
}

/// IOU for every nonzero class present in either mask.
pub fn iou_per_class(a: &Mask, b: &Mask) -> Result<BTreeMap<u8, f64>, EvalError> {
    check_dims(a.dims(), b.dims())?;
    let mut counts: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
    for (&x, &y) in a.classes().iter().zip(b.classes()) {
        if x != 0 {
            let e = counts.entry(x).or_default();
            e.1 += 1;
            e.0 += (x == y) as usize;
        }
        if y != 0 && y != x {
            counts.entry(y).or_default().1 += 1;
        }
    }
    Ok(counts.into_iter().map(|(c, (i, u))| (c, ratio(i, u))).collect())
}

/// Mean of [`iou_per_class`]; 1 when neither mask has any labeled pixel.
pub fn mean_iou(a: &Mask, b: &Mask) -> Result<f64, EvalError> {
    let per = iou_per_class(a, b)?;
    if per.is_empty() {
        return Ok(1.0);
    }
    Ok(per.values().sum::<f64>() / per.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointAgreement {
    pub precision: f64,
    pub recall: f64,
    /// Mean distance over matched pairs; 0 when nothing matched.
    pub mean_distance: f64,
    pub matched: usize,
}

/// Matched `(pred, ref, distance)` triples. Pairs of the same class within
/// `radius` are taken in order of increasing distance, each point at most once.
pub fn match_keypoints(pred: &[Keypoint], reference: &[Keypoint], radius: f64) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, r) in reference.iter().enumerate() {
            if p.class_id != r.class_id {
                continue;
            }
            let d = (p.u - r.u).hypot(p.v - r.v);
            if d <= radius {
                pairs.push((i, j, d));
            }
        }
    }
    pairs.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used_p = vec![false; pred.len()];
    let mut used_r = vec![false; reference.len()];
    let mut out = Vec::new();
    for (i, j, d) in pairs {
        if !used_p[i] && !used_r[j] {
            used_p[i] = true;
            used_r[j] = true;
            out.push((i, j, d));
        }
    }
    out
}

pub fn keypoint_agreement(pred: &[Keypoint], reference: &[Keypoint], radius: f64) -> KeypointAgreement {
    let m = match_keypoints(pred, reference, radius);
    let mean_distance = if m.is_empty() { 0.0 } else { m.iter().map(|x| x.2).sum::<f64>() / m.len() as f64 };
    KeypointAgreement {
        precision: ratio(m.len(), pred.len()),
        recall: ratio(m.len(), reference.len()),
        mean_distance,
        matched: m.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplSummary {
    pub mean: f64,
    pub median: f64,
    /// Nearest-rank 95th percentile.
    pub p95: f64,
    pub count: usize,
}

pub fn spl_from_seconds(seconds: &[f64]) -> Result<SplSummary, EvalError> {
    if seconds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut s = seconds.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    Ok(SplSummary { mean: s.iter().sum::<f64>() / n as f64, median, p95: s[rank - 1], count: n })
}

/// Statistics over `label_seconds`.
pub fn spl_summary(timings: &[TimingRecord]) -> Result<SplSummary, EvalError> {
    spl_from_seconds(&timings.iter().map(|t| t.label_seconds).collect::<Vec<_>>())
}

/// Number of labeled images after which a one-time `setup_cost` is cheaper
/// than paying `price_per_label` for each of `labels_per_image` labels.
pub fn cost_breakeven(setup_cost: f64, price_per_label: f64, labels_per_image: u32) -> Result<u64, EvalError> {
    if !(setup_cost.is_finite() && setup_cost > 0.0) {
        return Err(EvalError::NonPositive("setup_cost"));
    }
    if !(price_per_label.is_finite() && price_per_label > 0.0) {
        return Err(EvalError::NonPositive("price_per_label"));
    }
    if labels_per_image == 0 {
        return Err(EvalError::NonPositive("labels_per_image"));
    }
    let per_image = price_per_label * labels_per_image as f64;
    let q = setup_cost / per_image;
    // Absorb representation error so exact multiples do not round up.
    let r = q.round();
    let n = if (q - r).abs() <= 1e-9 * r.max(1.0) { r } else { q.ceil() };
    Ok(n as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over samples in which the class appears in either label set.
    pub per_class_iou: BTreeMap<u8, f64>,
    /// Mean over samples of each sample's [`mean_iou`].
    pub mean_iou: f64,
    /// Pixel precision and recall of foreground with matching class.
    pub pixel_precision: f64,
    pub pixel_recall: f64,
    pub keypoints: KeypointAgreement,
    pub spl: Option<SplSummary>,
    pub sample_count: usize,
}

/// Default keypoint matching radius in pixels.
pub const KEYPOINT_RADIUS: f64 = 10.0;

/// Compares two labelers over the same sample ids.
pub fn compare_labelers(
    luv: &[(String, LabelSet)],
    human: &[(String, LabelSet)],
    radius: f64,
) -> Result<EvalReport, EvalError> {
    let a: BTreeMap<&str, &LabelSet> = luv.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let b: BTreeMap<&str, &LabelSet> = human.iter().map(|(k, v)| (k.as_str(), v)).collect();
    if a.len() != luv.len() || b.len() != human.len() {
        return Err(EvalError::Misaligned("duplicate sample id".into()));
    }
    let ka: BTreeSet<&str> = a.keys().copied().collect();
    let kb: BTreeSet<&str> = b.keys().copied().collect();
    if ka != kb {
        let diff: Vec<&str> = ka.symmetric_difference(&kb).copied().collect();
        return Err(EvalError::Misaligned(diff.join(", ")));
    }
    if a.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut class_sums: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
    let mut iou_sum = 0.0;
    let (mut tp, mut pred_fg, mut ref_fg) = (0usize, 0usize, 0usize);
    let (mut matched, mut n_pred, mut n_ref, mut dist_sum) = (0usize, 0usize, 0usize, 0.0);
    for (id, la) in &a {
        let lb = b[id];
        for (c, v) in iou_per_class(&la.mask, &lb.mask)? {
            let e = class_sums.entry(c).or_default();
            e.0 += v;
            e.1 += 1;
        }
        iou_sum += mean_iou(&la.mask, &lb.mask)?;
        for (&x, &y) in la.mask.classes().iter().zip(lb.mask.classes()) {
            pred_fg += (x != 0) as usize;
            ref_fg += (y != 0) as usize;
            tp += (x != 0 && x == y) as usize;
        }
        let m = match_keypoints(&la.keypoints, &lb.keypoints, radius);
        matched += m.len();
        dist_sum += m.iter().map(|x| x.2).sum::<f64>();
        n_pred += la.keypoints.len();
        n_ref += lb.keypoints.len();
    }
    Ok(EvalReport {
        per_class_iou: class_sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect(),
        mean_iou: iou_sum / a.len() as f64,
        pixel_precision: ratio(tp, pred_fg),
        pixel_recall: ratio(tp, ref_fg),
        keypoints: KeypointAgreement {
            precision: ratio(matched, n_pred),
            recall: ratio(matched, n_ref),
            mean_distance: if matched == 0 { 0.0 } else { dist_sum / matched as f64 },
            matched,
        },
        spl: None,
        sample_count: a.len(),
    })
}

impl EvalReport {
    pub fn with_spl(mut self, spl: SplSummary) -> Self {
        self.spl = Some(spl);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }
}

/// Aligned text table with one row per labeler: IOU, keypoint recall and SPL.
pub fn format_table(rows: &[(&str, &EvalReport)]) -> String {
    let header = ["Labeler", "Samples", "IOU", "KP recall", "SPL mean", "SPL p95"];
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|(name, r)| {
            let spl = |f: fn(&SplSummary) -> f64| r.spl.as_ref().map_or("-".to_string(), |s| format!("{:.3}", f(s)));
            [
                name.to_string(),
                r.sample_count.to_string(),
                format!("{:.3}", r.mean_iou),
                format!("{:.3}", r.keypoints.recall),
                spl(|s| s.mean),
                spl(|s| s.p95),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, row: &[&str]| {
        for (i, (c, w)) in row.iter().zip(widths).enumerate() {
            if i == 0 {
                let _ = write!(out, "{c:<w$}");
            } else {
                let _ = write!(out, "  {c:>w$}");
            }
        }
        out.push('\n');
    };
    line(&mut out, &header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&mut out, &rule.iter().map(String::as_str).collect::<Vec<_>>());
    for row in &cells {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}
