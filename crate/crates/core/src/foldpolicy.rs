//! Towel smoothing and folding from detected corners.
//!
//! Corner coordinates are in meters in the table plane. The policy reads the
//! number of detected corners: none means reset, one means drag it, two or
//! more means fling the closest pair, and four corners matching the towel's
//! rectangle end smoothing and start the fold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BinaryMask, Keypoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("expected 4 corners, got {0}")]
    CornerCount(usize),
    #[error("towel dimensions must satisfy 0 < width <= height, got {0} x {1}")]
    InvalidTowel(f64, f64),
    #[error("degenerate corner set")]
    Degenerate,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("no masked pixel with finite depth")]
    NoDepth,
    #[error("depth plane is {0}x{1} but mask is {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, o: Point2) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }

    fn scale(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }

    fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    fn lerp(self, o: Point2, t: f64) -> Point2 {
        self.add(o.sub(self).scale(t))
    }
}

impl From<&Keypoint> for Point2 {
    fn from(k: &Keypoint) -> Self {
        Point2::new(k.u, k.v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TowelSpec {
    width: f64,
    height: f64,
}

impl TowelSpec {
    pub fn new(width: f64, height: f64) -> Result<Self, PolicyError> {
        if !(width > 0.0 && width <= height && height.is_finite()) {
            return Err(PolicyError::InvalidTowel(width, height));
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }

    /// Sorted pairwise distances of a perfect rectangle.
    pub fn template(&self) -> [f64; 6] {
        let (w, h, d) = (self.width, self.height, self.diagonal());
        [w, w, h, h, d, d]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum SmoothAction {
    RandomReset { grasp: Point2 },
    DragCorner { grasp: Point2, target: Point2 },
    FlingPair { a: Point2, b: Point2 },
    Terminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Drag distance; the towel width when `None`.
    pub drag_length: Option<f64>,
    pub table_center: Point2,
    /// Opposite corners of the region reset grasps are drawn from.
    pub cloth_region: (Point2, Point2),
}

impl PolicyConfig {
    pub fn centered(half_extent: f64) -> Self {
        Self {
            drag_length: None,
            table_center: Point2::new(0.0, 0.0),
            cloth_region: (Point2::new(-half_extent, -half_extent), Point2::new(half_extent, half_extent)),
        }
    }
}

fn pairwise(c: &[Point2]) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..c.len() {
        for j in i + 1..c.len() {
            out.push((i, j, c[i].dist(c[j])));
        }
    }
    out
}

/// Four corners whose sorted pairwise distances each lie within one sample
/// standard deviation (of those six distances) of the rectangle template.
pub fn is_smoothed(corners: &[Point2], towel: &TowelSpec) -> Result<bool, PolicyError> {
    if corners.len() != 4 {
        return Err(PolicyError::CornerCount(corners.len()));
    }
    let mut d: Vec<f64> = pairwise(corners).into_iter().map(|p| p.2).collect();
    d.sort_by(f64::total_cmp);
    let mean = d.iter().sum::<f64>() / 6.0;
    let sigma = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
    Ok(d.iter().zip(towel.template()).all(|(m, e)| (m - e).abs() <= sigma))
}

pub fn select_action(corners: &[Point2], towel: &TowelSpec, config: &PolicyConfig, rng_seed: u64) -> SmoothAction {
    match corners.len() {
        0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let (a, b) = config.cloth_region;
            let (tx, ty): (f64, f64) = (rng.random(), rng.random());
            SmoothAction::RandomReset { grasp: Point2::new(a.x + tx * (b.x - a.x), a.y + ty * (b.y - a.y)) }
        }
        1 => {
            let grasp = corners[0];
            let len = config.drag_length.unwrap_or(towel.width);
            let dir = config.table_center.sub(grasp);
            let norm = dir.dot(dir).sqrt();
            let target = if norm > 0.0 { grasp.add(dir.scale(len / norm)) } else { grasp };
            SmoothAction::DragCorner { grasp, target }
        }
        n => {
            if n == 4 && is_smoothed(corners, towel).unwrap_or(false) {
                return SmoothAction::Terminate;
            }
            let (i, j, _) = pairwise(corners)
                .into_iter()
                .reduce(|best, p| if p.2 < best.2 { p } else { best })
                .expect("at least two corners");
            SmoothAction::FlingPair { a: corners[i], b: corners[j] }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PickPlace {
    pub pick: Point2,
    pub place: Point2,
}

/// Bimanual first fold, then single-arm second fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub first: [PickPlace; 2],
    pub second: PickPlace,
}

/// Plans the double fold. `robot_dir` points from the towel toward the robot.
///
/// The two corners furthest along `robot_dir` go onto the far corners, paired
/// to minimize travel. The half-size towel's side edge on the robot's left is
/// then picked at its midpoint and laid on the opposite side edge's midpoint.
pub fn plan_fold(corners: &[Point2], robot_dir: Point2) -> Result<FoldPlan, PolicyError> {
    if corners.len() != 4 {
        return Err(PolicyError::CornerCount(corners.len()));
    }
    let area = polygon_area_hull(corners);
    let scale = pairwise(corners).iter().map(|p| p.2).fold(0.0, f64::max);
    if area.is_nan() || area <= 1e-12 * scale * scale || robot_dir.dot(robot_dir) == 0.0 {
        return Err(PolicyError::Degenerate);
    }
    let mut idx = [0usize, 1, 2, 3];
    idx.sort_by(|&a, &b| corners[b].dot(robot_dir).total_cmp(&corners[a].dot(robot_dir)).then(a.cmp(&b)));
    let (n0, n1, f0, f1) = (corners[idx[0]], corners[idx[1]], corners[idx[2]], corners[idx[3]]);
    let straight = n0.dist(f0) + n1.dist(f1);
    let crossed = n0.dist(f1) + n1.dist(f0);
    let (fa, fb) = if straight <= crossed { (f0, f1) } else { (f1, f0) };
    let first = [PickPlace { pick: n0, place: fa }, PickPlace { pick: n1, place: fb }];
    // Pairs (near, far) after the first fold; each pair spans one side edge.
    let left = Point2::new(robot_dir.y, -robot_dir.x);
    let sides = [(n0, fa), (n1, fb)];
    let (pick_side, place_side) =
        if fa.dot(left) >= fb.dot(left) { (sides[0], sides[1]) } else { (sides[1], sides[0]) };
    let mid = |(near, far): (Point2, Point2)| far.lerp(near, 0.25);
    Ok(FoldPlan { first, second: PickPlace { pick: mid(pick_side), place: mid(place_side) } })
}

fn polygon_area_hull(c: &[Point2]) -> f64 {
    // Largest triangle area bounds degeneracy for any ordering.
    let mut best: f64 = 0.0;
    for i in 0..c.len() {
        for j in i + 1..c.len() {
            for k in j + 1..c.len() {
                let (a, b) = (c[j].sub(c[i]), c[k].sub(c[i]));
                best = best.max((a.x * b.y - a.y * b.x).abs() / 2.0);
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl PinholeIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, PolicyError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(PolicyError::InvalidIntrinsics(format!("fx={fx} fy={fy} cx={cx} cy={cy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Camera-frame point of continuous pixel coordinate `(u, v)` at depth `z`.
    pub fn deproject(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        [(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z]
    }
}

/// Row-major depth in meters. Non-finite values mark missing depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthPlane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 }
}

/// Per-axis median of the deprojected masked pixels. Pixel `(x, y)` sits at
/// `(x + 0.5, y + 0.5)`, as everywhere else in this crate.
pub fn median_deproject(depth: &DepthPlane, mask: &BinaryMask, k: &PinholeIntrinsics) -> Result<[f64; 3], PolicyError> {
    if (depth.width, depth.height) != mask.dims() || depth.data.len() != depth.width * depth.height {
        return Err(PolicyError::DimensionMismatch(depth.width, depth.height, mask.width(), mask.height()));
    }
    let mut axes: [Vec<f64>; 3] = Default::default();
    for y in 0..depth.height {
        for x in 0..depth.width {
            let z = depth.data[y * depth.width + x];
            if mask.get(x, y) && z.is_finite() {
                let p = k.deproject(x as f64 + 0.5, y as f64 + 0.5, z);
                for (a, v) in axes.iter_mut().zip(p) {
                    a.push(v);
                }
            }
        }
    }
    if axes[0].is_empty() {
        return Err(PolicyError::NoDepth);
    }
    Ok([median(&mut axes[0]), median(&mut axes[1]), median(&mut axes[2])])
}

/// Cloth the policy acts on.
pub trait ClothScene {
    /// Corners currently visible, in meters.
    fn visible_corners(&self) -> Vec<Point2>;
    fn apply(&mut self, action: &SmoothAction);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Smoothed,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub actions: Vec<SmoothAction>,
    pub outcome: Outcome,
    pub smoothing_actions: usize,
    pub fold: Option<FoldPlan>,
}

pub const DEFAULT_MAX_ACTIONS: usize = 10;

/// Detects, acts and re-detects until the towel is smoothed or
/// `max_actions` smoothing actions have been spent.
pub fn run_policy(
    detector: &mut dyn FnMut(&dyn ClothScene) -> Vec<Point2>,
    scene: &mut dyn ClothScene,
    towel: &TowelSpec,
    config: &PolicyConfig,
    robot_dir: Point2,
    max_actions: usize,
    seed: u64,
) -> Rollout {
    let mut actions = Vec::new();
    let mut applied = 0;
    loop {
        let corners = detector(scene);
        let action = select_action(&corners, towel, config, seed.wrapping_add(applied as u64));
        actions.push(action);
        if action == SmoothAction::Terminate {
            return Rollout {
                actions,
                outcome: Outcome::Smoothed,
                smoothing_actions: applied,
                fold: plan_fold(&corners, robot_dir).ok(),
            };
        }
        if applied == max_actions {
            actions.pop();
            return Rollout { actions, outcome: Outcome::BudgetExhausted, smoothing_actions: applied, fold: None };
        }
        scene.apply(&action);
        applied += 1;
    }
}

pub mod sim {
    //! Corner-jitter cloth: a rectangle whose visible corners are perturbed
    //! and hidden according to a scalar disorder level.

    use super::*;
    use rand_distr::{Distribution, Normal};

    #[derive(Debug, Clone)]
    pub struct JitterCloth {
        pub towel: TowelSpec,
        pub center: Point2,
        pub angle: f64,
        /// 0 is perfectly flat; 1 is a crumpled heap.
        pub disorder: f64,
        rng: ChaCha8Rng,
        observed: Vec<Point2>,
    }

    impl JitterCloth {
        pub fn new(towel: TowelSpec, seed: u64, disorder: f64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let mut c = Self { towel, center: Point2::new(0.0, 0.0), angle, disorder, rng, observed: vec![] };
            c.observe();
            c
        }

        pub fn true_corners(&self) -> [Point2; 4] {
            let (w, h) = (self.towel.width / 2.0, self.towel.height / 2.0);
            let (s, c) = self.angle.sin_cos();
            [(-w, -h), (w, -h), (w, h), (-w, h)]
                .map(|(x, y)| Point2::new(self.center.x + x * c - y * s, self.center.y + x * s + y * c))
        }

        fn observe(&mut self) {
            let sigma = self.disorder * self.towel.height * 0.3;
            let normal = Normal::new(0.0, sigma.max(1e-300)).expect("finite");
            let corners = self.true_corners();
            let mut out = Vec::new();
            for p in corners {
                if self.rng.random::<f64>() < 1.0 - 0.7 * self.disorder {
                    let (jx, jy) = if sigma > 0.0 { (normal.sample(&mut self.rng), normal.sample(&mut self.rng)) } else { (0.0, 0.0) };
                    out.push(Point2::new(p.x + jx, p.y + jy));
                }
            }
            self.observed = out;
        }
    }

    impl ClothScene for JitterCloth {
        fn visible_corners(&self) -> Vec<Point2> {
            self.observed.clone()
        }

        fn apply(&mut self, action: &SmoothAction) {
            self.disorder = match action {
                SmoothAction::RandomReset { .. } => self.rng.random_range(0.4..0.9),
                SmoothAction::DragCorner { .. } => self.disorder * 0.6,
                SmoothAction::FlingPair { .. } => self.disorder * 0.3,
                SmoothAction::Terminate => self.disorder,
            };
            if self.disorder < 0.02 {
                self.disorder = 0.0;
            }
            self.angle = self.rng.random_range(0.0..std::f64::consts::PI);
            self.observe();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn towel() -> TowelSpec {
        TowelSpec::new(1.0, 2.0).unwrap()
    }

    fn rect(w: f64, h: f64) -> Vec<Point2> {
        vec![Point2::new(0.0, 0.0), Point2::new(w, 0.0), Point2::new(w, h), Point2::new(0.0, h)]
    }

    #[test]
    fn decision_table() {
        let cfg = PolicyConfig::centered(1.0);
        let t = towel();
        assert!(matches!(select_action(&[], &t, &cfg, 0), SmoothAction::RandomReset { .. }));
        let p = Point2::new(0.0, 0.0);
        assert!(matches!(select_action(&[p], &t, &cfg, 0), SmoothAction::DragCorner { grasp, .. } if grasp == p));
        let three = [Point2::new(0.0, 0.0), Point2::new(0.1, 0.0), Point2::new(1.0, 1.0)];
        assert_eq!(select_action(&three, &t, &cfg, 0), SmoothAction::FlingPair { a: three[0], b: three[1] });
        assert_eq!(select_action(&rect(1.0, 2.0), &t, &cfg, 0), SmoothAction::Terminate);
    }

    #[test]
    fn smoothed_predicate() {
        let t = towel();
        assert!(is_smoothed(&rect(1.0, 2.0), &t).unwrap());
        let line: Vec<Point2> = (0..4).map(|i| Point2::new(i as f64, 0.0)).collect();
        assert!(!is_smoothed(&line, &t).unwrap());
        let mut moved = rect(1.0, 2.0);
        moved[2].y += 1.0;
        assert!(!is_smoothed(&moved, &t).unwrap());
        assert_eq!(is_smoothed(&line[..3], &t), Err(PolicyError::CornerCount(3)));
    }

    #[test]
    fn unit_square_fold() {
        let plan = plan_fold(&rect(1.0, 1.0), Point2::new(0.0, -1.0)).unwrap();
        assert_eq!(plan.first[0], PickPlace { pick: Point2::new(0.0, 0.0), place: Point2::new(0.0, 1.0) });
        assert_eq!(plan.first[1], PickPlace { pick: Point2::new(1.0, 0.0), place: Point2::new(1.0, 1.0) });
        assert_eq!(plan.second, PickPlace { pick: Point2::new(0.0, 0.75), place: Point2::new(1.0, 0.75) });
    }

    #[test]
    fn degenerate_fold() {
        let line: Vec<Point2> = (0..4).map(|i| Point2::new(i as f64, 0.0)).collect();
        assert_eq!(plan_fold(&line, Point2::new(0.0, -1.0)), Err(PolicyError::Degenerate));
    }

    #[test]
    fn deprojection_cases() {
        let k = PinholeIntrinsics::new(500.0, 500.0, 1.5, 1.5).unwrap();
        let one = BinaryMask::from_fn(3, 3, |x, y| (x, y) == (1, 1)).unwrap();
        let depth = DepthPlane { width: 3, height: 3, data: vec![1.0; 9] };
        assert_eq!(median_deproject(&depth, &one, &k).unwrap(), [0.0, 0.0, 1.0]);
        let pair = BinaryMask::from_fn(3, 3, |x, y| y == 1 && x != 1).unwrap();
        let p = median_deproject(&DepthPlane { data: vec![2.0; 9], ..depth.clone() }, &pair, &k).unwrap();
        assert_eq!(p, [0.0, 0.0, 2.0]);
        let nan = DepthPlane { data: vec![f64::NAN; 9], ..depth.clone() };
        assert_eq!(median_deproject(&nan, &one, &k), Err(PolicyError::NoDepth));
        assert!(PinholeIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }
}
