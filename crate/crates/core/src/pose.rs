//! Absolute pose of the target camera from correspondence maps.
//!
//! Keypoints with known source depth give 3D points in the source camera
//! frame. P3P hypotheses from the map modes of the most confident keypoints
//! are ranked inside MSAC by the truncated NRE of every keypoint; the winner
//! is refined by graduated non-convexity (GNC) on a truncated robust NRE.
//! All poses map source-camera coordinates to target-camera coordinates.

use crate::corrmap::{cost_out, uniform_nre, CorrespondenceMap};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, MapFrame, PoseRecord, RigidPose, MIN_DEPTH};
use crate::synth::Keypoint;
use nalgebra::{DMatrix, Matrix3, Matrix6, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Smallest triangle altitude below which three 3D points count as collinear.
pub const COLLINEAR_TOL: f64 = 1e-6;
/// Bearing residual a P3P solution must meet on its own three points.
pub const P3P_RESIDUAL_TOL: f64 = 1e-9;
const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MsacConfig {
    pub iters_max: usize,
    /// Fraction of keypoints, ranked by map peak probability, that minimal
    /// samples are drawn from.
    pub top_fraction: f64,
    /// Per-keypoint NRE cap; `None` uses the uniform-map NRE of the frame.
    pub threshold: Option<f64>,
    pub seed: u64,
}

impl Default for MsacConfig {
    fn default() -> Self {
        Self {
            iters_max: 5000,
            top_fraction: 0.2,
            threshold: None,
            seed: 0,
        }
    }
}

/// Geometric annealing of the GNC scale, in map cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GncSchedule {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub steps: usize,
    pub inner_iters: usize,
    /// Nats of truncation per cell of `sigma`.
    pub kernel_c: f64,
}

impl Default for GncSchedule {
    fn default() -> Self {
        Self {
            sigma_max: 2.0,
            sigma_min: 0.6,
            steps: 5,
            inner_iters: 25,
            kernel_c: 1.0,
        }
    }
}

impl GncSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_max >= self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::InvalidConfig("GNC needs sigma_max >= sigma_min > 0".into()));
        }
        if self.steps == 0 || !(self.kernel_c > 0.0) {
            return Err(Error::InvalidConfig("GNC needs steps > 0 and kernel_c > 0".into()));
        }
        Ok(())
    }

    /// `sigma_max (sigma_min / sigma_max)^(k / (steps - 1))` for stage `k`.
    pub fn sigma(&self, stage: usize) -> f64 {
        if self.steps == 1 {
            return self.sigma_min;
        }
        let t = stage as f64 / (self.steps - 1) as f64;
        self.sigma_max * (self.sigma_min / self.sigma_max).powf(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseConfig {
    pub msac: MsacConfig,
    pub gnc: GncSchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: RigidPose<f64>,
    pub inlier_count: usize,
    /// Final robust cost; infinite when failed.
    pub cost: f64,
    pub status: PoseStatus,
    /// Minimal samples tried by MSAC.
    pub hypotheses: usize,
    /// Accepted GNC descent steps.
    pub iterations: usize,
}

impl PoseEstimate {
    fn failed(hypotheses: usize) -> Self {
        Self {
            pose: RigidPose::identity(),
            inlier_count: 0,
            cost: f64::INFINITY,
            status: PoseStatus::Failed,
            hypotheses,
            iterations: 0,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == PoseStatus::Ok
    }

    pub fn record(&self) -> PoseEstimateRecord {
        PoseEstimateRecord {
            status: self.status,
            pose: PoseRecord::from(&self.pose),
            inlier_count: self.inlier_count,
            cost: self.cost.is_finite().then_some(self.cost),
            work: WorkRecord {
                hypotheses: self.hypotheses,
                gnc_iterations: self.iterations,
            },
        }
    }
}

/// JSON form of a [`PoseEstimate`]. Work is reported as operation counts so
/// that the file is a pure function of its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimateRecord {
    pub status: PoseStatus,
    pub pose: PoseRecord,
    pub inlier_count: usize,
    pub cost: Option<f64>,
    pub work: WorkRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkRecord {
    pub hypotheses: usize,
    pub gnc_iterations: usize,
}

/// Maps paired with 3D points in the source camera frame. Keypoints without
/// a valid depth are excluded up front.
#[derive(Debug, Clone)]
pub struct PoseProblem<'a> {
    maps: Vec<&'a CorrespondenceMap<f64>>,
    points: Vec<Vector3<f64>>,
    camera: CameraModel<f64>,
    frame: MapFrame,
}

impl<'a> PoseProblem<'a> {
    /// `maps[n]` belongs to `keypoints[n]` (source pixels with depth);
    /// `target` is the camera whose pose is sought.
    pub fn new(
        maps: &'a [CorrespondenceMap<f64>],
        keypoints: &[Keypoint],
        source: &CameraModel<f64>,
        target: &CameraModel<f64>,
    ) -> Result<Self> {
        if maps.len() != keypoints.len() {
            return Err(Error::shape(
                "pose",
                format!("{} maps for {} keypoints", maps.len(), keypoints.len()),
            ));
        }
        let frame = match maps.first() {
            Some(m) => *m.frame(),
            None => MapFrame::for_image(target.width, target.height, 1, 0.0)?,
        };
        if maps.iter().any(|m| *m.frame() != frame) {
            return Err(Error::shape("pose", "maps disagree on their frame"));
        }
        let mut p = Self {
            maps: Vec::new(),
            points: Vec::new(),
            camera: *target,
            frame,
        };
        for (m, kp) in maps.iter().zip(keypoints) {
            if kp.depth > MIN_DEPTH && kp.depth.is_finite() && kp.x.is_finite() && kp.y.is_finite() {
                p.maps.push(m);
                p.points.push(source.unproject(&kp.pixel()) * kp.depth);
            }
        }
        Ok(p)
    }

    /// Correspondences with a valid depth.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn frame(&self) -> &MapFrame {
        &self.frame
    }

    /// Map coordinate of point `n` under `pose`; `None` behind the camera.
    fn to_map(&self, pose: &RigidPose<f64>, n: usize) -> Option<(Vector2<f64>, Vector3<f64>)> {
        let y = pose.transform(&self.points[n]);
        if !(y.z > MIN_DEPTH) {
            return None;
        }
        let px = self.camera.to_pixel(&Vector2::new(y.x / y.z, y.y / y.z));
        Some((self.frame.image_to_map(&px), y))
    }

    fn nre(&self, pose: &RigidPose<f64>, n: usize) -> f64 {
        match self.to_map(pose, n) {
            Some((x, _)) => self.maps[n].nre_at(&x),
            None => cost_out(),
        }
    }
}

/// MSAC score `sum_n min(nre_n, threshold)`; stops early once `bound` is
/// exceeded and then returns a value above it.
pub fn msac_score(problem: &PoseProblem, pose: &RigidPose<f64>, threshold: f64, bound: f64) -> f64 {
    let mut s = 0.0;
    for n in 0..problem.len() {
        s += problem.nre(pose, n).min(threshold);
        if s > bound {
            break;
        }
    }
    s
}

fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    // coeffs in ascending order; strip vanishing leading terms
    let scale = coeffs.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut deg = coeffs.len() - 1;
    while deg > 0 && coeffs[deg].abs() <= 1e-14 * scale {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    let lead = coeffs[deg];
    let companion = DMatrix::from_fn(deg, deg, |r, c| {
        if c == deg - 1 {
            -coeffs[r] / lead
        } else if r == c + 1 {
            1.0
        } else {
            0.0
        }
    });
    let eval = |x: f64| coeffs[..=deg].iter().rev().fold((0.0, 0.0), |(p, dp), &c| (p * x + c, dp * x + p));
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-4 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..8 {
                let (p, dp) = eval(x);
                if dp == 0.0 {
                    break;
                }
                let step = p / dp;
                x -= step;
                if step.abs() <= 1e-16 * (1.0 + x.abs()) {
                    break;
                }
            }
            x
        })
        .collect()
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64], kb: f64) -> Vec<f64> {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, x) in a.iter().enumerate() {
        out[i] += x;
    }
    for (i, y) in b.iter().enumerate() {
        out[i] += kb * y;
    }
    out
}

/// Rigid transform `q = R p + t` aligning three or more point pairs
/// (least squares; reflections excluded).
fn kabsch(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> RigidPose<f64> {
    let n = p.len() as f64;
    let pc = p.iter().sum::<Vector3<f64>>() / n;
    let qc = q.iter().sum::<Vector3<f64>>() / n;
    let h: Matrix3<f64> = p.iter().zip(q).map(|(a, b)| (a - pc) * (b - qc).transpose()).sum();
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    RigidPose {
        rotation: r,
        translation: qc - r * pc,
    }
}

/// Bearing residual of `pose` on one correspondence.
fn bearing_residual(pose: &RigidPose<f64>, bearing: &Vector3<f64>, point: &Vector3<f64>) -> f64 {
    let y = pose.transform(point);
    if y.dot(bearing) <= 0.0 {
        return f64::INFINITY;
    }
    (y.normalize() - bearing).norm()
}

/// Grunert's three-point absolute pose. `bearings` are viewing directions in
/// the camera frame (any positive scale), `points` the matching 3D points.
/// Returns every real solution that reprojects its three points within
/// [`P3P_RESIDUAL_TOL`].
pub fn p3p_solve(bearings: &[Vector3<f64>; 3], points: &[Vector3<f64>; 3]) -> Result<Vec<RigidPose<f64>>> {
    if bearings.iter().chain(points).any(|v| !v.iter().all(|c| c.is_finite())) {
        return Err(Error::NonFiniteInput("p3p input".into()));
    }
    let [p1, p2, p3] = points;
    let a = (p2 - p3).norm();
    let b = (p1 - p3).norm();
    let c = (p1 - p2).norm();
    let longest = a.max(b).max(c);
    let altitude = (p2 - p1).cross(&(p3 - p1)).norm() / longest;
    if !(longest > 0.0) || !(altitude > COLLINEAR_TOL) {
        return Err(Error::DegenerateConfiguration(format!(
            "3D points are collinear (altitude {altitude:e})"
        )));
    }
    let mut f = [Vector3::zeros(); 3];
    for (fi, bi) in f.iter_mut().zip(bearings) {
        let n = bi.norm();
        if !(n > 0.0) {
            return Err(Error::DegenerateConfiguration("zero bearing".into()));
        }
        *fi = bi / n;
    }
    let cos_a = f[1].dot(&f[2]);
    let cos_b = f[0].dot(&f[2]);
    let cos_g = f[0].dot(&f[1]);
    let (a2, b2, c2) = (a * a, b * b, c * c);

    // depths s1, s2 = u s1, s3 = v s1. Subtracting the (s1, s2) and (s2, s3)
    // cosine laws leaves u = N(v) / D(v); substituting into the (s1, s2) law
    // gives a quartic in v.
    let q = [1.0, -2.0 * cos_b, 1.0]; // 1 + v^2 - 2 v cos_b
    let num = poly_add(&[(a2 - c2) * q[0] + b2, (a2 - c2) * q[1], (a2 - c2) * q[2] - b2], &[], 0.0);
    let den = [2.0 * b2 * cos_g, -2.0 * b2 * cos_a];
    let dd = poly_mul(&den, &den);
    let nn = poly_mul(&num, &num);
    let nd = poly_mul(&num, &den);
    let lhs = poly_add(&poly_add(&dd, &nn, 1.0), &nd, -2.0 * cos_g);
    let quartic = poly_add(&lhs.iter().map(|x| x * b2).collect::<Vec<_>>(), &poly_mul(&q, &dd), -c2);

    let residuals = |s: &Vector3<f64>| {
        Vector3::new(
            s[1] * s[1] + s[2] * s[2] - 2.0 * s[1] * s[2] * cos_a - a2,
            s[0] * s[0] + s[2] * s[2] - 2.0 * s[0] * s[2] * cos_b - b2,
            s[0] * s[0] + s[1] * s[1] - 2.0 * s[0] * s[1] * cos_g - c2,
        )
    };
    let norm2 = a2 + b2 + c2;
    let mut out: Vec<RigidPose<f64>> = Vec::new();
    for v in real_roots(&quartic) {
        if !(v > 0.0) {
            continue;
        }
        let qv = 1.0 + v * v - 2.0 * v * cos_b;
        if !(qv > 0.0) {
            continue;
        }
        let s1 = b / qv.sqrt();
        let s3 = v * s1;
        let disc = c2 - s1 * s1 * (1.0 - cos_g * cos_g);
        if disc < -1e-6 * c2 {
            continue;
        }
        let root = disc.max(0.0).sqrt();
        let best = [s1 * cos_g + root, s1 * cos_g - root]
            .into_iter()
            .filter(|&s2| s2 > 0.0)
            .map(|s2| Vector3::new(s1, s2, s3))
            .min_by(|x, y| residuals(x).norm().total_cmp(&residuals(y).norm()));
        let Some(mut s) = best else { continue };
        for _ in 0..10 {
            let r = residuals(&s);
            if r.norm() <= 1e-15 * norm2 {
                break;
            }
            let j = Matrix3::new(
                0.0,
                2.0 * (s[1] - s[2] * cos_a),
                2.0 * (s[2] - s[1] * cos_a),
                2.0 * (s[0] - s[2] * cos_b),
                0.0,
                2.0 * (s[2] - s[0] * cos_b),
                2.0 * (s[0] - s[1] * cos_g),
                2.0 * (s[1] - s[0] * cos_g),
                0.0,
            );
            match j.lu().solve(&r) {
                Some(step) => s -= step,
                None => break,
            }
        }
        if !(s.iter().all(|&x| x > 0.0)) || residuals(&s).norm() > 1e-8 * norm2 {
            continue;
        }
        let cam: Vec<Vector3<f64>> = (0..3).map(|i| f[i] * s[i]).collect();
        let pose = kabsch(points, &cam);
        let ok = (0..3).all(|i| bearing_residual(&pose, &f[i], &points[i]) <= P3P_RESIDUAL_TOL);
        let duplicate = out.iter().any(|o| {
            (o.rotation - pose.rotation).norm() < 1e-9 && (o.translation - pose.translation).norm() < 1e-9
        });
        if ok && !duplicate {
            out.push(pose);
        }
    }
    Ok(out)
}

/// Indices of the `ceil(top_fraction * n)` (at least 3) keypoints with the
/// highest map peak; ties keep the lower index first.
fn top_keypoints(problem: &PoseProblem, top_fraction: f64) -> Vec<usize> {
    let n = problem.len();
    let mut order: Vec<usize> = (0..n).collect();
    let peaks: Vec<f64> = problem.maps.iter().map(|m| m.peak_probability()).collect();
    order.sort_by(|&i, &j| peaks[j].total_cmp(&peaks[i]).then(i.cmp(&j)));
    let m = ((top_fraction * n as f64).ceil() as usize).max(3).min(n);
    order.truncate(m);
    order
}

fn bearing_of(problem: &PoseProblem, n: usize) -> Vector3<f64> {
    let (px, _) = problem.maps[n].argmax_to_image();
    problem.camera.unproject(&px)
}

/// P3P hypotheses from map modes inside MSAC. Fails with fewer than three
/// correspondences or when no hypothesis beats the all-truncated score.
pub fn msac_estimate(problem: &PoseProblem, config: &MsacConfig) -> PoseEstimate {
    let n = problem.len();
    if n < 3 {
        return PoseEstimate::failed(0);
    }
    let threshold = config.threshold.unwrap_or_else(|| uniform_nre(problem.frame()));
    let pool = top_keypoints(problem, config.top_fraction);
    let m = pool.len();
    let all_triples = m * (m - 1) * (m - 2) / 6;
    let mut triples: Vec<[usize; 3]> = Vec::new();
    if all_triples <= config.iters_max {
        for i in 0..m {
            for j in i + 1..m {
                for k in j + 1..m {
                    triples.push([pool[i], pool[j], pool[k]]);
                }
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for _ in 0..config.iters_max {
            let s = rand::seq::index::sample(&mut rng, m, 3);
            triples.push([pool[s.index(0)], pool[s.index(1)], pool[s.index(2)]]);
        }
    }
    let degenerate = threshold * n as f64;
    let mut best: Option<(f64, RigidPose<f64>)> = None;
    for t in &triples {
        let bearings = t.map(|i| bearing_of(problem, i));
        let points = t.map(|i| problem.points[i]);
        let Ok(solutions) = p3p_solve(&bearings, &points) else { continue };
        for pose in solutions {
            let bound = best.as_ref().map_or(degenerate, |b| b.0);
            let score = msac_score(problem, &pose, threshold, bound);
            if score < bound {
                best = Some((score, pose));
            }
        }
    }
    match best {
        Some((score, pose)) => PoseEstimate {
            inlier_count: (0..n).filter(|&i| problem.nre(&pose, i) < threshold).count(),
            pose,
            cost: score,
            status: PoseStatus::Ok,
            hypotheses: triples.len(),
            iterations: 0,
        },
        None => PoseEstimate::failed(triples.len()),
    }
}

/// Truncated robust kernel on the NRE excess over the map's own minimum:
/// `rho = min(excess, c sigma)`. Returns the value and whether the term is
/// below the cap (and so carries gradient).
pub fn robust_kernel(excess: f64, sigma: f64, c: f64) -> (f64, bool) {
    let cap = c * sigma;
    if excess < cap {
        (excess, true)
    } else {
        (cap, false)
    }
}

/// Lowest NRE a map attains: `-ln` of its peak probability.
fn nre_floor(map: &CorrespondenceMap<f64>) -> f64 {
    let (r, c) = map.argmax_cell();
    -map.log_value(r, c)
}

/// GNC objective at scale `sigma`, its gradient with respect to the left
/// increment `(omega, dt)` at `pose`, and the Gauss-Newton matrix of the
/// active map coordinates.
pub fn gnc_objective(
    problem: &PoseProblem,
    floors: &[f64],
    pose: &RigidPose<f64>,
    sigma: f64,
    c: f64,
) -> (f64, Vector6<f64>, Matrix6<f64>) {
    let mut cost = 0.0;
    let mut grad = Vector6::zeros();
    let mut gn = Matrix6::zeros();
    let inv_s = 1.0 / problem.frame.stride as f64;
    let (fx, fy) = (problem.camera.fx, problem.camera.fy);
    for n in 0..problem.len() {
        let Some((x, y)) = problem.to_map(pose, n) else {
            cost += robust_kernel(cost_out::<f64>() - floors[n], sigma, c).0;
            continue;
        };
        let (e, g) = problem.maps[n].nre_and_grad(&x);
        let (rho, active) = robust_kernel(e - floors[n], sigma, c);
        cost += rho;
        if !active || !problem.frame.contains(&x) {
            continue;
        }
        // d x_map / d y, then d y / d (omega, dt) = [-[y]x | I]
        let iz = 1.0 / y.z;
        let dxy = nalgebra::Matrix2x3::new(
            fx * inv_s * iz,
            0.0,
            -fx * inv_s * y.x * iz * iz,
            0.0,
            fy * inv_s * iz,
            -fy * inv_s * y.y * iz * iz,
        );
        let mut dy = nalgebra::Matrix3x6::zeros();
        dy.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-y.cross_matrix()));
        dy.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
        let j = dxy * dy;
        grad += j.transpose() * g;
        gn += j.transpose() * j;
    }
    (cost, grad, gn)
}

/// Robust cost only, for line searches.
fn gnc_cost(problem: &PoseProblem, floors: &[f64], pose: &RigidPose<f64>, sigma: f64, c: f64) -> f64 {
    (0..problem.len())
        .map(|n| robust_kernel(problem.nre(pose, n) - floors[n], sigma, c).0)
        .sum()
}

/// GNC refinement from `initial`; `trace` receives the cost after every
/// accepted step.
pub fn gnc_refine_traced(
    problem: &PoseProblem,
    initial: &RigidPose<f64>,
    schedule: &GncSchedule,
    mut trace: impl FnMut(f64),
) -> Result<PoseEstimate> {
    schedule.validate()?;
    if problem.len() < 3 {
        return Ok(PoseEstimate::failed(0));
    }
    if problem.maps.iter().any(|m| m.values().iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteCost);
    }
    let floors: Vec<f64> = problem.maps.iter().map(|m| nre_floor(m)).collect();
    let c = schedule.kernel_c;
    let mut pose = *initial;
    let mut accepted = 0;
    let mut cost = f64::INFINITY;
    for stage in 0..schedule.steps {
        let sigma = schedule.sigma(stage);
        for _ in 0..schedule.inner_iters {
            let (f, g, gn) = gnc_objective(problem, &floors, &pose, sigma, c);
            cost = f;
            if !f.is_finite() {
                return Err(Error::NonFiniteCost);
            }
            if g.norm() == 0.0 {
                break;
            }
            let damping = 1e-6 * (gn.trace() / 6.0) + 1e-12;
            let dir = (gn + Matrix6::identity() * damping)
                .cholesky()
                .map(|ch| -ch.solve(&g))
                .filter(|d| d.dot(&g) < 0.0)
                .unwrap_or(-g);
            let slope = g.dot(&dir);
            let mut alpha = 1.0;
            let mut next = None;
            for _ in 0..MAX_HALVINGS {
                let step: [f64; 6] = std::array::from_fn(|i| alpha * dir[i]);
                let cand = pose.retract(&step);
                let fc = gnc_cost(problem, &floors, &cand, sigma, c);
                if fc <= f + ARMIJO * alpha * slope {
                    next = Some((cand, fc));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((cand, fc)) = next else { break };
            pose = cand.orthonormalized();
            cost = fc;
            accepted += 1;
            trace(fc);
        }
    }
    let sigma = schedule.sigma(schedule.steps - 1);
    let final_cost = gnc_cost(problem, &floors, &pose, sigma, c);
    let inliers = (0..problem.len())
        .filter(|&n| robust_kernel(problem.nre(&pose, n) - floors[n], sigma, c).1)
        .count();
    debug_assert!(final_cost <= cost + 1e-9 * (1.0 + cost.abs()) || !cost.is_finite());
    Ok(PoseEstimate {
        pose,
        inlier_count: inliers,
        cost: final_cost,
        status: PoseStatus::Ok,
        hypotheses: 0,
        iterations: accepted,
    })
}

pub fn gnc_refine(problem: &PoseProblem, initial: &RigidPose<f64>, schedule: &GncSchedule) -> Result<PoseEstimate> {
    gnc_refine_traced(problem, initial, schedule, |_| {})
}

/// MSAC initialization followed by GNC refinement.
pub fn estimate(problem: &PoseProblem, config: &PoseConfig) -> Result<PoseEstimate> {
    let init = msac_estimate(problem, &config.msac);
    if !init.is_ok() {
        return Ok(init);
    }
    let mut refined = gnc_refine(problem, &init.pose, &config.gnc)?;
    refined.hypotheses = init.hypotheses;
    Ok(refined)
}
