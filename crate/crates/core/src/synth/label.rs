//! Keypoint sampling and identified/inpainted/outpainted labeling by cyclic
//! projection, plus the brute-force ray-cast oracle it is checked against.

use super::{RenderedView, Scene};
use crate::geometry::{project, MIN_DEPTH};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Maximum source-to-source round-trip deviation, in pixels, for a keypoint
/// to count as identified.
pub const CYCLE_PIXEL_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Identified,
    Inpainted,
    Outpainted,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Identified, Label::Inpainted, Label::Outpainted];

    pub fn name(&self) -> &'static str {
        match self {
            Label::Identified => "identified",
            Label::Inpainted => "inpainted",
            Label::Outpainted => "outpainted",
        }
    }
}

/// Source pixel with its source-camera depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

impl Keypoint {
    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledKeypoint {
    pub keypoint: Keypoint,
    /// Unclipped target pixel of the warped keypoint; `None` when the point
    /// lies behind the target camera.
    pub correspondent: Option<[f64; 2]>,
    pub label: Label,
}

impl LabeledKeypoint {
    pub fn correspondent(&self) -> Option<Vector2<f64>> {
        self.correspondent.map(Vector2::from)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelParams {
    /// Depth disagreement tolerated between the warped point and the target
    /// depth map (scene units).
    pub depth_tol: f64,
    pub pixel_threshold: f64,
}

impl LabelParams {
    /// Tolerances for a scene whose depth range spans `scale` units.
    pub fn for_scale(scale: f64) -> Self {
        Self {
            depth_tol: 0.01 * scale,
            pixel_threshold: CYCLE_PIXEL_THRESHOLD,
        }
    }
}

/// One keypoint per `cell x cell` block, sampled at a pixel center. Without
/// `jitter` the pixel is the one containing the block center; with a seed it
/// is drawn uniformly inside the block, so keypoints do not share one
/// sub-cell phase. Keypoints whose depth is invalid or whose central-difference
/// depth gradient exceeds `depth_grad_max` (scene units per pixel) are dropped.
pub fn sample_keypoints(
    view: &RenderedView,
    cell: usize,
    depth_grad_max: f64,
    jitter: Option<u64>,
) -> Vec<Keypoint> {
    let (w, h) = (view.camera.width, view.camera.height);
    let cell = cell.max(1);
    let mut rng = jitter.map(ChaCha8Rng::seed_from_u64);
    let mut out = Vec::new();
    for by in 0..h / cell {
        for bx in 0..w / cell {
            // offsets are drawn for every block so dropping one keypoint does
            // not shift the others
            let (dx, dy) = match rng.as_mut() {
                Some(r) => (r.gen_range(0..cell), r.gen_range(0..cell)),
                None => (cell / 2, cell / 2),
            };
            let (col, row) = (bx * cell + dx, by * cell + dy);
            let d = view.depth_at(col, row);
            if !(d > 0.0) {
                continue;
            }
            if depth_gradient(view, col, row) > depth_grad_max {
                continue;
            }
            out.push(Keypoint {
                x: col as f64 + 0.5,
                y: row as f64 + 0.5,
                depth: d,
            });
        }
    }
    out
}

/// Larger of the two absolute central-difference depth slopes (one-sided at
/// the image border).
fn depth_gradient(view: &RenderedView, col: usize, row: usize) -> f64 {
    let (w, h) = (view.camera.width, view.camera.height);
    let slope = |a: (usize, usize), b: (usize, usize)| {
        let span = (b.0 - a.0 + b.1 - a.1) as f64;
        if span == 0.0 {
            0.0
        } else {
            (view.depth_at(b.0, b.1) - view.depth_at(a.0, a.1)).abs() / span
        }
    };
    let gx = slope((col.saturating_sub(1), row), ((col + 1).min(w - 1), row));
    let gy = slope((col, row.saturating_sub(1)), (col, (row + 1).min(h - 1)));
    gx.max(gy)
}

/// Target depth read at continuous pixel `q`: bilinear over the four nearest
/// pixel centers when they agree within `tol`, otherwise the nearest pixel,
/// so reads next to a depth discontinuity do not blend two surfaces.
fn read_depth(view: &RenderedView, q: &Vector2<f64>, tol: f64) -> f64 {
    let (w, h) = (view.camera.width, view.camera.height);
    let axis = |u: f64, n: usize| {
        let u = (u - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (u.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - i0 as f64)
    };
    let (c0, c1, fx) = axis(q.x, w);
    let (r0, r1, fy) = axis(q.y, h);
    let taps = [
        (view.depth_at(c0, r0), (1.0 - fx) * (1.0 - fy)),
        (view.depth_at(c1, r0), fx * (1.0 - fy)),
        (view.depth_at(c0, r1), (1.0 - fx) * fy),
        (view.depth_at(c1, r1), fx * fy),
    ];
    let lo = taps.iter().map(|t| t.0).fold(f64::INFINITY, f64::min);
    let hi = taps.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= tol && lo > 0.0 {
        return taps.iter().map(|(d, wgt)| d * wgt).sum();
    }
    let col = (q.x.floor().max(0.0) as usize).min(w - 1);
    let row = (q.y.floor().max(0.0) as usize).min(h - 1);
    view.depth_at(col, row)
}

/// Labels source keypoints against the target view by cyclic projection:
/// warp to the target, read the target depth there, lift and warp back. A
/// round trip that misses the source pixel by more than the pixel threshold,
/// or a target surface nearer than the warped point by more than
/// `depth_tol`, marks the keypoint inpainted.
pub fn label_keypoints(
    source: &RenderedView,
    target: &RenderedView,
    keypoints: &[Keypoint],
    params: &LabelParams,
) -> Vec<LabeledKeypoint> {
    let pose_ts = target.pose.compose(&source.pose.inverse());
    let pose_st = pose_ts.inverse();
    keypoints
        .iter()
        .map(|kp| {
            let x_t = pose_ts.transform(&source.camera.unproject(&kp.pixel()).scale(kp.depth));
            let Ok(n) = project(&x_t) else {
                return LabeledKeypoint {
                    keypoint: *kp,
                    correspondent: None,
                    label: Label::Outpainted,
                };
            };
            let q = target.camera.to_pixel(&n);
            let labeled = |label| LabeledKeypoint {
                keypoint: *kp,
                correspondent: Some(q.into()),
                label,
            };
            if !target.camera.contains(&q) {
                return labeled(Label::Outpainted);
            }
            let d_read = read_depth(target, &q, params.depth_tol);
            if !(d_read > 0.0) || x_t.z - d_read > params.depth_tol {
                return labeled(Label::Inpainted);
            }
            let y_s = pose_st.transform(&target.camera.unproject(&q).scale(d_read));
            let round_trip = project(&y_s).map(|m| source.camera.to_pixel(&m));
            match round_trip {
                Ok(p) if (p - kp.pixel()).norm() <= params.pixel_threshold => {
                    labeled(Label::Identified)
                }
                _ => labeled(Label::Inpainted),
            }
        })
        .collect()
}

/// Exact label from scene geometry: bounds test on the warped point, then a
/// ray cast from the target camera toward the 3D point.
pub fn oracle_label(scene: &Scene, source: &RenderedView, target: &RenderedView, kp: &Keypoint) -> Label {
    let x_w = source.camera_center() + source.ray(&kp.pixel()) * kp.depth;
    let x_t = target.pose.transform(&x_w);
    if x_t.z <= MIN_DEPTH {
        return Label::Outpainted;
    }
    let q = target.camera.to_pixel(&Vector2::new(x_t.x / x_t.z, x_t.y / x_t.z));
    if !target.camera.contains(&q) {
        return Label::Outpainted;
    }
    let c: Vector3<f64> = target.camera_center();
    // the point itself sits at ray parameter 1
    match scene.cast(&c, &(x_w - c)) {
        Some((_, t)) if t < 1.0 - 1e-4 => Label::Inpainted,
        _ => Label::Identified,
    }
}

/// Visual overlap: the smaller of the two directional fractions of grid
/// keypoints (every `cell` pixels, no gradient filter) labeled identified.
pub fn estimate_overlap(a: &RenderedView, b: &RenderedView, cell: usize, params: &LabelParams) -> f64 {
    let covisible = |s: &RenderedView, t: &RenderedView| {
        let kps = sample_keypoints(s, cell, f64::INFINITY, None);
        if kps.is_empty() {
            return 0.0;
        }
        let ids = label_keypoints(s, t, &kps, params)
            .iter()
            .filter(|k| k.label == Label::Identified)
            .count();
        ids as f64 / kps.len() as f64
    };
    covisible(a, b).min(covisible(b, a))
}
