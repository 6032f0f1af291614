//! Evaluation: per-label NRE and argmax-error histograms, the expected error
//! of a uniform guess, pose precision against overlap, and field of view as
//! a function of the padding ratio.

use crate::corrmap::{uniform_nre, CorrespondenceMap};
use crate::error::Result;
use crate::geometry::{pose_error, CameraModel, MapFrame, RigidPose};
use crate::pose::PoseEstimate;
use crate::scalar::Real;
use crate::synth::{Label, LabeledKeypoint};
use crate::train::csv_error;
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const HISTOGRAM_BINS: usize = 40;
/// Monte Carlo samples behind each expected-uniform-error estimate.
pub const UNIFORM_ERROR_SAMPLES: usize = 10_000;
/// Lower end of the overlap range of the pose precision curve.
pub const MIN_OVERLAP: f64 = 0.02;

/// Uniform bins over `[lo, hi]`; out-of-range samples land in the first or
/// last bin, so counts always sum to the number of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        assert!(hi > lo && bins > 0);
        Self {
            lo,
            hi,
            counts: vec![0; bins],
        }
    }

    pub fn bin_of(&self, v: f64) -> usize {
        let n = self.counts.len();
        let t = (v - self.lo) / (self.hi - self.lo) * n as f64;
        if t.is_nan() || t < 0.0 {
            0
        } else {
            (t as usize).min(n - 1)
        }
    }

    pub fn add(&mut self, v: f64) {
        let b = self.bin_of(v);
        self.counts[b] += 1;
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + w * bin as f64, self.lo + w * (bin + 1) as f64)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// One keypoint's map evaluated against its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointEval {
    pub label: Label,
    /// NRE at the ground-truth correspondent (nats).
    pub nre: f64,
    /// Target-image distance between the map mode and the correspondent (pixels).
    pub argmax_error: f64,
    /// Ground-truth correspondent in target pixels.
    pub correspondent: [f64; 2],
}

/// Evaluates `maps[n]` against `keypoints[n]`. Keypoints whose correspondent
/// is undefined or outside the map are counted as dropped instead.
pub fn evaluate_maps<T: Real>(
    maps: &[CorrespondenceMap<T>],
    keypoints: &[LabeledKeypoint],
) -> (Vec<KeypointEval>, usize) {
    let mut out = Vec::new();
    let mut dropped = 0;
    for (m, kp) in maps.iter().zip(keypoints) {
        let frame = m.frame();
        let Some(q) = kp.correspondent() else {
            dropped += 1;
            continue;
        };
        let x = frame.image_to_map(&q);
        if !frame.contains(&x) {
            dropped += 1;
            continue;
        }
        let (mode, _) = m.argmax_to_image();
        out.push(KeypointEval {
            label: kp.label,
            nre: m.nre_at(&x.cast::<T>()).as_f64(),
            argmax_error: (Vector2::new(mode.x.as_f64(), mode.y.as_f64()) - q).norm(),
            correspondent: [q.x, q.y],
        });
    }
    (out, dropped)
}

/// Mean distance from a uniformly drawn point of the map extent (in target
/// pixels) to a uniformly drawn ground-truth point of `targets`.
pub fn expected_uniform_error(frame: &MapFrame, targets: &[[f64; 2]], samples: usize, seed: u64) -> f64 {
    if targets.is_empty() || samples == 0 {
        return f64::NAN;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (frame.map_w as f64, frame.map_h as f64);
    let mut total = 0.0;
    for _ in 0..samples {
        let t = targets[rng.gen_range(0..targets.len())];
        let u = frame.map_to_image(&Vector2::new(rng.gen_range(0.0..w), rng.gen_range(0.0..h)));
        total += ((u.x - t[0]).powi(2) + (u.y - t[1]).powi(2)).sqrt();
    }
    total / samples as f64
}

/// Per-label histogram with its reference marker (`ln|Omega|` for NRE,
/// `E_U` for argmax errors).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelHistogram {
    pub label: Label,
    pub histogram: Histogram,
    pub marker: f64,
    pub mean: f64,
    pub median: f64,
}

fn summarize(label: Label, values: &[f64], mut histogram: Histogram, marker: f64) -> LabelHistogram {
    for &v in values {
        histogram.add(v);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = match sorted.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    let mean = if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    };
    LabelHistogram {
        label,
        histogram,
        marker,
        mean,
        median,
    }
}

/// NRE histograms over `[0, ln|Omega| + 2]`, one per label (empty labels
/// yield empty histograms).
pub fn nre_histogram(evals: &[KeypointEval], frame: &MapFrame) -> Vec<LabelHistogram> {
    let ln_omega: f64 = uniform_nre(frame);
    Label::ALL
        .iter()
        .map(|&label| {
            let v: Vec<f64> = evals.iter().filter(|e| e.label == label).map(|e| e.nre).collect();
            summarize(label, &v, Histogram::new(0.0, ln_omega + 2.0, HISTOGRAM_BINS), ln_omega)
        })
        .collect()
}

/// Argmax-error histograms over `[0, map diagonal]` in target pixels, with
/// the per-label Monte Carlo `E_U` as marker.
pub fn argmax_error_histogram(evals: &[KeypointEval], frame: &MapFrame, seed: u64) -> Vec<LabelHistogram> {
    let s = frame.stride as f64;
    let diagonal = s * ((frame.map_w as f64).powi(2) + (frame.map_h as f64).powi(2)).sqrt();
    Label::ALL
        .iter()
        .enumerate()
        .map(|(k, &label)| {
            let chosen: Vec<&KeypointEval> = evals.iter().filter(|e| e.label == label).collect();
            let v: Vec<f64> = chosen.iter().map(|e| e.argmax_error).collect();
            let targets: Vec<[f64; 2]> = chosen.iter().map(|e| e.correspondent).collect();
            let e_u = expected_uniform_error(frame, &targets, UNIFORM_ERROR_SAMPLES, seed.wrapping_add(k as u64));
            summarize(label, &v, Histogram::new(0.0, diagonal, HISTOGRAM_BINS), e_u)
        })
        .collect()
}

/// Outcome of one pair's pose estimate against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseOutcome {
    pub overlap: f64,
    /// `(rotation degrees, translation)`; `None` for a failed estimate.
    pub error: Option<(f64, f64)>,
}

impl PoseOutcome {
    pub fn new(overlap: f64, estimate: &PoseEstimate, gt: &RigidPose<f64>) -> Self {
        Self {
            overlap,
            error: estimate.is_ok().then(|| pose_error(&estimate.pose, gt)),
        }
    }

    pub fn success(&self, tau_t: f64, tau_r: f64) -> bool {
        matches!(self.error, Some((r, t)) if r <= tau_r && t <= tau_t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub max_overlap: f64,
    pub pairs: usize,
    /// Success fraction; `NaN` when no pair falls in range.
    pub precision: f64,
}

/// For each `x`, the fraction of pairs with overlap in `[2%, x]` whose pose
/// error is within `(tau_t, tau_r)`; failed estimates count as incorrect.
pub fn pose_precision_curve(outcomes: &[PoseOutcome], xs: &[f64], tau_t: f64, tau_r: f64) -> Vec<CurvePoint> {
    xs.iter()
        .map(|&x| {
            let (mut n, mut ok) = (0usize, 0usize);
            for o in outcomes.iter().filter(|o| o.overlap >= MIN_OVERLAP && o.overlap <= x) {
                n += 1;
                ok += usize::from(o.success(tau_t, tau_r));
            }
            CurvePoint {
                max_overlap: x,
                pairs: n,
                precision: if n == 0 { f64::NAN } else { ok as f64 / n as f64 },
            }
        })
        .collect()
}

/// Horizontal and vertical field of view (degrees) of the padded map:
/// `2 atan((1 + 2 gamma) (size / 2) / f)`.
pub fn fov_of_gamma(camera: &CameraModel<f64>, gamma: f64) -> (f64, f64) {
    let k = 1.0 + 2.0 * gamma;
    let h = 2.0 * (k * camera.width as f64 / 2.0 / camera.fx).atan();
    let v = 2.0 * (k * camera.height as f64 / 2.0 / camera.fy).atan();
    (h.to_degrees(), v.to_degrees())
}

/// Ground-truth maps: a Gaussian of `sigma` cells at each correspondent
/// inside the map, uniform where the correspondent is undefined or outside.
pub fn oracle_maps(keypoints: &[LabeledKeypoint], frame: &MapFrame, sigma: f64) -> Result<Vec<CorrespondenceMap<f64>>> {
    keypoints
        .iter()
        .map(|kp| match kp.correspondent().map(|q| frame.image_to_map(&q)) {
            Some(x) if frame.contains(&x) => CorrespondenceMap::gaussian(*frame, &x, sigma),
            _ => Ok(CorrespondenceMap::uniform(*frame)),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseCurve {
    pub tau_t: f64,
    pub tau_r: f64,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nre: Vec<LabelHistogram>,
    pub argmax: Vec<LabelHistogram>,
    pub dropped: usize,
    pub pose_curves: Vec<PoseCurve>,
}

fn write_histograms<W: Write>(w: W, hists: &[LabelHistogram], marker: &str) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["label", "bin_lo", "bin_hi", "count", marker]).map_err(csv_error)?;
    for h in hists {
        for (b, count) in h.histogram.counts.iter().enumerate() {
            let (lo, hi) = h.histogram.edges(b);
            csv.write_record([
                h.label.name().to_string(),
                lo.to_string(),
                hi.to_string(),
                count.to_string(),
                h.marker.to_string(),
            ])
            .map_err(csv_error)?;
        }
    }
    csv.flush()?;
    Ok(())
}

impl EvalReport {
    pub fn write_nre_csv<W: Write>(&self, w: W) -> Result<()> {
        write_histograms(w, &self.nre, "ln_omega")
    }

    pub fn write_argmax_csv<W: Write>(&self, w: W) -> Result<()> {
        write_histograms(w, &self.argmax, "e_u")
    }

    /// One row per label: counts, means, medians and markers, plus the
    /// dropped-keypoint total.
    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["label", "count", "mean_nre", "ln_omega", "median_error", "e_u", "dropped"])
            .map_err(csv_error)?;
        for (n, a) in self.nre.iter().zip(&self.argmax) {
            csv.write_record([
                n.label.name().to_string(),
                n.histogram.total().to_string(),
                n.mean.to_string(),
                n.marker.to_string(),
                a.median.to_string(),
                a.marker.to_string(),
                self.dropped.to_string(),
            ])
            .map_err(csv_error)?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn write_pose_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["tau_t", "tau_r", "max_overlap", "pairs", "precision"]).map_err(csv_error)?;
        for c in &self.pose_curves {
            for p in &c.points {
                csv.write_record([
                    c.tau_t.to_string(),
                    c.tau_r.to_string(),
                    p.max_overlap.to_string(),
                    p.pairs.to_string(),
                    p.precision.to_string(),
                ])
                .map_err(csv_error)?;
            }
        }
        csv.flush()?;
        Ok(())
    }
}

/// Pose-curve settings for [`build_report`]. Translation thresholds are
/// fractions of the scene scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    /// `(translation fraction of scene scale, rotation degrees)` pairs.
    pub thresholds: Vec<(f64, f64)>,
    /// Upper overlap bounds of the cumulative precision curve.
    pub overlap_grid: Vec<f64>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![(0.05, 20.0), (0.01, 1.0)],
            overlap_grid: (1..=10).map(|k| k as f64 / 10.0).collect(),
        }
    }
}

/// Assembles an [`EvalReport`] from per-keypoint evaluations and per-pair
/// pose outcomes. `frame` must be the frame every map was evaluated in.
pub fn build_report(
    evals: &[KeypointEval],
    dropped: usize,
    frame: &MapFrame,
    outcomes: &[PoseOutcome],
    scene_scale: f64,
    config: &ReportConfig,
    seed: u64,
) -> EvalReport {
    let pose_curves = if outcomes.is_empty() {
        Vec::new()
    } else {
        config
            .thresholds
            .iter()
            .map(|&(frac, tau_r)| {
                let tau_t = frac * scene_scale;
                PoseCurve {
                    tau_t,
                    tau_r,
                    points: pose_precision_curve(outcomes, &config.overlap_grid, tau_t, tau_r),
                }
            })
            .collect()
    };
    EvalReport {
        nre: nre_histogram(evals, frame),
        argmax: argmax_error_histogram(evals, frame, seed),
        dropped,
        pose_curves,
    }
}
