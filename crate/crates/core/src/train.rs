//! Training: minimize the mean NRE of ground-truth correspondents under the
//! predicted maps, with AdamW, a warmup/step-decay schedule and early stopping
//! on validation NRE.
//!
//! Labels only select which keypoints enter the loss; the loss itself never
//! looks at them.

use crate::autodiff::{Tape, Tensor, Var};
use crate::corrmap::{CorrespondenceMap, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::geometry::MapFrame;
use crate::net::{infer, NetConfig, NetParams, ParamVars};
use crate::scalar::Real;
use crate::synth::{Label, LabeledKeypoint, Pair};
use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_pairs: usize,
    pub keypoints_per_pair: usize,
    pub gamma: f64,
    pub seed: u64,
    pub label_mix: Vec<Label>,
    /// Training pairs visited per epoch; `None` visits all of them.
    pub pairs_per_epoch: Option<usize>,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            base_lr: 3e-3,
            weight_decay: 0.1,
            warmup_epochs: 2,
            decay_every: 5,
            decay_factor: 0.5,
            epochs: 20,
            batch_pairs: 4,
            keypoints_per_pair: 64,
            gamma: 0.5,
            seed: 0,
            label_mix: Label::ALL.to_vec(),
            pairs_per_epoch: None,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor must lie in (0, 1]");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if self.label_mix.is_empty() {
            return bad("label_mix must not be empty");
        }
        if self.batch_pairs == 0 || self.keypoints_per_pair == 0 || self.decay_every == 0 {
            return bad("batch_pairs, keypoints_per_pair and decay_every must be positive");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be finite and >= 0");
        }
        if self.pairs_per_epoch == Some(0) {
            return bad("pairs_per_epoch must be positive");
        }
        Ok(())
    }
}

/// Linear warmup from `0.1 base` to `base` over `warmup_epochs`, then
/// `base * decay_factor^(floor((epoch - decay_every) / decay_every) + 1)` once
/// `epoch >= decay_every`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let base = config.base_lr;
    if epoch < config.warmup_epochs {
        return base * (0.1 + 0.9 * epoch as f64 / config.warmup_epochs as f64);
    }
    if epoch < config.decay_every {
        return base;
    }
    let k = (epoch - config.decay_every) / config.decay_every + 1;
    base * config.decay_factor.powi(k as i32)
}

/// AdamW with decoupled weight decay, `beta = (0.9, 0.999)`, `eps = 1e-8`.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    decay: Vec<bool>,
    step: i32,
}

impl<T: Real> AdamW<T> {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    /// Optimizer state for `params`; every tensor is decayed.
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            decay: vec![true; params.len()],
            step: 0,
        }
    }

    /// Restricts weight decay to the tensors flagged in `mask`.
    pub fn with_decay_mask(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.decay.len());
        self.decay = mask;
        self
    }

    /// `p <- p - lr (m_hat / (sqrt(v_hat) + eps)) - lr wd p`.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: T, weight_decay: T) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!("{} params, {} grads, {} slots", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let (b1, b2) = (T::lit(Self::BETA1), T::lit(Self::BETA2));
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let eps = T::lit(Self::EPS);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let wd = if self.decay[k] { weight_decay } else { T::zero() };
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, (pi, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                *pi = *pi - lr * update - lr * wd * *pi;
            }
        }
        Ok(())
    }
}

/// Keypoints entering the loss for one pair and map frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// Indices into the pair's keypoint list.
    pub indices: Vec<usize>,
    /// Ground-truth correspondents in map coordinates, aligned with `indices`.
    pub points: Vec<Vector2<f64>>,
    /// Keypoints with a label in the mix whose correspondent is undefined or
    /// falls outside the map.
    pub dropped: usize,
}

pub fn select_targets(keypoints: &[LabeledKeypoint], frame: &MapFrame, label_mix: &[Label]) -> Targets {
    let mut t = Targets {
        indices: Vec::new(),
        points: Vec::new(),
        dropped: 0,
    };
    for (i, kp) in keypoints.iter().enumerate() {
        if !label_mix.contains(&kp.label) {
            continue;
        }
        match kp.correspondent().map(|q| frame.image_to_map(&q)) {
            Some(x) if frame.contains(&x) => {
                t.indices.push(i);
                t.points.push(x);
            }
            _ => t.dropped += 1,
        }
    }
    t
}

/// Mean NRE over the kept keypoints of a map batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mean_nre: f64,
    pub kept: usize,
    pub dropped: usize,
}

/// Mean NRE of `maps` (one per keypoint) at the ground-truth correspondents
/// of the keypoints whose label is in `label_mix`.
pub fn nre_loss<T: Real>(
    maps: &[CorrespondenceMap<T>],
    keypoints: &[LabeledKeypoint],
    label_mix: &[Label],
) -> Result<LossReport> {
    if maps.len() != keypoints.len() {
        return Err(Error::shape(
            "nre_loss",
            format!("{} maps for {} keypoints", maps.len(), keypoints.len()),
        ));
    }
    let Some(first) = maps.first() else {
        return Err(Error::EmptyBatch);
    };
    let t = select_targets(keypoints, first.frame(), label_mix);
    if t.indices.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let total: f64 = t
        .indices
        .iter()
        .zip(&t.points)
        .map(|(&i, x)| maps[i].nre_at(&x.cast::<T>()).as_f64())
        .sum();
    Ok(LossReport {
        mean_nre: total / t.indices.len() as f64,
        kept: t.indices.len(),
        dropped: t.dropped,
    })
}

/// Summed NRE on the tape: row `n` of `log_probs` evaluated at `points[n]`
/// with the same floor and interpolation as [`CorrespondenceMap::nre_at`].
pub fn nre_sum_on_tape<T: Real>(
    tape: &mut Tape<T>,
    log_probs: Var,
    frame: &MapFrame,
    points: &[Vector2<f64>],
) -> Result<Var> {
    let lp = tape.clamp_min(log_probs, T::lit(PROB_FLOOR.ln()));
    let pts: Vec<(T, T)> = points.iter().map(|x| (T::lit(x.x), T::lit(x.y))).collect();
    let s = tape.sample_rows(lp, frame.map_h, frame.map_w, &pts)?;
    let total = tape.sum(s);
    Ok(tape.scale(total, -T::one()))
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_nre: f64,
    pub val_nre: f64,
    pub dropped_keypoints: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation NRE.
    pub params: NetParams<f32>,
    pub best_epoch: usize,
    /// Validation NRE of the untrained network.
    pub initial_val_nre: f64,
    pub metrics: Vec<EpochMetrics>,
}

/// Validation NRE of `params` over `pairs`, all keypoints in the label mix.
pub fn evaluate<T: Real>(params: &NetParams<T>, pairs: &[Pair], gamma: f64, label_mix: &[Label]) -> Result<LossReport> {
    let (mut total, mut kept, mut dropped) = (0.0, 0usize, 0usize);
    for pair in pairs {
        let frame = frame_for(pair, gamma)?;
        let t = select_targets(&pair.keypoints, &frame, label_mix);
        dropped += t.dropped;
        if t.indices.is_empty() {
            continue;
        }
        let kps: Vec<(f64, f64)> = t.indices.iter().map(|&i| keypoint_xy(&pair.keypoints[i])).collect();
        let maps = infer(params, &pair.source.image, &pair.target.image, &kps, gamma)?;
        for (m, x) in maps.iter().zip(&t.points) {
            total += m.nre_at(&x.cast::<T>()).as_f64();
        }
        kept += t.indices.len();
    }
    if kept == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(LossReport {
        mean_nre: total / kept as f64,
        kept,
        dropped,
    })
}

fn frame_for(pair: &Pair, gamma: f64) -> Result<MapFrame> {
    let cam = &pair.target.camera;
    MapFrame::for_image(cam.width, cam.height, crate::net::STRIDE, gamma)
}

fn keypoint_xy(kp: &LabeledKeypoint) -> (f64, f64) {
    (kp.keypoint.x, kp.keypoint.y)
}

/// Forward and backward on one pair: summed NRE, kept count and gradients.
fn pair_gradients(
    params: &NetParams<f32>,
    pair: &Pair,
    indices: &[usize],
    points: &[Vector2<f64>],
    gamma: f64,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut tape = Tape::new();
    let p = ParamVars::bind(&mut tape, params);
    let kps: Vec<(f64, f64)> = indices.iter().map(|&i| keypoint_xy(&pair.keypoints[i])).collect();
    let out = p.forward(&mut tape, &pair.source.image, &pair.target.image, &kps, gamma)?;
    let loss = nre_sum_on_tape(&mut tape, out.log_probs, &out.frame, points)?;
    let value = f64::from(tape.value(loss).data()[0]);
    let grads = tape.backward(loss)?;
    Ok((value, p.vars().iter().map(|&v| grads.tensor(&tape, v)).collect()))
}

/// Weight decay applies to matrices only; biases, the padding vector and the
/// head temperature are left undecayed.
fn decay_mask(params: &NetParams<f32>) -> Vec<bool> {
    params.tensors().iter().map(|t| t.shape().len() > 1).collect()
}

pub fn train(config: &TrainConfig, train_pairs: &[Pair], val_pairs: &[Pair]) -> Result<TrainOutcome> {
    train_with_progress(config, train_pairs, val_pairs, |_| {})
}

/// [`train`] reporting each finished epoch to `progress`.
pub fn train_with_progress(
    config: &TrainConfig,
    train_pairs: &[Pair],
    val_pairs: &[Pair],
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = NetParams::<f32>::init(config.net, config.seed)?;
    let mut opt = AdamW::new(params.tensors()).with_decay_mask(decay_mask(&params));
    let mix = &config.label_mix;

    let validate = |params: &NetParams<f32>| -> Result<f64> {
        let pairs = if val_pairs.is_empty() { train_pairs } else { val_pairs };
        Ok(evaluate(params, pairs, config.gamma, mix)?.mean_nre)
    };
    let initial_val_nre = validate(&params)?;
    let mut best = (initial_val_nre, params.clone(), 0usize);
    let mut since_best = 0;
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();

    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config);
        order.shuffle(&mut rng);
        let visit = config.pairs_per_epoch.unwrap_or(order.len()).min(order.len());
        let (mut epoch_loss, mut epoch_kept, mut epoch_dropped) = (0.0, 0usize, 0usize);
        for batch in order[..visit].chunks(config.batch_pairs) {
            let mut acc: Option<Vec<Tensor<f32>>> = None;
            let mut kept = 0usize;
            for &pi in batch {
                let pair = &train_pairs[pi];
                let frame = frame_for(pair, config.gamma)?;
                let t = select_targets(&pair.keypoints, &frame, mix);
                epoch_dropped += t.dropped;
                if t.indices.is_empty() {
                    continue;
                }
                let mut pick: Vec<usize> = (0..t.indices.len()).collect();
                if pick.len() > config.keypoints_per_pair {
                    pick = rand::seq::index::sample(&mut rng, t.indices.len(), config.keypoints_per_pair).into_vec();
                    pick.sort_unstable();
                }
                let indices: Vec<usize> = pick.iter().map(|&k| t.indices[k]).collect();
                let points: Vec<Vector2<f64>> = pick.iter().map(|&k| t.points[k]).collect();
                let (loss, grads) = pair_gradients(&params, pair, &indices, &points, config.gamma)?;
                epoch_loss += loss;
                kept += indices.len();
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (x, g) in a.iter_mut().zip(&grads) {
                            for (xi, gi) in x.data_mut().iter_mut().zip(g.data()) {
                                *xi += gi;
                            }
                        }
                    }
                }
            }
            let Some(mut grads) = acc else { continue };
            let inv = 1.0 / kept as f32;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            opt.step(params.tensors_mut(), &grads, lr as f32, config.weight_decay as f32)?;
            epoch_kept += kept;
        }
        if !params.is_finite() {
            return Err(Error::NonFiniteCost);
        }
        let val_nre = validate(&params)?;
        let row = EpochMetrics {
            epoch,
            lr,
            train_nre: if epoch_kept > 0 { epoch_loss / epoch_kept as f64 } else { f64::NAN },
            val_nre,
            dropped_keypoints: epoch_dropped,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        progress(&row);
        metrics.push(row);
        if val_nre < best.0 {
            best = (val_nre, params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.1,
        best_epoch: best.2,
        initial_val_nre,
        metrics,
    })
}

pub const METRICS_HEADER: [&str; 6] = ["epoch", "lr", "train_nre", "val_nre", "dropped_keypoints", "wall_seconds"];

pub fn write_metrics_csv<W: Write>(w: W, metrics: &[EpochMetrics]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(METRICS_HEADER).map_err(csv_error)?;
    for m in metrics {
        csv.write_record([
            m.epoch.to_string(),
            m.lr.to_string(),
            m.train_nre.to_string(),
            m.val_nre.to_string(),
            m.dropped_keypoints.to_string(),
            format!("{:.3}", m.wall_seconds),
        ])
        .map_err(csv_error)?;
    }
    csv.flush()?;
    Ok(())
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::corrmap::uniform_nre;
    use crate::synth::{generate_pair, Keypoint, PairConfig};
    use rand::Rng;

    fn cfg(base_lr: f64, warmup: usize, every: usize) -> TrainConfig {
        TrainConfig {
            base_lr,
            warmup_epochs: warmup,
            decay_every: every,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        let c = cfg(1e-3, 3, 8);
        assert_eq!(lr_schedule(0, &c), 1e-4);
        assert_eq!(lr_schedule(3, &c), 1e-3);
        assert!((lr_schedule(16, &c) - 2.5e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(7, &c), 1e-3);
        assert_eq!(lr_schedule(8, &c), 5e-4);
        assert_eq!(lr_schedule(15, &c), 5e-4);
        let toy = TrainConfig::default();
        assert!((lr_schedule(1, &toy) - 1.65e-3).abs() < 1e-15);
    }

    #[test]
    fn adamw_decay_and_identity() {
        // lr * wd = 0.25 keeps the shrink factor exact in binary
        let mut p = vec![Tensor::new(vec![3], vec![1.0, 2.0, 4.0]).unwrap()];
        let g = vec![Tensor::zeros(&[3])];
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &g, 0.5, 0.5).unwrap();
        assert_eq!(p[0].data(), &[0.75, 1.5, 3.0]);
        let before = p.clone();
        opt.step(&mut p, &g, 0.1, 0.0).unwrap();
        assert_eq!(p, before);
        let bad = vec![Tensor::zeros(&[2])];
        assert!(matches!(opt.step(&mut p, &bad, 0.1, 0.0), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut p = vec![Tensor::scalar(1.0f64)];
        let mut opt = AdamW::new(&p);
        for _ in 0..200 {
            let g = vec![Tensor::scalar(2.0 * p[0].data()[0])];
            opt.step(&mut p, &g, 0.1, 0.0).unwrap();
        }
        assert!(p[0].data()[0].abs() < 1e-3, "{}", p[0].data()[0]);
    }

    fn labeled(x: f64, y: f64, q: Option<[f64; 2]>, label: Label) -> LabeledKeypoint {
        LabeledKeypoint {
            keypoint: Keypoint { x, y, depth: 3.0 },
            correspondent: q,
            label,
        }
    }

    #[test]
    fn dropped_counter_is_exact() {
        let frame = MapFrame::for_image(64, 48, 4, 0.5).unwrap();
        let kps = vec![
            labeled(2.0, 2.0, Some([10.0, 10.0]), Label::Identified),
            labeled(2.0, 2.0, Some([-31.0, 10.0]), Label::Outpainted),
            labeled(2.0, 2.0, Some([-33.0, 10.0]), Label::Outpainted),
            labeled(2.0, 2.0, Some([10.0, 72.5]), Label::Outpainted),
            labeled(2.0, 2.0, None, Label::Outpainted),
            labeled(2.0, 2.0, Some([20.0, 20.0]), Label::Inpainted),
        ];
        let t = select_targets(&kps, &frame, &Label::ALL);
        assert_eq!(t.indices, vec![0, 1, 5]);
        assert_eq!(t.dropped, 3);
        let t = select_targets(&kps, &frame, &[Label::Inpainted]);
        assert_eq!((t.indices.as_slice(), t.dropped), (&[5usize][..], 0));
        let t0 = select_targets(&kps, &MapFrame::for_image(64, 48, 4, 0.0).unwrap(), &Label::ALL);
        assert_eq!(t0.dropped, 4);
    }

    #[test]
    fn loss_examples() {
        let frame = MapFrame::for_image(64, 48, 4, 0.5).unwrap();
        let kps = vec![
            labeled(5.0, 5.0, Some([10.0, 6.0]), Label::Identified),
            labeled(9.0, 5.0, Some([-10.0, 50.0]), Label::Outpainted),
        ];
        // correspondents at cell centers: (10, 6) -> (10.5, 7.5), (-10, 50) -> (5.5, 18.5)
        let deltas = vec![
            CorrespondenceMap::<f64>::delta(frame, 7, 10),
            CorrespondenceMap::<f64>::delta(frame, 18, 5),
        ];
        let r = nre_loss(&deltas, &kps, &Label::ALL).unwrap();
        assert_eq!((r.mean_nre, r.kept, r.dropped), (0.0, 2, 0));
        let uniform = vec![CorrespondenceMap::<f64>::uniform(frame); 2];
        let r = nre_loss(&uniform, &kps, &Label::ALL).unwrap();
        assert!((r.mean_nre - uniform_nre::<f64>(&frame)).abs() < 1e-12);
        let far = vec![labeled(5.0, 5.0, Some([500.0, 6.0]), Label::Identified); 2];
        assert!(matches!(nre_loss(&uniform, &far, &Label::ALL), Err(Error::EmptyBatch)));
    }

    #[test]
    fn tape_loss_matches_maps_and_finite_differences() {
        let frame = MapFrame::from_grid(5, 4, 4, 1, 1);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..4);
            let logits = Tensor::from_fn(&[n, frame.cells()], |_| rng.gen_range(-3.0..3.0));
            let points: Vec<Vector2<f64>> = (0..n)
                .map(|_| Vector2::new(rng.gen_range(0.0..7.0), rng.gen_range(0.0..6.0)))
                .collect();
            let maps: Vec<CorrespondenceMap<f64>> = logits
                .data()
                .chunks(frame.cells())
                .map(|r| CorrespondenceMap::normalize(r, frame).unwrap())
                .collect();
            let expected: f64 = maps.iter().zip(&points).map(|(m, x)| m.nre_at(x)).sum();
            let mut tape = Tape::new();
            let l = tape.leaf(logits.clone());
            let lp = tape.log_softmax_rows(l).unwrap();
            let s = nre_sum_on_tape(&mut tape, lp, &frame, &points).unwrap();
            assert!((tape.value(s).data()[0] - expected).abs() < 1e-9);

            let err = grad_check(
                |t, v| {
                    let lp = t.log_softmax_rows(v[0])?;
                    nre_sum_on_tape(t, lp, &frame, &points)
                },
                &[logits],
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err:e}");
        }
    }

    fn tiny_pairs(seed: u64, n: usize) -> Vec<Pair> {
        let cfg = PairConfig::default();
        (0..n as u64).map(|i| generate_pair(seed + i, &cfg).unwrap()).collect()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_pairs: 2,
            keypoints_per_pair: 16,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_reports_metrics() {
        let (tr, va) = (tiny_pairs(100, 4), tiny_pairs(200, 2));
        let c = tiny_config();
        let a = train(&c, &tr, &va).unwrap();
        let b = train(&c, &tr, &va).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.metrics.len(), 3);
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!((x.train_nre, x.val_nre, x.dropped_keypoints), (y.train_nre, y.val_nre, y.dropped_keypoints));
        }
        let ln_omega = uniform_nre::<f64>(&MapFrame::for_image(64, 48, 4, 0.5).unwrap());
        assert!((a.initial_val_nre - ln_omega).abs() < 0.1 * ln_omega);

        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &a.metrics).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,lr,train_nre,val_nre,dropped_keypoints,wall_seconds\n"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn empty_dataset_and_bad_config_are_rejected() {
        assert!(matches!(train(&tiny_config(), &[], &[]), Err(Error::EmptyDataset)));
        let c = TrainConfig {
            label_mix: vec![],
            ..tiny_config()
        };
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let c = TrainConfig {
            decay_factor: 1.5,
            ..tiny_config()
        };
        assert!(c.validate().is_err());
    }
}
