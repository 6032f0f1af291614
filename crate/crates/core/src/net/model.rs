//! Forward pass of the network on a [`Tape`].

use super::{NetConfig, NetParams, STRIDE};
use crate::autodiff::{Tape, Tensor, Var};
use crate::corrmap::CorrespondenceMap;
use crate::error::{Error, Result};
use crate::geometry::MapFrame;
use crate::gridio::Grid;
use crate::scalar::Real;

/// Parameters recorded as leaves of one tape.
pub struct ParamVars {
    config: NetConfig,
    names: Vec<String>,
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn bind<T: Real>(tape: &mut Tape<T>, params: &NetParams<T>) -> Self {
        Self {
            config: params.config,
            names: params.names().to_vec(),
            vars: params.tensors().iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name} missing from layout"));
        self.vars[i]
    }
}

/// Output of [`ParamVars::forward`].
pub struct Forward {
    /// `[keypoints, cells]` log probabilities of the correspondence maps.
    pub log_probs: Var,
    pub frame: MapFrame,
}

/// Siamese backbone: two stride-2 3x3 convolutions with ReLU and a 1x1
/// compression. Returns the `[h/s * w/s, d]` grid with its height and width.
pub fn extract_features<T: Real>(tape: &mut Tape<T>, p: &ParamVars, image: &Grid) -> Result<(Var, usize, usize)> {
    let (h, w) = (image.height, image.width);
    if h % STRIDE != 0 || w % STRIDE != 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            "extract_features",
            format!("{w}x{h} image is not a multiple of stride {STRIDE}"),
        ));
    }
    let x = tape.leaf(Tensor::new(
        vec![h * w, 1],
        image.data.iter().map(|&v| T::lit(f64::from(v) - 0.5)).collect(),
    )?);
    let (y, h1, w1) = tape.conv2d(x, h, w, p.get("conv1.w"), p.get("conv1.b"), 3, 2, 1)?;
    let y = tape.relu(y);
    let (y, h2, w2) = tape.conv2d(y, h1, w1, p.get("conv2.w"), p.get("conv2.b"), 3, 2, 1)?;
    let y = tape.relu(y);
    let y = tape.matmul(y, p.get("compress.w"))?;
    let y = tape.add_row(y, p.get("compress.b"))?;
    Ok((y, h2, w2))
}

/// Surrounds a `grid_h x grid_w` target grid with `round(gamma * dim)` cells
/// of the learned vector on each side.
pub fn pad_features<T: Real>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    grid: Var,
    grid_h: usize,
    grid_w: usize,
    gamma: f64,
) -> Result<(Var, MapFrame)> {
    let frame = MapFrame::for_image(grid_w * STRIDE, grid_h * STRIDE, STRIDE, gamma)?;
    if frame.pad_x == 0 && frame.pad_y == 0 {
        return Ok((grid, frame));
    }
    let v = tape.pad2d(grid, p.get("lambda"), grid_h, grid_w, frame.pad_x, frame.pad_y)?;
    Ok((v, frame))
}

/// Normalized coordinates of every cell center of `frame`, row-major: the
/// unpadded grid spans `(-1, 1)` on each axis and padded cells extend beyond.
pub fn grid_coordinates(frame: &MapFrame) -> Vec<(f64, f64)> {
    let (gw, gh) = (frame.grid_w() as f64, frame.grid_h() as f64);
    let mut out = Vec::with_capacity(frame.cells());
    for r in 0..frame.map_h {
        for c in 0..frame.map_w {
            let u = c as f64 - frame.pad_x as f64 + 0.5;
            let v = r as f64 - frame.pad_y as f64 + 0.5;
            out.push((2.0 * u / gw - 1.0, 2.0 * v / gh - 1.0));
        }
    }
    out
}

/// Per-cell encoding `[cells, d]` from the 2 -> 8 -> 16 -> d ReLU MLP.
pub fn positional_encoding<T: Real>(tape: &mut Tape<T>, p: &ParamVars, frame: &MapFrame) -> Result<Var> {
    let coords = grid_coordinates(frame);
    let flat = coords.iter().flat_map(|&(x, y)| [T::lit(x), T::lit(y)]).collect();
    let x = tape.leaf(Tensor::new(vec![coords.len(), 2], flat)?);
    let mut h = x;
    for (i, layer) in ["pe1", "pe2", "pe3"].iter().enumerate() {
        h = tape.matmul(h, p.get(&format!("{layer}.w")))?;
        h = tape.add_row(h, p.get(&format!("{layer}.b")))?;
        if i < 2 {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Single-head gated attention `softmax_rows(g S) V` with
/// `S = Q K^T / sqrt(d_h)` and one gate per query, `g_i = sigmoid(max_j S_ij)`,
/// so each query's output is independent of the other queries in the batch.
pub fn gated_attention<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (_, dq) = tape.value(q).dims2("gated_attention")?;
    let (nk, dk) = tape.value(k).dims2("gated_attention")?;
    let (nv, _) = tape.value(v).dims2("gated_attention")?;
    if dq == 0 || dq != dk || nk != nv {
        return Err(Error::shape(
            "gated_attention",
            format!("query width {dq}, key width {dk}, {nk} keys for {nv} values"),
        ));
    }
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, T::one() / T::from_usize_lossy(dq).sqrt());
    let m = tape.max_rows(scores)?;
    let g = tape.sigmoid(m);
    let gated = tape.scale_rows(scores, g)?;
    let a = tape.softmax_rows(gated)?;
    tape.matmul(a, v)
}

fn linear<T: Real>(tape: &mut Tape<T>, p: &ParamVars, x: Var, name: &str) -> Result<Var> {
    let y = tape.matmul(x, p.get(&format!("{name}.w")))?;
    tape.add_row(y, p.get(&format!("{name}.b")))
}

/// Residual multi-head gated attention of `x` over `memory` followed by a
/// residual ReLU feed-forward block. With `pool = Some((h, w))` the projected
/// keys and values (a `h x w` grid) are max-pooled with stride 2.
fn attention_layer<T: Real>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    name: &str,
    x: Var,
    memory: Var,
    pool: Option<(usize, usize)>,
) -> Result<Var> {
    let d = p.config.channels;
    let dh = d / p.config.heads;
    let q = linear(tape, p, x, &format!("{name}.q"))?;
    let mut k = linear(tape, p, memory, &format!("{name}.k"))?;
    let mut v = linear(tape, p, memory, &format!("{name}.v"))?;
    if let Some((h, w)) = pool {
        k = tape.max_pool2(k, h, w)?.0;
        v = tape.max_pool2(v, h, w)?.0;
    }
    let mut heads = Vec::with_capacity(p.config.heads);
    for i in 0..p.config.heads {
        let qh = tape.slice_cols(q, i * dh, dh)?;
        let kh = tape.slice_cols(k, i * dh, dh)?;
        let vh = tape.slice_cols(v, i * dh, dh)?;
        heads.push(gated_attention(tape, qh, kh, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let o = linear(tape, p, cat, &format!("{name}.o"))?;
    let x = tape.add(x, o)?;
    let f = linear(tape, p, x, &format!("{name}.ffn1"))?;
    let f = tape.relu(f);
    let f = linear(tape, p, f, &format!("{name}.ffn2"))?;
    tape.add(x, f)
}

/// Source keypoint pixels in feature-grid coordinates.
pub fn keypoint_grid_points<T: Real>(keypoints: &[(f64, f64)]) -> Vec<(T, T)> {
    let s = STRIDE as f64;
    keypoints.iter().map(|&(x, y)| (T::lit(x / s), T::lit(y / s))).collect()
}

impl ParamVars {
    /// Correspondence log probabilities for source `keypoints` (pixels) over
    /// the target grid padded by `gamma`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        source: &Grid,
        target: &Grid,
        keypoints: &[(f64, f64)],
        gamma: f64,
    ) -> Result<Forward> {
        if keypoints.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let (hs, gh, gw) = extract_features(tape, self, source)?;
        let (ht, th, tw) = extract_features(tape, self, target)?;
        if (gh, gw) != (th, tw) {
            return Err(Error::shape("forward", "source and target images differ in size"));
        }
        for &(x, y) in keypoints {
            if !(x >= 0.0 && y >= 0.0 && x <= source.width as f64 && y <= source.height as f64) {
                return Err(Error::shape("forward", format!("keypoint ({x}, {y}) outside the source image")));
            }
        }
        let (htp, frame) = pad_features(tape, self, ht, gh, gw, gamma)?;

        let src_frame = MapFrame::from_grid(gw, gh, STRIDE, 0, 0);
        let pe_s = positional_encoding(tape, self, &src_frame)?;
        let hs = tape.add(hs, pe_s)?;
        let pe_t = positional_encoding(tape, self, &frame)?;
        let htp = tape.add(htp, pe_t)?;

        let points = keypoint_grid_points::<T>(keypoints);
        let mut ds = tape.bilinear_sample(hs, gh, gw, &points)?;

        ds = attention_layer(tape, self, "src_cross", ds, hs, None)?;
        let dt = attention_layer(tape, self, "tgt_self", htp, htp, Some((frame.map_h, frame.map_w)))?;
        for i in 0..self.config.cross_layers {
            ds = attention_layer(tape, self, &format!("cross{i}"), ds, dt, None)?;
        }
        let logits = tape.matmul_nt(ds, dt)?;
        let logits = tape.scale_by(logits, self.get("head.scale"))?;
        let log_probs = tape.log_softmax_rows(logits)?;
        Ok(Forward { log_probs, frame })
    }
}

/// Largest keypoint set passed through one forward pass at inference, which
/// bounds the tape size.
pub const INFER_BATCH: usize = 64;

/// Correspondence maps for `keypoints` with frozen parameters. More than
/// [`INFER_BATCH`] keypoints are split into interleaved batches (`k`, `k + n`,
/// `k + 2n`, ...); each map depends only on its own keypoint.
pub fn infer<T: Real>(
    params: &NetParams<T>,
    source: &Grid,
    target: &Grid,
    keypoints: &[(f64, f64)],
    gamma: f64,
) -> Result<Vec<CorrespondenceMap<T>>> {
    if keypoints.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = keypoints.len().div_ceil(INFER_BATCH);
    let mut maps: Vec<Option<CorrespondenceMap<T>>> = vec![None; keypoints.len()];
    for k in 0..n {
        let idx: Vec<usize> = (k..keypoints.len()).step_by(n).collect();
        let batch: Vec<(f64, f64)> = idx.iter().map(|&i| keypoints[i]).collect();
        let mut tape = Tape::new();
        let p = ParamVars::bind(&mut tape, params);
        let out = p.forward(&mut tape, source, target, &batch, gamma)?;
        let lp = tape.value(out.log_probs);
        for (&i, row) in idx.iter().zip(lp.data().chunks_exact(out.frame.cells())) {
            maps[i] = Some(CorrespondenceMap::normalize(row, out.frame)?);
        }
    }
    Ok(maps.into_iter().map(|m| m.expect("every keypoint is in one batch")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::corrmap::uniform_nre;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(seed: u64, w: usize, h: usize) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::new(h, w, (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn features(params: &NetParams<f64>, img: &Grid) -> Tensor<f64> {
        let mut t = Tape::new();
        let p = ParamVars::bind(&mut t, params);
        let (v, _, _) = extract_features(&mut t, &p, img).unwrap();
        t.value(v).clone()
    }

    #[test]
    fn feature_grid_shape_and_siamese_weights() {
        let params = NetParams::<f64>::init(NetConfig::default(), 3).unwrap();
        let (a, b) = (noise_image(1, 64, 48), noise_image(2, 64, 48));
        let fa = features(&params, &a);
        assert_eq!(fa.shape(), &[16 * 12, 32]);
        assert_eq!(fa, features(&params, &a));
        assert_ne!(fa, features(&params, &b));
        assert!(matches!(
            features_result(&params, &noise_image(1, 30, 48)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    fn features_result(params: &NetParams<f64>, img: &Grid) -> Result<(Var, usize, usize)> {
        let mut t = Tape::new();
        let p = ParamVars::bind(&mut t, params);
        extract_features(&mut t, &p, img)
    }

    #[test]
    fn constant_image_gives_spatially_constant_interior() {
        // zero padding breaks translation invariance on the border ring only
        let params = NetParams::<f64>::init(NetConfig::default(), 5).unwrap();
        let img = Grid::new(48, 64, vec![0.5; 64 * 48]).unwrap();
        let f = features(&params, &img);
        let row = |r: usize, c: usize| &f.data()[(r * 16 + c) * 32..(r * 16 + c + 1) * 32];
        assert!(f.data().iter().all(|&v| v.is_finite()));
        for r in 1..12 {
            for c in 1..16 {
                assert_eq!(row(r, c), row(1, 1));
            }
        }
    }

    #[test]
    fn padding_ring_holds_lambda_exactly() {
        let params = NetParams::<f64>::init(NetConfig::default(), 2).unwrap();
        let lambda = params.get("lambda").unwrap().data().to_vec();
        let mut t = Tape::new();
        let p = ParamVars::bind(&mut t, &params);
        let (g, h, w) = extract_features(&mut t, &p, &noise_image(3, 64, 48)).unwrap();
        let (same, frame0) = pad_features(&mut t, &p, g, h, w, 0.0).unwrap();
        assert_eq!(same, g);
        assert_eq!((frame0.map_w, frame0.map_h), (16, 12));
        assert!(t.value(g).data().chunks_exact(32).all(|c| c != lambda.as_slice()));

        let (padded, frame) = pad_features(&mut t, &p, g, h, w, 0.5).unwrap();
        assert_eq!((frame.map_w, frame.map_h, frame.pad_x, frame.pad_y), (32, 24, 8, 6));
        for (i, cell) in t.value(padded).data().chunks_exact(32).enumerate() {
            let (r, c) = (i / 32, i % 32);
            let inside = (6..18).contains(&r) && (8..24).contains(&c);
            assert_eq!(cell == lambda.as_slice(), !inside);
        }
    }

    #[test]
    fn normalized_coordinates() {
        let odd = MapFrame::from_grid(5, 3, 4, 0, 0);
        assert_eq!(grid_coordinates(&odd)[5 + 2], (0.0, 0.0));
        let f = MapFrame::for_image(64, 48, 4, 0.5).unwrap();
        let c = grid_coordinates(&f);
        let close = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12;
        assert!(close(c[0], (-(2.0 - 1.0 / 16.0), -(2.0 - 1.0 / 12.0))));
        assert!(close(c[c.len() - 1], (2.0 - 1.0 / 16.0, 2.0 - 1.0 / 12.0)));

        let params = NetParams::<f32>::init(NetConfig::default(), 2).unwrap();
        let enc = |params: &NetParams<f32>| {
            let mut t = Tape::new();
            let p = ParamVars::bind(&mut t, params);
            let v = positional_encoding(&mut t, &p, &f).unwrap();
            t.value(v).clone()
        };
        assert_eq!(enc(&params), enc(&params));
    }

    #[test]
    fn gated_attention_examples() {
        let mut t = Tape::<f64>::new();
        let q = t.leaf(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let k = t.leaf(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap());
        let v = t.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap());
        let o = gated_attention(&mut t, q, k, v).unwrap();
        assert_eq!(t.value(o).data(), &[3.0, 5.0, 3.0, 5.0]);

        let k1 = t.leaf(Tensor::matrix(1, 2, vec![7.0, -1.0]).unwrap());
        let v1 = t.leaf(Tensor::matrix(1, 2, vec![0.25, -4.0]).unwrap());
        let q1 = t.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, -3.0, 0.5]).unwrap());
        let o1 = gated_attention(&mut t, q1, k1, v1).unwrap();
        assert_eq!(t.value(o1).data(), &[0.25, -4.0, 0.25, -4.0]);

        let bad = t.leaf(Tensor::matrix(3, 3, vec![0.0; 9]).unwrap());
        assert!(gated_attention(&mut t, q, bad, v).is_err());
    }

    #[test]
    fn gated_attention_rows_ignore_other_queries() {
        let mut t = Tape::<f64>::new();
        let k = t.leaf(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.5]).unwrap());
        let v = t.leaf(Tensor::matrix(3, 1, vec![1.0, 2.0, 4.0]).unwrap());
        let q1 = t.leaf(Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap());
        let q2 = t.leaf(Tensor::matrix(2, 2, vec![0.3, -0.2, 9.0, 9.0]).unwrap());
        let alone = gated_attention(&mut t, q1, k, v).unwrap();
        let both = gated_attention(&mut t, q2, k, v).unwrap();
        assert_eq!(t.value(alone).data()[0], t.value(both).data()[0]);
        // hand evaluation of row one: scores s = q k^T / sqrt 2, gate sigmoid(max s)
        let s = [0.3, -0.2, -0.4].map(|x: f64| x / 2f64.sqrt());
        let g = 1.0 / (1.0 + (-s[0]).exp());
        let w = s.map(|x| (g * x).exp());
        let expect = (w[0] + 2.0 * w[1] + 4.0 * w[2]) / (w[0] + w[1] + w[2]);
        assert!((t.value(alone).data()[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn gate_is_one_half_at_zero_max() {
        // scores all zero -> max 0 -> gate sigmoid(0)
        let mut t = Tape::<f64>::new();
        let q = t.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let k = t.leaf(Tensor::matrix(2, 2, vec![1.0, 1.0, 2.0, 2.0]).unwrap());
        let v = t.leaf(Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap());
        gated_attention(&mut t, q, k, v).unwrap();
        let gate = (0..t.len())
            .map(|i| t.value(Var(i)).data().to_vec())
            .find(|d| d == &[0.5]);
        assert!(gate.is_some());
    }

    #[test]
    fn gated_attention_gradients() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (nq, nk, dh) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..5));
            let mut m = |r: usize, c: usize| Tensor::from_fn(&[r, c], |_| rng.gen_range(-1.5..1.5));
            let inputs = [m(nq, dh), m(nk, dh), m(nk, dh), m(nq, dh)];
            let err = grad_check(
                |t, v| {
                    let o = gated_attention(t, v[0], v[1], v[2])?;
                    let p = t.mul(o, v[3])?;
                    Ok(t.sum(p))
                },
                &inputs,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err:e}");
        }
    }

    #[test]
    fn maps_are_normalized_with_padded_dims() {
        let params = NetParams::<f32>::init(NetConfig::default(), 8).unwrap();
        let kps = [(2.5, 2.5), (30.5, 20.5), (63.0, 47.0)];
        let maps = infer(&params, &noise_image(1, 64, 48), &noise_image(2, 64, 48), &kps, 0.5).unwrap();
        assert_eq!(maps.len(), 3);
        for m in &maps {
            assert_eq!((m.frame().map_w, m.frame().map_h), (32, 24));
            let total: f64 = m.values().iter().map(|&v| f64::from(v)).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
        assert!(matches!(
            infer(&params, &noise_image(1, 64, 48), &noise_image(2, 64, 48), &[], 0.5),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn large_keypoint_sets_are_inferred_in_interleaved_batches() {
        let params = NetParams::<f32>::init(NetConfig::default(), 4).unwrap();
        let (src, tgt) = (noise_image(3, 64, 48), noise_image(4, 64, 48));
        let kps: Vec<(f64, f64)> = (0..INFER_BATCH + 6).map(|i| ((i % 60) as f64 + 0.5, (i % 45) as f64 + 1.5)).collect();
        let all = infer(&params, &src, &tgt, &kps, 0.5).unwrap();
        assert_eq!(all.len(), kps.len());
        // two batches: even and odd indices
        let odd: Vec<(f64, f64)> = kps.iter().copied().skip(1).step_by(2).collect();
        let alone = infer(&params, &src, &tgt, &odd, 0.5).unwrap();
        for (k, m) in alone.iter().enumerate() {
            assert_eq!(m.values(), all[2 * k + 1].values());
        }
    }

    #[test]
    fn untrained_maps_are_near_uniform() {
        let frame = MapFrame::for_image(64, 48, 4, 0.5).unwrap();
        let ln_omega: f64 = uniform_nre(&frame);
        let mut total = 0.0;
        let mut count = 0;
        for seed in 0..10 {
            let params = NetParams::<f32>::init(NetConfig::default(), seed).unwrap();
            let kps: Vec<(f64, f64)> = (0..8).map(|i| (4.0 + 7.0 * i as f64, 3.0 + 5.0 * i as f64)).collect();
            let maps = infer(&params, &noise_image(seed, 64, 48), &noise_image(seed + 100, 64, 48), &kps, 0.5).unwrap();
            for m in maps {
                total += f64::from(m.entropy());
                count += 1;
            }
        }
        let mean = total / count as f64;
        assert!((mean - ln_omega).abs() <= 0.1 * ln_omega, "{mean} vs {ln_omega}");
    }

    #[test]
    fn end_to_end_gradient_on_toy_pair() {
        // 16x12 images, NRE at fixed ground-truth map points, all parameters
        let config = NetConfig::default();
        let mut params = NetParams::<f64>::init(config, 11).unwrap();
        // zero biases put ReLU inputs exactly on the kink at the grid center
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        let (src, tgt) = (noise_image(5, 16, 12), noise_image(6, 16, 12));
        let kps = [(3.5, 2.5), (10.5, 7.5)];
        let gt = [(2.3, 3.7), (6.6, 1.2)];
        let err = grad_check(
            |t, v| {
                let p = ParamVars {
                    config,
                    names: params.names().to_vec(),
                    vars: v.to_vec(),
                };
                let out = p.forward(t, &src, &tgt, &kps, 0.5)?;
                let (h, w) = (out.frame.map_h, out.frame.map_w);
                let lp = t.clamp_min(out.log_probs, (1e-12f64).ln());
                let s = t.sample_rows(lp, h, w, &gt)?;
                let m = t.mean(s);
                Ok(t.scale(m, -1.0))
            },
            params.tensors(),
        )
        .unwrap();
        assert!(err < 1e-4, "{err:e}");
    }
}
