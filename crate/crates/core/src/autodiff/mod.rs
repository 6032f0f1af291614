//! Reverse-mode differentiation over dense row-major tensors.
//!
//! A [`Tape`] records each forward operation together with its inputs; a
//! single reverse sweep from a scalar output accumulates gradients into every
//! node it depends on. The network runs in `f32`, gradient checks in `f64`.

mod ops;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Compares the tape gradient of a scalar function against central
/// differences with step `h = 1e-4 (1 + |x_i|)` and returns the normwise
/// relative error `max_i |g_i - fd_i| / max(max_i |fd_i|, 1e-12)` over all
/// inputs jointly.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut xs = inputs.to_vec();
    let mut max_diff = 0.0f64;
    let mut max_ref = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.tensor(&tape, *v);
        for i in 0..xs[k].len() {
            let x0 = xs[k].data()[i];
            let h = 1e-4 * (1.0 + x0.abs());
            xs[k].data_mut()[i] = x0 + h;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] = x0 - h;
            let down = eval(&xs)?;
            xs[k].data_mut()[i] = x0;
            let fd = (up - down) / (2.0 * h);
            max_diff = max_diff.max((analytic.data()[i] - fd).abs());
            max_ref = max_ref.max(fd.abs());
        }
    }
    Ok(max_diff / max_ref.max(1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SEEDS: u64 = 20;
    const TOL: f64 = 1e-4;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Values bounded away from zero so relu/clamp kinks are not straddled.
    fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
    }

    /// Distinct values with gaps far wider than the finite-difference step.
    fn well_separated(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        for i in (1..n).rev() {
            v.swap(i, rng.gen_range(0..=i));
        }
        v
    }

    /// Reduces any tensor to a scalar through fixed random weights, so every
    /// output entry carries a distinct upstream gradient.
    fn weigh(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
        let shape = t.value(y).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let w = t.leaf(Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)));
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    }

    fn check_seeds(
        name: &str,
        make: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>),
    ) {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (inputs, f) = make(&mut rng);
            let err = grad_check(|t, v| f(t, v), &inputs).unwrap();
            assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
        }
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[4, 3]);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
        )
        .unwrap();
        assert!(err < 1e-8, "{err:e}");
    }

    #[test]
    fn matmul_variants() {
        check_seeds("matmul", |rng| {
            let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
            let variant = rng.gen_range(0..3);
            let (sa, sb) = match variant {
                0 => ([m, k], [k, n]),
                1 => ([m, k], [n, k]),
                _ => ([k, m], [k, n]),
            };
            let inputs = vec![rand_tensor(rng, &sa), rand_tensor(rng, &sb)];
            let seed = rng.gen();
            (
                inputs,
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                    let y = match variant {
                        0 => t.matmul(v[0], v[1])?,
                        1 => t.matmul_nt(v[0], v[1])?,
                        _ => t.matmul_tn(v[0], v[1])?,
                    };
                    weigh(t, y, seed)
                }),
            )
        });
    }

    #[test]
    fn elementwise_ops() {
        check_seeds("add/sub/mul/scale", |rng| {
            let shape = [rng.gen_range(1..5), rng.gen_range(1..5)];
            let inputs = vec![
                rand_tensor(rng, &shape),
                rand_tensor(rng, &shape),
                rand_tensor(rng, &[1]),
            ];
            let (seed, c) = (rng.gen(), rng.gen_range(-2.0..2.0));
            (
                inputs,
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                    let a = t.add(v[0], v[1])?;
                    let b = t.sub(a, v[1])?;
                    let m = t.mul(b, v[1])?;
                    let s = t.scale(m, c);
                    let y = t.scale_by(s, v[2])?;
                    let z = t.add(y, a)?;
                    weigh(t, z, seed)
                }),
            )
        });
    }

    #[test]
    fn add_row_and_transpose_and_reshape() {
        check_seeds("add_row", |rng| {
            let (n, d) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let inputs = vec![rand_tensor(rng, &[n, d]), rand_tensor(rng, &[d])];
            let seed = rng.gen();
            (
                inputs,
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                    let y = t.add_row(v[0], v[1])?;
                    let yt = t.transpose(y)?;
                    let r = t.reshape(yt, &[n * d])?;
                    weigh(t, r, seed)
                }),
            )
        });
    }

    #[test]
    fn relu_sigmoid_clamp() {
        check_seeds("relu/sigmoid/clamp", |rng| {
            let shape = [rng.gen_range(1..5), rng.gen_range(1..5)];
            let inputs = vec![off_kink(rng, &shape)];
            let seed = rng.gen();
            (
                inputs,
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                    let r = t.relu(v[0]);
                    let s = t.sigmoid(v[0]);
                    let c = t.clamp_min(v[0], 0.0);
                    let a = t.add(r, s)?;
                    let b = t.mul(a, c)?;
                    weigh(t, b, seed)
                }),
            )
        });
    }

    #[test]
    fn softmax_variants() {
        check_seeds("softmax", |rng| {
            let shape = [rng.gen_range(1..5), rng.gen_range(1..6)];
            let inputs = vec![rand_tensor(rng, &shape)];
            let seed = rng.gen();
            (
                inputs,
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                    let a = t.softmax_rows(v[0])?;
                    let b = t.log_softmax_rows(v[0])?;
                    let c = t.softmax_all(v[0])?;
                    let ab = t.add(a, b)?;
                    let abc = t.add(ab, c)?;
                    weigh(t, abc, seed)
                }),
            )
        });
    }

    #[test]
    fn max_reduce_and_pool() {
        check_seeds("max", |rng| {
            let (h, w, c) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..3));
            let x = Tensor::new(vec![h * w, c], well_separated(rng, h * w * c)).unwrap();
            let seed = rng.gen();
            (
                vec![x],
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                    let (p, _, _) = t.max_pool2(v[0], h, w)?;
                    let m = t.max_reduce(v[0])?;
                    let s = weigh(t, p, seed)?;
                    let y = t.scale(m, 3.0);
                    t.add(s, y)
                }),
            )
        });
    }

    #[test]
    fn row_max_gate() {
        check_seeds("max_rows/scale_rows", |rng| {
            let (n, m) = (rng.gen_range(1..5), rng.gen_range(1..6));
            let x = Tensor::new(vec![n, m], well_separated(rng, n * m)).unwrap();
            let seed = rng.gen();
            (
                vec![x],
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                    let mx = t.max_rows(v[0])?;
                    let g = t.sigmoid(mx);
                    let y = t.scale_rows(v[0], g)?;
                    weigh(t, y, seed)
                }),
            )
        });
    }

    #[test]
    fn conv2d_and_im2col() {
        check_seeds("conv2d", |rng| {
            let (h, w) = (rng.gen_range(3..7), rng.gen_range(3..7));
            let (ci, co) = (rng.gen_range(1..3), rng.gen_range(1..4));
            let k = if rng.gen_bool(0.5) { 3 } else { 1 };
            let stride = rng.gen_range(1..3);
            let pad = if k == 3 { 1 } else { 0 };
            let inputs = vec![
                rand_tensor(rng, &[h * w, ci]),
                rand_tensor(rng, &[k * k * ci, co]),
                rand_tensor(rng, &[co]),
            ];
            let seed = rng.gen();
            (
                inputs,
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                    let (y, _, _) = t.conv2d(v[0], h, w, v[1], v[2], k, stride, pad)?;
                    weigh(t, y, seed)
                }),
            )
        });
    }

    #[test]
    fn sampling_ops() {
        check_seeds("bilinear/sample_rows", |rng| {
            let (h, w, c) = (rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(1..4));
            // interior points off the cell-center lattice lines
            let pts: Vec<(f64, f64)> = (0..3)
                .map(|_| {
                    let x = rng.gen_range(0.5..w as f64 - 0.5);
                    let y = rng.gen_range(0.5..h as f64 - 0.5);
                    (x, y)
                })
                .collect();
            let inputs = vec![rand_tensor(rng, &[h * w, c]), rand_tensor(rng, &[3, h * w])];
            let seed = rng.gen();
            (
                inputs,
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                    let s = t.bilinear_sample(v[0], h, w, &pts)?;
                    let r = t.sample_rows(v[1], h, w, &pts)?;
                    let a = weigh(t, s, seed)?;
                    let b = weigh(t, r, seed + 1)?;
                    t.add(a, b)
                }),
            )
        });
    }

    #[test]
    fn indexing_ops() {
        check_seeds("gather/slice/concat/pad", |rng| {
            let (h, w, c) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(2..4));
            let idx: Vec<usize> = (0..4).map(|_| rng.gen_range(0..h * w)).collect();
            let (px, py) = (rng.gen_range(0..3), rng.gen_range(0..3));
            let inputs = vec![rand_tensor(rng, &[h * w, c]), rand_tensor(rng, &[c])];
            let seed = rng.gen();
            (
                inputs,
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                    let g = t.gather_rows(v[0], &idx)?;
                    let s = t.slice_cols(g, 1, c - 1)?;
                    let f = t.slice_cols(g, 0, 1)?;
                    let cat = t.concat_cols(&[s, f, s])?;
                    let p = t.pad2d(v[0], v[1], h, w, px, py)?;
                    let a = weigh(t, cat, seed)?;
                    let b = weigh(t, p, seed + 1)?;
                    t.add(a, b)
                }),
            )
        });
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut t = Tape::new();
            let a = t.leaf(rand_tensor(&mut rng, &[5, 4]));
            let b = t.leaf(rand_tensor(&mut rng, &[4, 6]));
            let y = t.matmul(a, b).unwrap();
            let s = t.softmax_all(y).unwrap();
            let m = t.max_reduce(s).unwrap();
            let g = t.backward(m).unwrap();
            (g.tensor(&t, a), g.tensor(&t, b))
        };
        assert_eq!(run(), run());
    }
}
