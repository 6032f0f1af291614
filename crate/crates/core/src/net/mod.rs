//! The correspondence-hallucination network at toy scale: a siamese strided
//! CNN, learnable padding of the target grid, MLP positional encoding, gated
//! multi-head attention and a dot-product correspondence head.

mod checkpoint;
mod model;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use model::{
    extract_features, gated_attention, grid_coordinates, infer, keypoint_grid_points, pad_features,
    positional_encoding, Forward, ParamVars,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Total backbone stride: two stride-2 convolutions.
pub const STRIDE: usize = 4;

/// Initial multiplier of the correspondence logits.
pub const HEAD_SCALE_INIT: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Descriptor width `d`.
    pub channels: usize,
    /// Width of the first convolution.
    pub stem_channels: usize,
    pub heads: usize,
    /// Number of target cross-attention layers `k`.
    pub cross_layers: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            stem_channels: 16,
            heads: 2,
            cross_layers: 2,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.stem_channels == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig("network widths must be positive".into()));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "{} channels do not split into {} heads",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    /// Names of the attention layers in evaluation order.
    pub fn attention_layers(&self) -> Vec<String> {
        let mut v = vec!["src_cross".to_string(), "tgt_self".to_string()];
        v.extend((0..self.cross_layers).map(|i| format!("cross{i}")));
        v
    }

    /// `(name, shape, fan_in)` of every parameter, in canonical order. A zero
    /// fan-in marks a bias (zero initialized).
    pub fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let (d, c1) = (self.channels, self.stem_channels);
        let mut v: Vec<(String, Vec<usize>, usize)> = vec![
            ("conv1.w".into(), vec![9, c1], 9),
            ("conv1.b".into(), vec![c1], 0),
            ("conv2.w".into(), vec![9 * c1, d], 9 * c1),
            ("conv2.b".into(), vec![d], 0),
            ("compress.w".into(), vec![d, d], d),
            ("compress.b".into(), vec![d], 0),
            ("lambda".into(), vec![d], d),
            ("pe1.w".into(), vec![2, 8], 2),
            ("pe1.b".into(), vec![8], 0),
            ("pe2.w".into(), vec![8, 16], 8),
            ("pe2.b".into(), vec![16], 0),
            ("pe3.w".into(), vec![16, d], 16),
            ("pe3.b".into(), vec![d], 0),
        ];
        for layer in self.attention_layers() {
            for proj in ["q", "k", "v", "o"] {
                v.push((format!("{layer}.{proj}.w"), vec![d, d], d));
                v.push((format!("{layer}.{proj}.b"), vec![d], 0));
            }
            v.push((format!("{layer}.ffn1.w"), vec![d, 2 * d], d));
            v.push((format!("{layer}.ffn1.b"), vec![2 * d], 0));
            v.push((format!("{layer}.ffn2.w"), vec![2 * d, d], 2 * d));
            v.push((format!("{layer}.ffn2.b"), vec![d], 0));
        }
        v.push(("head.scale".into(), vec![1], 1));
        v
    }
}

/// Named parameter tensors in the canonical order of [`NetConfig::layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T> {
    pub config: NetConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> NetParams<T> {
    /// Seeded initialization: uniform `+-sqrt(6 / fan_in)` for weights feeding
    /// a ReLU, half that for residual output projections, zero biases, and a
    /// small random padding vector.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, fan_in) in config.layout() {
            let t = if fan_in == 0 {
                Tensor::zeros(&shape)
            } else {
                let mut bound = (6.0 / fan_in as f64).sqrt();
                if name.ends_with(".o.w") || name.ends_with(".ffn2.w") {
                    bound *= 0.5;
                } else if name.ends_with(".q.w") || name.ends_with(".k.w") || name.ends_with(".v.w") {
                    bound = (3.0 / fan_in as f64).sqrt();
                } else if name == "lambda" {
                    bound = 0.1;
                }
                if name == "head.scale" {
                    // small initial temperature keeps untrained maps near uniform
                    Tensor::full(&shape, T::lit(HEAD_SCALE_INIT))
                } else {
                    Tensor::from_fn(&shape, |_| T::lit(rng.gen_range(-bound..bound)))
                }
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { config, names, tensors })
    }

    /// Builds parameters from named tensors; names and shapes must match the
    /// layout exactly.
    pub fn from_named(config: NetConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; layout.len()];
        for (name, t) in named {
            let i = layout
                .iter()
                .position(|(n, _, _)| *n == name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name:?}")))?;
            if t.shape() != layout[i].1.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    layout[i].1
                )));
            }
            if slots[i].replace(t).is_some() {
                return Err(Error::Format(format!("duplicate parameter {name:?}")));
            }
        }
        let mut names = Vec::with_capacity(layout.len());
        let mut tensors = Vec::with_capacity(layout.len());
        for ((name, _, _), slot) in layout.into_iter().zip(slots) {
            let t = slot.ok_or_else(|| Error::Format(format!("missing parameter {name:?}")))?;
            if !t.is_finite() {
                return Err(Error::NonFiniteInput(format!("parameter {name}")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { config, names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> NetParams<U> {
        NetParams {
            config: self.config,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_consistent() {
        let p = NetParams::<f32>::init(NetConfig::default(), 1).unwrap();
        assert_eq!(p.names().len(), p.tensors().len());
        assert_eq!(p.get("lambda").unwrap().len(), 32);
        assert!(p.is_finite());
        let named = p.names().iter().cloned().zip(p.tensors().iter().cloned()).collect();
        assert_eq!(NetParams::from_named(p.config, named).unwrap(), p);
    }

    #[test]
    fn unknown_or_missing_names_are_rejected() {
        let p = NetParams::<f32>::init(NetConfig::default(), 1).unwrap();
        let mut named: Vec<_> = p.names().iter().cloned().zip(p.tensors().iter().cloned()).collect();
        named.push(("bogus".into(), Tensor::zeros(&[1])));
        assert!(matches!(NetParams::from_named(p.config, named.clone()), Err(Error::Format(_))));
        named.pop();
        named.pop();
        assert!(matches!(NetParams::from_named(p.config, named), Err(Error::Format(_))));
    }

    #[test]
    fn heads_must_divide_channels() {
        let c = NetConfig {
            heads: 3,
            ..NetConfig::default()
        };
        assert!(NetParams::<f32>::init(c, 0).is_err());
    }
}
