//! Low-rank adapters for the encoder linear layers.
//!
//! An adapter on a layer with weight `W` (`rows × cols`) holds
//! `A: r × cols` and `B: rows × r` and contributes `ΔW = (s/r)·B·A`.
//! `A` is Xavier-initialized from the episode seed and `B` starts at
//! zero, so a freshly attached or reset adapter is an exact identity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{xavier_uniform, DualEncoder, LayerVars, LowRank};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::seed;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tower {
    Vision,
    Text,
}

impl Tower {
    pub const BOTH: [Tower; 2] = [Tower::Vision, Tower::Text];

    fn tag(self) -> u64 {
        match self {
            Tower::Vision => 1,
            Tower::Text => 2,
        }
    }
}

/// Which towers receive adapters. Every linear layer of a targeted tower
/// is adapted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoraTarget {
    #[default]
    Both,
    Vision,
    Text,
}

impl LoraTarget {
    pub fn includes(self, tower: Tower) -> bool {
        matches!(
            (self, tower),
            (LoraTarget::Both, _)
                | (LoraTarget::Vision, Tower::Vision)
                | (LoraTarget::Text, Tower::Text)
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            LoraTarget::Both => "both",
            LoraTarget::Vision => "vision",
            LoraTarget::Text => "text",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "both" => Some(LoraTarget::Both),
            "vision" => Some(LoraTarget::Vision),
            "text" => Some(LoraTarget::Text),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub scaling: f32,
    pub target: LoraTarget,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            scaling: 15.0,
            target: LoraTarget::Both,
        }
    }
}

impl LoraConfig {
    /// The `s/r` multiplier on `B·A`.
    pub fn scale(&self) -> f64 {
        self.scaling as f64 / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("LoRA rank must be at least 1"));
        }
        if !self.scaling.is_finite() {
            return Err(Error::config("LoRA scaling must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerId {
    pub tower: Tower,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T: Scalar = f32> {
    /// `r × cols`.
    pub a: Tensor<T>,
    /// `rows × r`.
    pub b: Tensor<T>,
    pub layer: LayerId,
}

impl<T: Scalar> LoraAdapter<T> {
    fn fresh(layer: LayerId, rows: usize, cols: usize, rank: usize, seed: u64) -> Self {
        let stream = seed::derive(seed, layer.tower.tag() << 32 | layer.index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        Self {
            a: xavier_uniform(&mut rng, rank, cols),
            b: Tensor::zeros(&[rows, rank]),
            layer,
        }
    }
}

/// All adapters of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<T: Scalar = f32> {
    config: LoraConfig,
    seed: u64,
    shapes: Vec<(usize, usize)>,
    adapters: Vec<LoraAdapter<T>>,
}

/// Attaches one adapter per targeted layer. Base weights are untouched.
pub fn attach<T: Scalar>(
    encoder: &DualEncoder<T>,
    cfg: &LoraConfig,
    seed: u64,
) -> Result<AdapterSet<T>> {
    cfg.validate()?;
    let mut adapters = Vec::new();
    let mut shapes = Vec::new();
    for tower in Tower::BOTH {
        if !cfg.target.includes(tower) {
            continue;
        }
        for (index, layer) in encoder.tower(tower).layers().iter().enumerate() {
            let (rows, cols) = (layer.rows(), layer.cols());
            if cfg.rank > rows.min(cols) {
                return Err(Error::config(format!(
                    "rank {} exceeds {rows}x{cols} layer {index} of the {tower:?} tower",
                    cfg.rank
                )));
            }
            let id = LayerId { tower, index };
            adapters.push(LoraAdapter::fresh(id, rows, cols, cfg.rank, seed));
            shapes.push((rows, cols));
        }
    }
    Ok(AdapterSet {
        config: *cfg,
        seed,
        shapes,
        adapters,
    })
}

impl<T: Scalar> AdapterSet<T> {
    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn adapters(&self) -> &[LoraAdapter<T>] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter<T>] {
        &mut self.adapters
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.adapters.iter().map(|a| a.a.len() + a.b.len()).sum()
    }

    pub fn get(&self, layer: LayerId) -> Option<&LoraAdapter<T>> {
        self.adapters.iter().find(|a| a.layer == layer)
    }

    /// Per-layer low-rank views for one tower's forward pass.
    pub fn low_rank_for(&self, tower: Tower, n_layers: usize) -> Vec<Option<LowRank<'_, T>>> {
        let scale = T::from_f64(self.config.scale());
        (0..n_layers)
            .map(|index| {
                self.get(LayerId { tower, index }).map(|ad| LowRank {
                    b: &ad.b,
                    a: &ad.a,
                    scale,
                })
            })
            .collect()
    }

    /// Zeroes every `B` and redraws every `A` from the episode seed, which
    /// is exactly the state [`attach`] produced.
    pub fn reset(&mut self) {
        for (ad, &(rows, cols)) in self.adapters.iter_mut().zip(&self.shapes) {
            *ad = LoraAdapter::fresh(ad.layer, rows, cols, self.config.rank, self.seed);
        }
    }

    /// True when every `B` is exactly zero.
    pub fn is_identity(&self) -> bool {
        self.adapters
            .iter()
            .all(|a| a.b.data().iter().all(|v| *v == T::zero()))
    }

    /// Adds each adapter of `tower` as trainable leaves and hooks them into
    /// `layers`. Returns `(adapter index, B var, A var)` triples.
    pub fn bind(
        &self,
        g: &mut Graph<T>,
        tower: Tower,
        layers: &mut [LayerVars],
    ) -> Vec<(usize, Var, Var)> {
        let scale = self.config.scale();
        let mut bound = Vec::new();
        for (i, ad) in self.adapters.iter().enumerate() {
            if ad.layer.tower != tower {
                continue;
            }
            let b = g.param(ad.b.clone());
            let a = g.param(ad.a.clone());
            layers[ad.layer.index].low_rank = Some((b, a, scale));
            bound.push((i, b, a));
        }
        bound
    }
}

/// `W + (s/r)·B·A`. `W` is not modified.
pub fn effective_weight<T: Scalar>(
    w: &Tensor<T>,
    adapter: &LoraAdapter<T>,
    cfg: &LoraConfig,
) -> Result<Tensor<T>> {
    if adapter.b.rows() != w.rows()
        || adapter.a.cols() != w.cols()
        || adapter.b.cols() != adapter.a.rows()
    {
        return Err(Error::shape(format!(
            "adapter B {:?} · A {:?} against weight {:?}",
            adapter.b.shape(),
            adapter.a.shape(),
            w.shape()
        )));
    }
    let delta = adapter
        .b
        .matmul(&adapter.a)?
        .scale(T::from_f64(cfg.scale()));
    w.add(&delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderDims;
    use crate::tensor::Activation;
    use rand::{Rng, SeedableRng};

    fn encoder() -> DualEncoder<f32> {
        DualEncoder::init(
            4,
            &EncoderDims {
                d_in: 16,
                d_hidden: 12,
                d_e: 8,
                layers: 2,
            },
            Activation::Tanh,
        )
        .unwrap()
    }

    #[test]
    fn shapes_follow_layers() {
        let enc = DualEncoder::<f32>::init(0, &EncoderDims::default(), Activation::Tanh).unwrap();
        let set = attach(&enc, &LoraConfig::default(), 1).unwrap();
        assert_eq!(set.len(), 4);
        let last = set
            .get(LayerId {
                tower: Tower::Vision,
                index: 1,
            })
            .unwrap();
        assert_eq!(last.a.shape(), &[4, 64]);
        assert_eq!(last.b.shape(), &[256, 4]);
    }

    #[test]
    fn attach_is_deterministic() {
        let enc = encoder();
        let cfg = LoraConfig::default();
        assert_eq!(
            attach(&enc, &cfg, 9).unwrap(),
            attach(&enc, &cfg, 9).unwrap()
        );
        assert_ne!(
            attach(&enc, &cfg, 9).unwrap(),
            attach(&enc, &cfg, 10).unwrap()
        );
    }

    #[test]
    fn rank_too_large_is_rejected() {
        let cfg = LoraConfig {
            rank: 9,
            ..LoraConfig::default()
        };
        assert!(matches!(attach(&encoder(), &cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn target_restricts_towers() {
        let cfg = LoraConfig {
            target: LoraTarget::Text,
            ..LoraConfig::default()
        };
        let set = attach(&encoder(), &cfg, 0).unwrap();
        assert!(set.adapters().iter().all(|a| a.layer.tower == Tower::Text));
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn effective_weight_identities() {
        let enc = encoder();
        let cfg = LoraConfig::default();
        let mut set = attach(&enc, &cfg, 3).unwrap();
        let w = &enc.vision.layers()[0].weight;
        assert_eq!(&effective_weight(w, &set.adapters()[0], &cfg).unwrap(), w);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in set.adapters_mut()[0].b.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let zero_scale = LoraConfig {
            scaling: 0.0,
            ..cfg
        };
        assert_eq!(
            &effective_weight(w, &set.adapters()[0], &zero_scale).unwrap(),
            w
        );
    }

    #[test]
    fn rank_one_is_an_outer_product() {
        let w = Tensor::<f64>::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = [0.5, -1.0, 2.0];
        let a = [3.0, -0.25];
        let adapter = LoraAdapter {
            a: Tensor::matrix(1, 2, a.to_vec()).unwrap(),
            b: Tensor::matrix(3, 1, b.to_vec()).unwrap(),
            layer: LayerId {
                tower: Tower::Text,
                index: 0,
            },
        };
        let cfg = LoraConfig {
            rank: 1,
            scaling: 1.0,
            target: LoraTarget::Both,
        };
        let out = effective_weight(&w, &adapter, &cfg).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(out.data()[i * 2 + j], w.data()[i * 2 + j] + b[i] * a[j]);
            }
        }
    }

    #[test]
    fn effective_weight_is_linear_in_b() {
        let enc = encoder();
        let cfg = LoraConfig::default();
        let mut set = attach(&enc, &cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in set.adapters_mut()[1].b.data_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
        let w = &enc.vision.layers()[1].weight;
        let one = effective_weight(w, &set.adapters()[1], &cfg).unwrap();
        let mut doubled = set.adapters()[1].clone();
        doubled.b = doubled.b.scale(2.0);
        let two = effective_weight(w, &doubled, &cfg).unwrap();
        for ((o, t), base) in one.data().iter().zip(two.data()).zip(w.data()) {
            assert!(((t - base) - 2.0 * (o - base)).abs() < 1e-6);
        }
    }

    #[test]
    fn reset_restores_attach_state_and_is_idempotent() {
        let enc = encoder();
        let cfg = LoraConfig::default();
        let fresh = attach(&enc, &cfg, 12).unwrap();
        let mut set = fresh.clone();
        for ad in set.adapters_mut() {
            ad.b = ad.b.add_scalar(0.25);
            ad.a = ad.a.scale(1.5);
        }
        assert!(!set.is_identity());
        set.reset();
        assert_eq!(set, fresh);
        set.reset();
        assert_eq!(set, fresh);
    }

    #[test]
    fn zero_b_adapters_do_not_change_embeddings() {
        let enc = encoder();
        let set = attach(&enc, &LoraConfig::default(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::matrix(
            5,
            16,
            (0..80).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        for tower in Tower::BOTH {
            let plain = enc.encode_batch(tower, &x, None).unwrap();
            let adapted = enc.encode_batch(tower, &x, Some(&set)).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&plain), bits(&adapted));
        }
    }
}
