//! Shared machinery for optimizing a dual encoder on paired batches:
//! what is trainable (adapters or every weight), one loss/gradient
//! evaluation, and the AdamW state that steps it.

use crate::encoder::{forward_graph, DualEncoder, LayerVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::lora::{AdapterSet, Tower};
use crate::loss::{self, LossConfig};
use crate::optim::{adamw_step, AdamState, OptimizerConfig};
use crate::tensor::{Scalar, Tensor};

/// The parameters an optimizer may change. Base weights outside this
/// value are never touched.
#[derive(Debug, Clone, PartialEq)]
pub enum Trainable<T: Scalar = f32> {
    /// Low-rank adapters over frozen base weights.
    Adapters(AdapterSet<T>),
    /// A private copy of every encoder weight and bias.
    Full(DualEncoder<T>),
}

impl<T: Scalar> Trainable<T> {
    /// Parameters in optimizer order: per adapter `B` then `A`; or per
    /// tower, per layer, weight then bias.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Trainable::Adapters(set) => set.adapters().iter().flat_map(|a| [&a.b, &a.a]).collect(),
            Trainable::Full(enc) => Tower::BOTH
                .iter()
                .flat_map(|&t| {
                    enc.tower(t)
                        .layers()
                        .iter()
                        .flat_map(|l| [&l.weight, &l.bias])
                })
                .collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Trainable::Adapters(set) => set
                .adapters_mut()
                .iter_mut()
                .flat_map(|a| [&mut a.b, &mut a.a])
                .collect(),
            Trainable::Full(enc) => {
                let DualEncoder { vision, text } = enc;
                vision
                    .layers_mut()
                    .iter_mut()
                    .chain(text.layers_mut().iter_mut())
                    .flat_map(|l| [&mut l.weight, &mut l.bias])
                    .collect()
            }
        }
    }

    /// Encoder weights the forward pass should use.
    fn weights<'a>(&'a self, base: &'a DualEncoder<T>) -> &'a DualEncoder<T> {
        match self {
            Trainable::Adapters(_) => base,
            Trainable::Full(enc) => enc,
        }
    }

    fn adapters(&self) -> Option<&AdapterSet<T>> {
        match self {
            Trainable::Adapters(set) => Some(set),
            Trainable::Full(_) => None,
        }
    }

    /// Batch inference with the current parameters.
    pub fn encode(&self, base: &DualEncoder<T>, tower: Tower, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.weights(base).encode_batch(tower, x, self.adapters())
    }
}

/// Image side of a training batch.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSide<T: Scalar = f32> {
    /// Raw features pushed through the vision tower.
    Features(Tensor<T>),
    /// Unit-norm embeddings used as constants (imported pools).
    Fixed(Tensor<T>),
}

/// `N` paired rows: image side and featurized captions.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch<T: Scalar = f32> {
    pub image: ImageSide<T>,
    pub text: Tensor<T>,
}

fn bind_tower<T: Scalar>(
    g: &mut Graph<T>,
    base: &DualEncoder<T>,
    trainable: &Trainable<T>,
    tower: Tower,
    slots: &mut Vec<(usize, Var)>,
) -> Vec<LayerVars> {
    match trainable {
        Trainable::Adapters(set) => {
            let mut layers = base.tower(tower).bind(g, false);
            for (i, b, a) in set.bind(g, tower, &mut layers) {
                slots.push((2 * i, b));
                slots.push((2 * i + 1, a));
            }
            layers
        }
        Trainable::Full(enc) => {
            let layers = enc.tower(tower).bind(g, true);
            let offset = match tower {
                Tower::Vision => 0,
                Tower::Text => 2 * enc.vision.layers().len(),
            };
            for (j, lv) in layers.iter().enumerate() {
                slots.push((offset + 2 * j, lv.weight));
                slots.push((offset + 2 * j + 1, lv.bias));
            }
            layers
        }
    }
}

fn build_loss<T: Scalar>(
    g: &mut Graph<T>,
    base: &DualEncoder<T>,
    trainable: &Trainable<T>,
    batch: &PairBatch<T>,
    cfg: &LossConfig,
    slots: &mut Vec<(usize, Var)>,
) -> Result<Var> {
    let weights = trainable.weights(base);
    let img = match &batch.image {
        ImageSide::Features(x) => {
            let xv = g.constant(x.clone());
            let layers = bind_tower(g, base, trainable, Tower::Vision, slots);
            forward_graph(g, xv, &layers, weights.vision.activation())?
        }
        ImageSide::Fixed(e) => g.constant(e.clone()),
    };
    let tv = g.constant(batch.text.clone());
    let layers = bind_tower(g, base, trainable, Tower::Text, slots);
    let txt = forward_graph(g, tv, &layers, weights.text.activation())?;
    loss::combined(g, img, txt, cfg)
}

/// Loss and its gradient for every parameter of `trainable`, in
/// [`Trainable::params`] order. Parameters outside the graph (e.g. vision
/// adapters under a fixed image side) get zero gradients.
pub fn loss_and_grads<T: Scalar>(
    base: &DualEncoder<T>,
    trainable: &Trainable<T>,
    batch: &PairBatch<T>,
    cfg: &LossConfig,
) -> Result<(T, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let mut slots = Vec::new();
    let root = build_loss(&mut g, base, trainable, batch, cfg, &mut slots)?;
    let value = g.value(root).item()?;
    let mut grads: Vec<Tensor<T>> = trainable
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.shape()))
        .collect();
    if value.is_finite() {
        let mut all = g.backward(root)?;
        for (slot, var) in slots {
            if let Some(gr) = all.take(var) {
                grads[slot] = gr;
            }
        }
    }
    Ok((value, grads))
}

/// Loss without gradients.
pub fn loss_value<T: Scalar>(
    base: &DualEncoder<T>,
    trainable: &Trainable<T>,
    batch: &PairBatch<T>,
    cfg: &LossConfig,
) -> Result<T> {
    let mut g = Graph::new();
    let mut slots = Vec::new();
    let root = build_loss(&mut g, base, trainable, batch, cfg, &mut slots)?;
    g.value(root).item()
}

/// AdamW over all parameters of a [`Trainable`].
#[derive(Debug, Clone)]
pub struct Optimizer<T: Scalar = f32> {
    cfg: OptimizerConfig,
    states: Vec<AdamState<T>>,
    step: u32,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig, trainable: &Trainable<T>) -> Self {
        Self {
            cfg,
            states: AdamState::for_params(&trainable.params()),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    pub fn step(&mut self, trainable: &mut Trainable<T>, grads: &[Tensor<T>]) -> Result<()> {
        let mut params = trainable.params_mut();
        if params.len() != grads.len() || params.len() != self.states.len() {
            return Err(Error::shape(format!(
                "{} parameters, {} gradients, {} optimizer states",
                params.len(),
                grads.len(),
                self.states.len()
            )));
        }
        self.step += 1;
        for ((p, g), st) in params.iter_mut().zip(grads).zip(self.states.iter_mut()) {
            adamw_step(p, g, st, &self.cfg, self.step)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderDims;
    use crate::features::featurize_text;
    use crate::gradcheck::grad_check_flat;
    use crate::lora::{attach, LoraConfig};
    use crate::tensor::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (DualEncoder<f64>, PairBatch<f64>) {
        let dims = EncoderDims {
            d_in: 10,
            d_hidden: 8,
            d_e: 6,
            layers: 2,
        };
        let enc = DualEncoder::<f64>::init(seed, &dims, Activation::Tanh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::matrix(
            4,
            10,
            (0..40).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let caps = ["red cube", "blue cube", "red ball", "green cone"];
        let txt = Tensor::from_rows(&caps.map(|c| featurize_text(c, 10).values))
            .unwrap()
            .cast();
        (
            enc,
            PairBatch {
                image: ImageSide::Features(img),
                text: txt,
            },
        )
    }

    fn flat(ts: &[Tensor<f64>]) -> Vec<f64> {
        ts.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    fn unflatten(trainable: &mut Trainable<f64>, v: &[f64]) {
        let mut off = 0;
        for p in trainable.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&v[off..off + n]);
            off += n;
        }
    }

    #[test]
    fn full_tuning_gradients_match_finite_differences() {
        let (enc, batch) = setup(2);
        let cfg = LossConfig::default();
        let trainable = Trainable::Full(enc.clone());
        let (_, grads) = loss_and_grads(&enc, &trainable, &batch, &cfg).unwrap();
        let x = flat(&trainable.params().into_iter().cloned().collect::<Vec<_>>());
        let err = grad_check_flat(
            |p| {
                let mut t = trainable.clone();
                unflatten(&mut t, p);
                loss_value(&enc, &t, &batch, &cfg).unwrap()
            },
            &flat(&grads),
            &x,
            1e-6,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn lr_zero_leaves_parameters_untouched() {
        let (enc, batch) = setup(3);
        let set = attach(
            &enc,
            &LoraConfig {
                rank: 2,
                ..LoraConfig::default()
            },
            1,
        )
        .unwrap();
        let mut trainable = Trainable::Adapters(set);
        let before = trainable.clone();
        let mut opt = Optimizer::new(
            OptimizerConfig {
                learning_rate: 0.0,
                ..OptimizerConfig::default()
            },
            &trainable,
        );
        let (_, grads) = loss_and_grads(&enc, &trainable, &batch, &LossConfig::default()).unwrap();
        opt.step(&mut trainable, &grads).unwrap();
        assert_eq!(trainable, before);
    }

    #[test]
    fn fixed_images_leave_vision_adapters_without_gradient() {
        let (enc, batch) = setup(4);
        let fixed = PairBatch {
            image: ImageSide::Fixed(
                enc.encode_batch(
                    Tower::Vision,
                    match &batch.image {
                        ImageSide::Features(x) => x,
                        ImageSide::Fixed(_) => unreachable!(),
                    },
                    None,
                )
                .unwrap(),
            ),
            text: batch.text.clone(),
        };
        let set = attach(
            &enc,
            &LoraConfig {
                rank: 2,
                ..LoraConfig::default()
            },
            1,
        )
        .unwrap();
        let mut trainable = Trainable::Adapters(set);
        // give A a gradient path by moving B off zero
        for p in trainable.params_mut() {
            for v in p.data_mut() {
                *v += 0.01;
            }
        }
        let (_, grads) = loss_and_grads(&enc, &trainable, &fixed, &LossConfig::default()).unwrap();
        let Trainable::Adapters(set) = &trainable else {
            unreachable!()
        };
        for (i, ad) in set.adapters().iter().enumerate() {
            let zero = grads[2 * i].data().iter().all(|v| *v == 0.0);
            assert_eq!(zero, ad.layer.tower == Tower::Vision);
        }
    }
}
