//! Base-model pre-training: symmetric contrastive training of both towers
//! from scratch on paired (image features, text) data.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapt::{Optimizer, Trainable};
use crate::encoder::{forward_graph, DualEncoder, EncoderDims};
use crate::error::{Error, Result};
use crate::features::featurize_text;
use crate::graph::Graph;
use crate::lora::Tower;
use crate::loss;
use crate::optim::OptimizerConfig;
use crate::seed::derive;
use crate::synth::PairedData;
use crate::tensor::{Activation, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseTrainConfig {
    pub dims: EncoderDims,
    pub activation: Activation,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub temperature: f32,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            dims: EncoderDims::default(),
            activation: Activation::Tanh,
            steps: 1500,
            batch_size: 128,
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                weight_decay: 1.0,
                ..OptimizerConfig::default()
            },
            temperature: 0.07,
            seed: 7,
        }
    }
}

impl BaseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.optimizer.validate()?;
        if self.batch_size < 2 {
            return Err(Error::config("base training batch_size must be at least 2"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "temperature = {} must be > 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedBase {
    pub encoders: DualEncoder,
    /// Loss before each step.
    pub loss_trace: Vec<f32>,
}

fn gather(m: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let cols = m.cols();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(m.row(r));
    }
    Tensor::matrix(rows.len(), cols, data)
}

/// Trains both towers with the symmetric (image-to-text plus text-to-image)
/// contrastive loss over shuffled minibatches. Deterministic from
/// `cfg.seed`; zero steps returns the initialization.
pub fn train_base(data: &PairedData, cfg: &BaseTrainConfig) -> Result<TrainedBase> {
    cfg.validate()?;
    if data.features.dim() != cfg.dims.d_in {
        return Err(Error::shape(format!(
            "features of dimension {} for d_in {}",
            data.features.dim(),
            cfg.dims.d_in
        )));
    }
    let n = data.len();
    if cfg.steps > 0 && n < 2 {
        return Err(Error::contract("base training needs at least two pairs"));
    }
    let encoders = DualEncoder::init(derive(cfg.seed, 0), &cfg.dims, cfg.activation)?;
    let mut trainable = Trainable::Full(encoders);
    let mut opt = Optimizer::new(cfg.optimizer, &trainable);
    let images = Tensor::matrix(n, data.features.dim(), data.features.data().to_vec())?;
    let text_rows: Vec<Vec<f32>> = data
        .texts
        .iter()
        .map(|t| featurize_text(t, cfg.dims.d_in).values)
        .collect();
    let texts = if n == 0 {
        Tensor::zeros(&[0, cfg.dims.d_in])
    } else {
        Tensor::from_rows(&text_rows)?
    };

    let batch = cfg.batch_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, 1));
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut loss_trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let rows = &order[cursor..cursor + batch];
        cursor += batch;

        let Trainable::Full(enc) = &trainable else {
            unreachable!()
        };
        let mut g = Graph::new();
        let xv = g.constant(gather(&images, rows)?);
        let xt = g.constant(gather(&texts, rows)?);
        let lv = enc.vision.bind(&mut g, true);
        let lt = enc.text.bind(&mut g, true);
        let diverged = |e: Error| match e {
            Error::Degenerate { .. } => Error::Training {
                step: step + 1,
                loss: f64::NAN,
            },
            e => e,
        };
        let img = forward_graph(&mut g, xv, &lv, enc.vision.activation()).map_err(diverged)?;
        let txt = forward_graph(&mut g, xt, &lt, enc.text.activation()).map_err(diverged)?;
        let i2t = loss::contrastive(&mut g, img, txt, cfg.temperature)?;
        let t2i = loss::contrastive(&mut g, txt, img, cfg.temperature)?;
        let both = g.add(i2t, t2i)?;
        let root = g.scale(both, 0.5);
        let value = g.value(root).item()?;
        if !value.is_finite() {
            return Err(Error::Training {
                step: step + 1,
                loss: value as f64,
            });
        }
        loss_trace.push(value);
        let mut grads = g.backward(root)?;
        let mut flat = Vec::with_capacity(4 * lv.len());
        for layer in lv.iter().chain(&lt) {
            for v in [layer.weight, layer.bias] {
                flat.push(
                    grads
                        .take(v)
                        .ok_or_else(|| Error::contract("missing base gradient"))?,
                );
            }
        }
        opt.step(&mut trainable, &flat)?;
    }
    let Trainable::Full(encoders) = trainable else {
        unreachable!()
    };
    Ok(TrainedBase {
        encoders,
        loss_trace,
    })
}

/// Encodes every feature row with the base vision tower, in batches.
pub fn encode_features(
    encoders: &DualEncoder,
    tower: Tower,
    features: &crate::pool::FeatureMatrix,
) -> Result<Vec<f32>> {
    const BATCH: usize = 1024;
    let dim = features.dim();
    let mut out = Vec::with_capacity(features.len() * encoders.tower(tower).d_e());
    for chunk in features.data().chunks(BATCH * dim) {
        let x = Tensor::matrix(chunk.len() / dim, dim, chunk.to_vec())?;
        out.extend_from_slice(encoders.encode_batch(tower, &x, None)?.data());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::FeatureMatrix;
    use crate::synth::{generate, BenchConfig};

    fn tiny() -> (PairedData, BaseTrainConfig) {
        let bench = generate(&BenchConfig {
            n_domains: 2,
            items_per_domain: 8,
            queries_per_domain: 2,
            n_distractors: 0,
            n_background: 2,
            train_pairs: 64,
            d_in: 32,
            detail_channels: 8,
            ..BenchConfig::default()
        })
        .unwrap();
        let cfg = BaseTrainConfig {
            dims: EncoderDims {
                d_in: 32,
                d_hidden: 16,
                d_e: 8,
                layers: 2,
            },
            steps: 40,
            batch_size: 16,
            ..BaseTrainConfig::default()
        };
        (bench.train_data(), cfg)
    }

    #[test]
    fn zero_steps_is_the_initialization() {
        let (data, cfg) = tiny();
        let out = train_base(&data, &BaseTrainConfig { steps: 0, ..cfg }).unwrap();
        assert_eq!(
            out.encoders,
            DualEncoder::init(derive(cfg.seed, 0), &cfg.dims, cfg.activation).unwrap()
        );
        assert!(out.loss_trace.is_empty());
    }

    #[test]
    fn deterministic_and_loss_decreases() {
        let (data, cfg) = tiny();
        let a = train_base(&data, &cfg).unwrap();
        let b = train_base(&data, &cfg).unwrap();
        assert_eq!(a, b);
        let head: f32 = a.loss_trace[..5].iter().sum();
        let tail: f32 = a.loss_trace[35..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn divergence_is_a_training_error() {
        let (data, cfg) = tiny();
        let nan = PairedData::new(
            FeatureMatrix::new(32, vec![f32::NAN; data.features.data().len()]).unwrap(),
            data.texts.clone(),
        )
        .unwrap();
        assert!(matches!(
            train_base(&nan, &cfg),
            Err(Error::Training { step: 1, .. })
        ));
    }

    #[test]
    fn batched_encoding_matches_rows() {
        let (data, cfg) = tiny();
        let enc = DualEncoder::init(3, &cfg.dims, cfg.activation).unwrap();
        let all = encode_features(&enc, Tower::Vision, &data.features).unwrap();
        for i in [0, 17, 63] {
            let x = crate::features::FeatureVector::image(data.features.row(i).to_vec());
            assert_eq!(
                &all[i * 8..(i + 1) * 8],
                &enc.encode(Tower::Vision, &x, None).unwrap()[..]
            );
        }
    }
}
