//! Baselines: text-to-text matching against cached captions (T2T) and
//! persistent LoRA fine-tuning over the whole caption-paired pool (FT).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapt::{loss_and_grads, ImageSide, Optimizer, PairBatch, Trainable};
use crate::encoder::{DualEncoder, Embedding};
use crate::error::{Error, Result};
use crate::features::featurize_text;
use crate::lora::{attach, AdapterSet, LoraConfig, Tower};
use crate::loss::LossConfig;
use crate::optim::OptimizerConfig;
use crate::pool::{rank_order, PoolStore, RankedList};
use crate::seed::derive;
use crate::tensor::{dot, l2_normalized, Tensor};

/// Base-text-encoder embeddings of every cached caption; `None` for
/// captions with no tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionIndex {
    embeddings: Vec<Option<Embedding>>,
}

impl CaptionIndex {
    pub fn build(pool: &PoolStore, encoders: &DualEncoder) -> Result<Self> {
        let d_in = encoders.text.d_in();
        let mut embeddings = vec![None; pool.len()];
        let live: Vec<usize> = (0..pool.len())
            .filter(|&r| !featurize_text(&pool.record(r).caption, d_in).is_degenerate())
            .collect();
        for chunk in live.chunks(1024) {
            let rows: Vec<Vec<f32>> = chunk
                .iter()
                .map(|&r| featurize_text(&pool.record(r).caption, d_in).values)
                .collect();
            let e = encoders.encode_batch(Tower::Text, &Tensor::from_rows(&rows)?, None)?;
            for (i, &r) in chunk.iter().enumerate() {
                embeddings[r] = Some(e.row(i).to_vec());
            }
        }
        Ok(Self { embeddings })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

/// Ranks pool images by base-text-encoder cosine between the query and
/// each image's cached caption. Captions without tokens rank after every
/// scored caption, by ascending id.
pub fn t2t_rank(
    index: &CaptionIndex,
    pool: &PoolStore,
    encoders: &DualEncoder,
    query: &str,
    depth: usize,
) -> Result<RankedList> {
    if pool.is_empty() {
        return Err(Error::contract("t2t_rank on an empty pool"));
    }
    if index.len() != pool.len() {
        return Err(Error::contract("caption index does not match the pool"));
    }
    let q = encoders.encode(
        Tower::Text,
        &featurize_text(query, encoders.text.d_in()),
        None,
    )?;
    let mut scored: Vec<(usize, f32)> = index
        .embeddings
        .iter()
        .enumerate()
        .map(|(r, e)| {
            (
                r,
                e.as_ref().map_or(f32::NEG_INFINITY, |e| dot(&q, e) as f32),
            )
        })
        .collect();
    scored.sort_by(|a, b| rank_order(a.1, &pool.record(a.0).id, b.1, &pool.record(b.0).id));
    scored.truncate(depth);
    Ok(RankedList {
        entries: scored
            .into_iter()
            .map(|(r, s)| (pool.record(r).id.clone(), s))
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub lora: LoraConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 32,
            loss: LossConfig::default(),
            lora: LoraConfig::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("finetune batch_size must be at least 2"));
        }
        self.loss.validate()?;
        self.lora.validate()?;
        self.optimizer.validate()
    }
}

/// A persistently adapted model.
#[derive(Debug, Clone, PartialEq)]
pub struct Finetuned {
    pub adapters: AdapterSet,
    /// Mean minibatch loss per epoch.
    pub loss_trace: Vec<f32>,
}

impl Finetuned {
    /// Re-encodes every pool image with the adapted vision tower.
    pub fn reindex(&self, pool: &PoolStore, encoders: &DualEncoder) -> Result<PoolStore> {
        let features = pool
            .features()
            .ok_or_else(|| Error::contract("finetuned re-indexing needs pool features"))?;
        let dim = features.dim();
        let mut embeddings = Vec::with_capacity(pool.len() * pool.dim());
        for chunk in features.data().chunks(1024 * dim) {
            let x = Tensor::matrix(chunk.len() / dim, dim, chunk.to_vec())?;
            let e = encoders.encode_batch(Tower::Vision, &x, Some(&self.adapters))?;
            embeddings.extend_from_slice(e.data());
        }
        PoolStore::new(pool.dim(), embeddings, pool.manifest().to_vec())?
            .with_features(features.clone())
    }

    pub fn encode_query(&self, encoders: &DualEncoder, query: &str) -> Result<Embedding> {
        let x = featurize_text(query, encoders.text.d_in());
        encoders.encode(Tower::Text, &x, Some(&self.adapters))
    }
}

/// LoRA fine-tuning on every (image, caption) pair of the pool with the
/// episode loss and optimizer, over shuffled minibatches, without reset.
/// Rows whose caption has no tokens are skipped.
pub fn finetune_baseline(
    pool: &PoolStore,
    encoders: &DualEncoder,
    cfg: &FinetuneConfig,
) -> Result<Finetuned> {
    cfg.validate()?;
    let features = pool
        .features()
        .ok_or_else(|| Error::contract("finetuning needs pool features"))?;
    let d_in = encoders.text.d_in();
    let rows: Vec<usize> = (0..pool.len())
        .filter(|&r| !featurize_text(&pool.record(r).caption, d_in).is_degenerate())
        .collect();
    if cfg.epochs > 0 && rows.len() < 2 {
        return Err(Error::contract(
            "finetuning needs at least two captioned rows",
        ));
    }
    let mut trainable = Trainable::Adapters(attach(encoders, &cfg.lora, derive(cfg.seed, 0x6674))?);
    let mut opt = Optimizer::new(cfg.optimizer, &trainable);
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, 0x6675));
    let mut order = rows;
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let img: Vec<&[f32]> = chunk.iter().map(|&r| features.row(r)).collect();
            let txt: Vec<Vec<f32>> = chunk
                .iter()
                .map(|&r| featurize_text(&pool.record(r).caption, d_in).values)
                .collect();
            let batch = PairBatch {
                image: ImageSide::Features(Tensor::from_rows(&img)?),
                text: Tensor::from_rows(&txt)?,
            };
            let (loss, grads) = loss_and_grads(encoders, &trainable, &batch, &cfg.loss)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    step: epoch + 1,
                    loss: loss as f64,
                });
            }
            total += loss as f64;
            batches += 1;
            opt.step(&mut trainable, &grads)?;
        }
        loss_trace.push((total / batches.max(1) as f64) as f32);
    }
    let Trainable::Adapters(adapters) = trainable else {
        unreachable!()
    };
    Ok(Finetuned {
        adapters,
        loss_trace,
    })
}

/// Scores the pool with a query embedding; `depth` entries.
pub fn rank_with(pool: &PoolStore, query: &[f32], depth: usize) -> Result<RankedList> {
    let q = l2_normalized(query)?;
    crate::pool::top_k(pool, &q, depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderDims;
    use crate::pool::{FeatureMatrix, ManifestRecord};
    use crate::tensor::Activation;

    fn dims() -> EncoderDims {
        EncoderDims {
            d_in: 16,
            d_hidden: 12,
            d_e: 6,
            layers: 2,
        }
    }

    fn pool(captions: &[&str], enc: &DualEncoder) -> PoolStore {
        let n = captions.len();
        let feats: Vec<f32> = (0..n * 16)
            .map(|i| ((i * 37 % 23) as f32 - 11.0) / 7.0)
            .collect();
        let fm = FeatureMatrix::new(16, feats).unwrap();
        let emb = crate::train::encode_features(enc, Tower::Vision, &fm).unwrap();
        let manifest = captions
            .iter()
            .enumerate()
            .map(|(i, c)| ManifestRecord::new(format!("img{i:02}"), "d", *c))
            .collect();
        PoolStore::new(6, emb, manifest)
            .unwrap()
            .with_features(fm)
            .unwrap()
    }

    #[test]
    fn identical_caption_ranks_first() {
        let enc = DualEncoder::init(1, &dims(), Activation::Tanh).unwrap();
        let p = pool(
            &["red cube", "blue ball", "green cone", "tall red tower"],
            &enc,
        );
        let idx = CaptionIndex::build(&p, &enc).unwrap();
        let r = t2t_rank(&idx, &p, &enc, "green cone", 4).unwrap();
        assert_eq!(r.entries[0].0, "img02");
    }

    #[test]
    fn duplicate_captions_adjacent_by_id_and_empty_last() {
        let enc = DualEncoder::init(2, &dims(), Activation::Tanh).unwrap();
        let p = pool(&["", "blue ball", "red cube", "red cube"], &enc);
        let idx = CaptionIndex::build(&p, &enc).unwrap();
        let r = t2t_rank(&idx, &p, &enc, "red cube", 4).unwrap();
        assert_eq!(
            r.ids().collect::<Vec<_>>(),
            ["img02", "img03", "img01", "img00"]
        );
    }

    #[test]
    fn t2t_matches_full_sort_oracle() {
        let enc = DualEncoder::init(3, &dims(), Activation::Tanh).unwrap();
        let caps: Vec<String> = (0..30)
            .map(|i| format!("w{} w{} w{}", i % 7, i % 5, i % 3))
            .collect();
        let refs: Vec<&str> = caps.iter().map(|s| s.as_str()).collect();
        let p = pool(&refs, &enc);
        let idx = CaptionIndex::build(&p, &enc).unwrap();
        let q = "w1 w2 w4";
        let qe = enc
            .encode(Tower::Text, &featurize_text(q, 16), None)
            .unwrap();
        let mut oracle: Vec<(String, f64)> = caps
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let e = enc
                    .encode(Tower::Text, &featurize_text(c, 16), None)
                    .unwrap();
                let s: f64 = qe.iter().zip(&e).map(|(a, b)| *a as f64 * *b as f64).sum();
                (format!("img{i:02}"), s)
            })
            .collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let got = t2t_rank(&idx, &p, &enc, q, 30).unwrap();
        let want: Vec<&str> = oracle.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(got.ids().collect::<Vec<_>>(), want);
    }

    #[test]
    fn zero_epoch_finetune_reproduces_zero_shot() {
        let enc = DualEncoder::init(4, &dims(), Activation::Tanh).unwrap();
        let caps: Vec<String> = (0..20).map(|i| format!("w{} w{}", i % 4, i % 6)).collect();
        let refs: Vec<&str> = caps.iter().map(|s| s.as_str()).collect();
        let p = pool(&refs, &enc);
        let ft = finetune_baseline(
            &p,
            &enc,
            &FinetuneConfig {
                epochs: 0,
                ..FinetuneConfig::default()
            },
        )
        .unwrap();
        let re = ft.reindex(&p, &enc).unwrap();
        assert_eq!(re.embeddings(), p.embeddings());
        let q0 = enc
            .encode(Tower::Text, &featurize_text("w1 w3", 16), None)
            .unwrap();
        assert_eq!(ft.encode_query(&enc, "w1 w3").unwrap(), q0);
    }

    #[test]
    fn finetune_records_finite_epoch_losses() {
        let enc = DualEncoder::init(5, &dims(), Activation::Tanh).unwrap();
        let caps: Vec<String> = (0..40).map(|i| format!("w{} w{}", i % 4, i % 6)).collect();
        let refs: Vec<&str> = caps.iter().map(|s| s.as_str()).collect();
        let p = pool(&refs, &enc);
        let cfg = FinetuneConfig {
            batch_size: 8,
            lora: LoraConfig {
                rank: 2,
                ..LoraConfig::default()
            },
            ..FinetuneConfig::default()
        };
        let ft = finetune_baseline(&p, &enc, &cfg).unwrap();
        assert_eq!(ft.loss_trace.len(), 4);
        assert!(ft.loss_trace.iter().all(|l| l.is_finite()));
        assert_eq!(ft, finetune_baseline(&p, &enc, &cfg).unwrap());
    }
}
