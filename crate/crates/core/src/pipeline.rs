//! End-to-end wiring: generate a benchmark, pre-train the base encoders,
//! index the pool.

use crate::encoder::DualEncoder;
use crate::error::Result;
use crate::lora::Tower;
use crate::pool::{FeatureMatrix, ManifestRecord, PoolStore};
use crate::synth::{generate, BenchConfig, Benchmark};
use crate::train::{encode_features, train_base, BaseTrainConfig};

/// Encodes every feature row with the base vision tower and stores the
/// embeddings with their manifest, keeping the raw features for adaptation.
pub fn index_pool(
    encoders: &DualEncoder,
    features: FeatureMatrix,
    manifest: Vec<ManifestRecord>,
) -> Result<PoolStore> {
    let embeddings = encode_features(encoders, Tower::Vision, &features)?;
    PoolStore::new(encoders.vision.d_e(), embeddings, manifest)?.with_features(features)
}

/// A generated benchmark, its trained base model and the indexed pool.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub bench: Benchmark,
    pub encoders: DualEncoder,
    pub pool: PoolStore,
}

impl Experiment {
    pub fn build(bench: &BenchConfig, base: &BaseTrainConfig) -> Result<Self> {
        let bench = generate(bench)?;
        let encoders = train_base(&bench.train_data(), base)?.encoders;
        let pool = index_pool(&encoders, bench.features(), bench.manifest())?;
        Ok(Self {
            bench,
            encoders,
            pool,
        })
    }

    pub fn suite_input(&self) -> crate::eval::SuiteInput<'_> {
        crate::eval::SuiteInput {
            pool: &self.pool,
            encoders: &self.encoders,
            queries: &self.bench.queries,
        }
    }
}
