//! Episodic few-shot adaptation for text-to-image retrieval.
//!
//! Each query retrieves its top-k candidates from a cached pool, adapts
//! low-rank adapters on both encoder towers for one step using the
//! candidates' cached captions, re-ranks the candidates with the adapted
//! encoders, and resets the adapters before the next query.

pub mod adapt;
pub mod baselines;
pub mod encoder;
pub mod episode;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod lora;
pub mod loss;
pub mod optim;
pub mod pipeline;
pub mod pool;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;

pub use encoder::{DualEncoder, Embedding, EncoderDims, EncoderParams};
pub use error::{Error, Result};
pub use features::{featurize_text, FeatureSource, FeatureVector};
pub use graph::{Graph, Var};
pub use lora::{AdapterSet, LoraConfig, LoraTarget, Tower};
pub use loss::LossConfig;
pub use optim::OptimizerConfig;
pub use pool::{ManifestRecord, PoolStore, RankedList};
pub use tensor::{Activation, Scalar, Tensor};
