//! Per-query episodes: retrieve the top-k candidates, adapt on their
//! cached captions, re-rank the candidates, reset.

use std::time::{Duration, Instant};

use crate::adapt::{loss_and_grads, loss_value, ImageSide, Optimizer, PairBatch, Trainable};
use crate::encoder::{DualEncoder, Embedding};
use crate::error::{Error, Result};
use crate::features::featurize_text;
use crate::lora::{attach, LoraConfig, LoraTarget, Tower};
use crate::loss::LossConfig;
use crate::optim::OptimizerConfig;
use crate::pool::{captions_for, rank_order, top_k, top_k_rows, PoolStore, RankedList};
use crate::seed::episode_seed;
use crate::tensor::{dot, Tensor};

/// Depth of the zero-shot ranking kept with each episode result.
pub const RECALL_DEPTH: usize = 10;

/// What an episode optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TuningMode {
    #[default]
    Lora,
    /// Every encoder weight, on a private copy discarded after the episode.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeConfig {
    pub k: usize,
    /// Full-batch optimizer steps.
    pub epochs: usize,
    pub loss: LossConfig,
    pub lora: LoraConfig,
    pub optimizer: OptimizerConfig,
    /// Global seed; each episode mixes in its query id.
    pub seed: u64,
    pub tuning: TuningMode,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            k: 16,
            epochs: 1,
            loss: LossConfig::default(),
            lora: LoraConfig::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
            tuning: TuningMode::Lora,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config(format!(
                "episode k = {} must be at least 2",
                self.k
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("episodes need at least one epoch"));
        }
        self.loss.validate()?;
        self.lora.validate()?;
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    Text(String),
    Embedding(Embedding),
}

/// Shared read-only state of a batch of episodes.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeContext<'a> {
    pub pool: &'a PoolStore,
    pub encoders: &'a DualEncoder,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub query_id: String,
    /// Zero-shot ranking over the full pool, first `max(k, RECALL_DEPTH)`
    /// entries.
    pub pre_ranking: RankedList,
    /// The top-k candidates re-ranked by the adapted encoders.
    pub post_ranking: RankedList,
    /// Loss before each optimizer step.
    pub loss_trace: Vec<f32>,
    /// Loss after the last step.
    pub final_loss: f32,
    pub wall_time: Duration,
}

impl EpisodeResult {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.query_id == other.query_id
            && self.pre_ranking == other.pre_ranking
            && self.post_ranking == other.post_ranking
            && self
                .loss_trace
                .iter()
                .map(|v| v.to_bits())
                .eq(other.loss_trace.iter().map(|v| v.to_bits()))
            && self.final_loss.to_bits() == other.final_loss.to_bits()
    }
}

/// Embeds a query with the base text encoder.
pub fn encode_query(encoders: &DualEncoder, query: &Query) -> Result<Embedding> {
    match query {
        Query::Text(text) => {
            let x = featurize_text(text, encoders.text.d_in());
            encoders.encode(Tower::Text, &x, None)
        }
        Query::Embedding(e) => Ok(crate::tensor::l2_normalized(e)?),
    }
}

/// Full-pool cosine ranking with the base model, first `depth` entries.
pub fn zero_shot_rank(pool: &PoolStore, query: &[f32], depth: usize) -> Result<RankedList> {
    top_k(pool, query, depth)
}

fn text_batch(texts: &[String], d_in: usize) -> Result<Tensor> {
    let rows: Vec<Vec<f32>> = texts
        .iter()
        .map(|t| featurize_text(t, d_in).values)
        .collect();
    Tensor::from_rows(&rows)
}

fn feature_batch(pool: &PoolStore, rows: &[usize]) -> Option<Result<Tensor>> {
    let f = pool.features()?;
    let data: Vec<Vec<f32>> = rows.iter().map(|&r| f.row(r).to_vec()).collect();
    Some(Tensor::from_rows(&data))
}

fn cached_batch(pool: &PoolStore, rows: &[usize]) -> Result<Tensor> {
    let data: Vec<Vec<f32>> = rows.iter().map(|&r| pool.embedding(r).to_vec()).collect();
    Tensor::from_rows(&data)
}

/// Runs one episode.
///
/// 1. embed the query with the base text encoder;
/// 2. retrieve the top-k pool rows;
/// 3. look up their cached captions;
/// 4. attach fresh adapters seeded from the global seed and query id;
/// 5. take `epochs` full-batch AdamW steps on the combined loss over the
///    k (image, caption) pairs;
/// 6. re-encode the k images and the query and re-rank by cosine;
/// 7. reset the adapters.
///
/// Pools without raw features keep their cached image embeddings fixed and
/// adapt only the text tower. A non-finite loss or a degenerate embedding
/// aborts the episode.
pub fn run_episode(
    ctx: &EpisodeContext<'_>,
    query_id: &str,
    query: &Query,
    cfg: &EpisodeConfig,
) -> Result<EpisodeResult> {
    cfg.validate()?;
    let started = Instant::now();
    let pool = ctx.pool;
    let enc = ctx.encoders;
    if pool.len() < cfg.k {
        return Err(Error::contract(format!(
            "pool of {} rows is smaller than k = {}",
            pool.len(),
            cfg.k
        )));
    }

    let q0 = encode_query(enc, query)?;
    let pre_rows = top_k_rows(pool, &q0, cfg.k.max(RECALL_DEPTH))?;
    let pre_ranking = RankedList {
        entries: pre_rows
            .iter()
            .map(|&(r, s)| (pool.record(r).id.clone(), s))
            .collect(),
    };
    let top: Vec<usize> = pre_rows[..cfg.k].iter().map(|&(r, _)| r).collect();
    let top_ids: Vec<&str> = top.iter().map(|&r| pool.record(r).id.as_str()).collect();
    let captions = captions_for(pool, &top_ids)?;

    let features = feature_batch(pool, &top).transpose()?;
    let image = match &features {
        Some(x) => ImageSide::Features(x.clone()),
        None => ImageSide::Fixed(cached_batch(pool, &top)?),
    };
    let batch = PairBatch {
        image,
        text: text_batch(&captions, enc.text.d_in())?,
    };

    let seed = episode_seed(cfg.seed, query_id);
    let mut trainable = match cfg.tuning {
        TuningMode::Lora => {
            let mut lora = cfg.lora;
            if features.is_none() {
                lora.target = LoraTarget::Text;
            }
            Trainable::Adapters(attach(enc, &lora, seed)?)
        }
        TuningMode::Full => Trainable::Full(enc.clone()),
    };
    let abort = |trainable: &mut Trainable, reason: String| {
        if let Trainable::Adapters(set) = trainable {
            set.reset();
        }
        Error::Adaptation {
            query: query_id.to_string(),
            reason,
        }
    };

    let degenerate = |e: Error, trainable: &mut Trainable| match e {
        Error::Degenerate { norm, .. } => {
            abort(trainable, format!("degenerate embedding (norm {norm})"))
        }
        e => e,
    };

    let mut opt = Optimizer::new(cfg.optimizer, &trainable);
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, grads) = loss_and_grads(enc, &trainable, &batch, &cfg.loss)
            .map_err(|e| degenerate(e, &mut trainable))?;
        if !loss.is_finite() {
            return Err(abort(
                &mut trainable,
                format!("loss {loss} at step {}", epoch + 1),
            ));
        }
        loss_trace.push(loss);
        opt.step(&mut trainable, &grads)?;
    }
    let final_loss = loss_value(enc, &trainable, &batch, &cfg.loss)
        .map_err(|e| degenerate(e, &mut trainable))?;
    if !final_loss.is_finite() {
        return Err(abort(
            &mut trainable,
            format!("loss {final_loss} after adaptation"),
        ));
    }

    let images = match &features {
        Some(x) => trainable
            .encode(enc, Tower::Vision, x)
            .map_err(|e| degenerate(e, &mut trainable))?,
        None => cached_batch(pool, &top)?,
    };
    let q = match query {
        Query::Text(text) => {
            let x = text_batch(std::slice::from_ref(text), enc.text.d_in())?;
            trainable
                .encode(enc, Tower::Text, &x)
                .map_err(|e| degenerate(e, &mut trainable))?
                .into_data()
        }
        Query::Embedding(_) => q0,
    };
    let mut scored: Vec<(String, f32)> = top
        .iter()
        .enumerate()
        .map(|(i, &r)| (pool.record(r).id.clone(), dot(&q, images.row(i)) as f32))
        .collect();
    if scored.iter().any(|(_, s)| !s.is_finite()) {
        return Err(abort(&mut trainable, "non-finite re-ranking score".into()));
    }
    scored.sort_by(|a, b| rank_order(a.1, &a.0, b.1, &b.0));

    if let Trainable::Adapters(set) = &mut trainable {
        set.reset();
        debug_assert!(set.is_identity());
    }

    Ok(EpisodeResult {
        query_id: query_id.to_string(),
        pre_ranking,
        post_ranking: RankedList { entries: scored },
        loss_trace,
        final_loss,
        wall_time: started.elapsed(),
    })
}

/// Outcome of one query under EFSA, with zero-shot fallback on abort.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub result: Option<EpisodeResult>,
    /// Ranking to score: the post-ranking, or the zero-shot top-k when the
    /// episode aborted.
    pub ranking: RankedList,
    pub error: Option<String>,
}

/// Runs one episode per query in parallel. Results come back in input
/// order and do not depend on scheduling, because each episode's seed is
/// derived from its query id.
pub fn run_episodes(
    ctx: &EpisodeContext<'_>,
    queries: &[(String, Query)],
    cfg: &EpisodeConfig,
) -> Result<Vec<EpisodeOutcome>> {
    use rayon::prelude::*;
    cfg.validate()?;
    queries
        .par_iter()
        .map(|(id, q)| match run_episode(ctx, id, q, cfg) {
            Ok(res) => Ok(EpisodeOutcome {
                ranking: res.post_ranking.clone(),
                result: Some(res),
                error: None,
            }),
            Err(e @ Error::Adaptation { .. }) => {
                let q0 = encode_query(ctx.encoders, q)?;
                Ok(EpisodeOutcome {
                    result: None,
                    ranking: zero_shot_rank(ctx.pool, &q0, cfg.k)?,
                    error: Some(e.to_string()),
                })
            }
            Err(e) => Err(e),
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use std::sync::OnceLock;

    use super::*;
    use crate::adapt::loss_and_grads;
    use crate::encoder::EncoderDims;
    use crate::lora::effective_weight;
    use crate::pipeline::Experiment;
    use crate::pool::PoolStore;
    use crate::synth::BenchConfig;
    use crate::tensor::norm;
    use crate::train::BaseTrainConfig;

    pub(crate) fn fixture() -> &'static Experiment {
        static F: OnceLock<Experiment> = OnceLock::new();
        F.get_or_init(|| {
            let bench = BenchConfig {
                n_domains: 2,
                items_per_domain: 40,
                queries_per_domain: 8,
                n_distractors: 200,
                n_background: 4,
                train_pairs: 400,
                d_in: 32,
                detail_channels: 8,
                ..BenchConfig::default()
            };
            let base = BaseTrainConfig {
                dims: EncoderDims {
                    d_in: 32,
                    d_hidden: 24,
                    d_e: 16,
                    layers: 2,
                },
                steps: 60,
                batch_size: 32,
                ..BaseTrainConfig::default()
            };
            Experiment::build(&bench, &base).unwrap()
        })
    }

    fn ctx(ex: &Experiment) -> EpisodeContext<'_> {
        EpisodeContext {
            pool: &ex.pool,
            encoders: &ex.encoders,
        }
    }

    fn cfg() -> EpisodeConfig {
        EpisodeConfig {
            k: 8,
            seed: 5,
            ..EpisodeConfig::default()
        }
    }

    fn queries(ex: &Experiment) -> Vec<(String, Query)> {
        ex.bench
            .queries
            .iter()
            .map(|q| (q.id.clone(), Query::Text(q.text.clone())))
            .collect()
    }

    #[test]
    fn zero_learning_rate_keeps_the_initial_order() {
        let ex = fixture();
        let cfg = EpisodeConfig {
            optimizer: OptimizerConfig {
                learning_rate: 0.0,
                ..OptimizerConfig::default()
            },
            ..cfg()
        };
        for (id, q) in queries(ex) {
            let res = run_episode(&ctx(ex), &id, &q, &cfg).unwrap();
            let pre: Vec<&str> = res.pre_ranking.ids().take(cfg.k).collect();
            assert_eq!(res.post_ranking.ids().collect::<Vec<_>>(), pre);
            assert_eq!(res.loss_trace.len(), 1);
            assert!((res.loss_trace[0] - res.final_loss).abs() < 1e-6);
        }
    }

    #[test]
    fn post_ranking_permutes_the_initial_top_k() {
        let ex = fixture();
        for epochs in [1, 3] {
            let cfg = EpisodeConfig { epochs, ..cfg() };
            for (id, q) in queries(ex) {
                let res = run_episode(&ctx(ex), &id, &q, &cfg).unwrap();
                let mut pre: Vec<&str> = res.pre_ranking.ids().take(cfg.k).collect();
                let mut post: Vec<&str> = res.post_ranking.ids().collect();
                pre.sort_unstable();
                post.sort_unstable();
                assert_eq!(pre, post);
                assert_eq!(res.loss_trace.len(), epochs);
                assert!(res.pre_ranking.len() >= RECALL_DEPTH);
            }
        }
    }

    #[test]
    fn episodes_do_not_leak_into_each_other() {
        let ex = fixture();
        let qs = queries(ex);
        let first = run_episode(&ctx(ex), &qs[0].0, &qs[0].1, &cfg()).unwrap();
        for (id, q) in &qs[1..] {
            run_episode(&ctx(ex), id, q, &cfg()).unwrap();
        }
        let again = run_episode(&ctx(ex), &qs[0].0, &qs[0].1, &cfg()).unwrap();
        assert!(first.same_outcome(&again));
    }

    #[test]
    fn batch_results_ignore_order_and_thread_count() {
        let ex = fixture();
        let qs = queries(ex);
        let run = |threads: usize, qs: &[(String, Query)]| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_episodes(&ctx(ex), qs, &cfg()).unwrap())
        };
        let one = run(1, &qs);
        let mut reversed = qs.clone();
        reversed.reverse();
        let mut four = run(4, &reversed);
        four.reverse();
        for (a, b) in one.iter().zip(&four) {
            assert!(a
                .result
                .as_ref()
                .unwrap()
                .same_outcome(b.result.as_ref().unwrap()));
            assert_eq!(a.ranking, b.ranking);
        }
    }

    #[test]
    fn one_step_matches_merged_weight_oracle() {
        let ex = fixture();
        let cfg = EpisodeConfig { k: 3, ..cfg() };
        let q = &ex.bench.queries[0];
        let res = run_episode(&ctx(ex), &q.id, &Query::Text(q.text.clone()), &cfg).unwrap();

        let enc = ex.encoders.cast::<f64>();
        let mut set = attach(&enc, &cfg.lora, episode_seed(cfg.seed, &q.id)).unwrap();
        let rows: Vec<usize> = res
            .pre_ranking
            .ids()
            .take(3)
            .map(|id| ex.pool.row_of(id).unwrap())
            .collect();
        let features = ex.pool.features().unwrap();
        let x = Tensor::from_rows(
            &rows
                .iter()
                .map(|&r| features.row(r).to_vec())
                .collect::<Vec<_>>(),
        )
        .unwrap()
        .cast::<f64>();
        let captions: Vec<Vec<f32>> = rows
            .iter()
            .map(|&r| featurize_text(&ex.pool.record(r).caption, 32).values)
            .collect();
        let batch = PairBatch {
            image: ImageSide::Features(x.clone()),
            text: Tensor::from_rows(&captions).unwrap().cast(),
        };
        let (loss, grads) =
            loss_and_grads(&enc, &Trainable::Adapters(set.clone()), &batch, &cfg.loss).unwrap();
        assert!((loss - res.loss_trace[0] as f64).abs() < 1e-5);

        // First AdamW step from B = 0: A has zero gradient and only decays.
        let lr = cfg.optimizer.learning_rate as f64;
        let eps = cfg.optimizer.epsilon as f64;
        let decay = 1.0 - lr * cfg.optimizer.weight_decay as f64;
        let mut merged = enc.clone();
        for (i, ad) in set.adapters_mut().iter_mut().enumerate() {
            let (gb, ga) = (&grads[2 * i], &grads[2 * i + 1]);
            assert!(ga.data().iter().all(|&v| v == 0.0));
            ad.b = gb.map(|g| -lr * g / (g.abs() + eps));
            ad.a = ad.a.scale(decay);
            let layer = &mut merged.tower_mut(ad.layer.tower).layers_mut()[ad.layer.index];
            layer.weight = effective_weight(&layer.weight, ad, &cfg.lora).unwrap();
        }

        let img = merged.encode_batch(Tower::Vision, &x, None).unwrap();
        let qx = Tensor::from_rows(&[featurize_text(&q.text, 32).values])
            .unwrap()
            .cast();
        let qe = merged.encode_batch(Tower::Text, &qx, None).unwrap();
        let mut expected: Vec<(String, f64)> = rows
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let s = dot(qe.row(0), img.row(i)) / (norm(qe.row(0)) * norm(img.row(i)));
                (ex.pool.record(r).id.clone(), s)
            })
            .collect();
        expected.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for ((id, s), (eid, es)) in res.post_ranking.entries.iter().zip(&expected) {
            assert_eq!(id, eid);
            assert!((*s as f64 - es).abs() < 1e-4, "{s} vs {es}");
        }
    }

    #[test]
    fn text_only_pool_adapts_the_text_tower() {
        let ex = fixture();
        let pool = PoolStore::new(
            ex.pool.dim(),
            ex.pool.embeddings().to_vec(),
            ex.pool.manifest().to_vec(),
        )
        .unwrap();
        let ctx = EpisodeContext {
            pool: &pool,
            encoders: &ex.encoders,
        };
        let (id, q) = &queries(ex)[0];
        let res = run_episode(&ctx, id, q, &cfg()).unwrap();
        let mut pre: Vec<&str> = res.pre_ranking.ids().take(8).collect();
        let mut post: Vec<&str> = res.post_ranking.ids().collect();
        pre.sort_unstable();
        post.sort_unstable();
        assert_eq!(pre, post);
    }

    #[test]
    fn non_finite_loss_aborts_and_falls_back() {
        let ex = fixture();
        let f = ex.pool.features().unwrap();
        let nan = crate::pool::FeatureMatrix::new(f.dim(), vec![f32::NAN; f.data().len()]).unwrap();
        let pool = PoolStore::new(
            ex.pool.dim(),
            ex.pool.embeddings().to_vec(),
            ex.pool.manifest().to_vec(),
        )
        .unwrap()
        .with_features(nan)
        .unwrap();
        let ctx = EpisodeContext {
            pool: &pool,
            encoders: &ex.encoders,
        };
        let qs = queries(ex);
        let err = run_episode(&ctx, &qs[0].0, &qs[0].1, &cfg());
        assert!(matches!(err, Err(Error::Adaptation { .. })), "{err:?}");
        let out = run_episodes(&ctx, &qs[..2], &cfg()).unwrap();
        for o in out {
            assert!(o.result.is_none() && o.error.is_some());
            assert_eq!(o.ranking.len(), 8);
        }
    }

    #[test]
    fn contract_and_config_errors() {
        let ex = fixture();
        let (id, q) = &queries(ex)[0];
        let bad = EpisodeConfig { k: 1, ..cfg() };
        assert!(matches!(
            run_episode(&ctx(ex), id, q, &bad),
            Err(Error::Config(_))
        ));
        let bad = EpisodeConfig { epochs: 0, ..cfg() };
        assert!(matches!(
            run_episode(&ctx(ex), id, q, &bad),
            Err(Error::Config(_))
        ));
        let small = ex.pool.subset(&[0, 1, 2]).unwrap();
        let ctx = EpisodeContext {
            pool: &small,
            encoders: &ex.encoders,
        };
        assert!(matches!(
            run_episode(&ctx, id, q, &cfg()),
            Err(Error::Contract(_))
        ));
    }
}
