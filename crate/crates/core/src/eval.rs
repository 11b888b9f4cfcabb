//! Recall@k, per-domain report tables, method suites and ablation sweeps.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::baselines::{finetune_baseline, t2t_rank, CaptionIndex, FinetuneConfig};
use crate::encoder::DualEncoder;
use crate::episode::{
    encode_query, run_episodes, zero_shot_rank, EpisodeConfig, EpisodeContext, EpisodeOutcome,
    Query, TuningMode,
};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::pool::{PoolStore, RankedList};
use crate::synth::GenQuery;

/// Report cutoffs.
pub const KS: [usize; 3] = [1, 5, 10];
const DEPTH: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    ZeroShot,
    FineTune,
    TextToText,
    Efsa,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::ZeroShot,
        Method::FineTune,
        Method::TextToText,
        Method::Efsa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ZeroShot => "ZS",
            Method::FineTune => "FT",
            Method::TextToText => "T2T",
            Method::Efsa => "EFSA",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
    }
}

/// Fraction of queries whose ground truth sits within the first `k`
/// entries, for each `k`. A ground truth missing from a ranking is a miss;
/// a query without a ground-truth entry is a contract error.
pub fn recall_at_k(
    rankings: &[(String, RankedList)],
    ground_truth: &HashMap<String, String>,
    ks: &[usize],
) -> Result<Vec<f64>> {
    let mut hits = vec![0usize; ks.len()];
    for (qid, ranking) in rankings {
        let gt = ground_truth
            .get(qid)
            .ok_or_else(|| Error::contract(format!("no ground truth for query `{qid}`")))?;
        if let Some(rank) = ranking.rank_of(gt) {
            for (h, &k) in hits.iter_mut().zip(ks) {
                if rank <= k {
                    *h += 1;
                }
            }
        }
    }
    let n = rankings.len().max(1) as f64;
    Ok(hits.into_iter().map(|h| h as f64 / n).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub domain: String,
    pub method: String,
    /// Recall at [`KS`].
    pub recall: [f64; 3],
}

/// Per-domain and average Recall@{1,5,10} rows plus metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecallReport {
    pub rows: Vec<ReportRow>,
    pub metadata: Vec<(String, String)>,
}

pub const AVERAGE: &str = "average";

impl RecallReport {
    /// Appends one row per domain and the unweighted average row.
    pub fn add_method(&mut self, method: &str, per_domain: &[(String, [f64; 3])]) {
        for (d, r) in per_domain {
            self.rows.push(ReportRow {
                domain: d.clone(),
                method: method.to_string(),
                recall: *r,
            });
        }
        let mut avg = [0.0; 3];
        for (_, r) in per_domain {
            for (a, v) in avg.iter_mut().zip(r) {
                *a += v;
            }
        }
        let n = per_domain.len().max(1) as f64;
        self.rows.push(ReportRow {
            domain: AVERAGE.to_string(),
            method: method.to_string(),
            recall: avg.map(|a| a / n),
        });
    }

    pub fn meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, domain: &str, method: &str) -> Option<[f64; 3]> {
        self.rows
            .iter()
            .find(|r| r.domain == domain && r.method == method)
            .map(|r| r.recall)
    }

    pub fn average(&self, method: &str) -> Option<[f64; 3]> {
        self.get(AVERAGE, method)
    }

    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("domain,method,r1,r5,r10\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.4},{:.4},{:.4}",
                r.domain, r.method, r.recall[0], r.recall[1], r.recall[2]
            );
        }
        s
    }

    /// Line-delimited `key=value` records: metadata, then one record per row.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "{k}={v}");
        }
        for r in &self.rows {
            let _ = writeln!(
                s,
                "domain={} method={} r1={:.4} r5={:.4} r10={:.4}",
                r.domain, r.method, r.recall[0], r.recall[1], r.recall[2]
            );
        }
        s
    }

    /// True when every row satisfies R@1 ≤ R@5 ≤ R@10.
    pub fn is_monotone(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.recall[0] <= r.recall[1] && r.recall[1] <= r.recall[2])
    }

    pub fn extend(&mut self, other: RecallReport) {
        self.rows.extend(other.rows);
        self.metadata.extend(other.metadata);
    }
}

/// Everything a suite runs against.
#[derive(Debug, Clone, Copy)]
pub struct SuiteInput<'a> {
    pub pool: &'a PoolStore,
    pub encoders: &'a DualEncoder,
    pub queries: &'a [GenQuery],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub methods: Vec<Method>,
    pub episode: EpisodeConfig,
    pub finetune: FinetuneConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            episode: EpisodeConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

/// Rankings of one method, aligned with the suite's queries.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: String,
    pub rankings: Vec<RankedList>,
    /// EFSA episode outcomes (empty for other methods).
    pub episodes: Vec<EpisodeOutcome>,
}

impl MethodRun {
    /// Line records: query id, method, comma-separated ids, scores.
    pub fn export(&self, queries: &[GenQuery]) -> String {
        let mut s = String::new();
        for (q, r) in queries.iter().zip(&self.rankings) {
            let ids: Vec<&str> = r.ids().collect();
            let scores: Vec<String> = r.entries.iter().map(|(_, v)| format!("{v:.6}")).collect();
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                q.id,
                self.method,
                ids.join(","),
                scores.join(",")
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOutput {
    pub report: RecallReport,
    pub runs: Vec<MethodRun>,
}

impl SuiteOutput {
    pub fn run(&self, method: &str) -> Option<&MethodRun> {
        self.runs.iter().find(|r| r.method == method)
    }
}

fn ground_truth(queries: &[GenQuery]) -> HashMap<String, String> {
    queries
        .iter()
        .map(|q| (q.id.clone(), q.target.clone()))
        .collect()
}

fn domains_of(queries: &[GenQuery]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for q in queries {
        if !out.contains(&q.domain) {
            out.push(q.domain.clone());
        }
    }
    out
}

/// Per-domain recalls of aligned rankings.
pub fn per_domain_recall(
    queries: &[GenQuery],
    rankings: &[RankedList],
) -> Result<Vec<(String, [f64; 3])>> {
    let gt = ground_truth(queries);
    domains_of(queries)
        .into_iter()
        .map(|d| {
            let sel: Vec<(String, RankedList)> = queries
                .iter()
                .zip(rankings)
                .filter(|(q, _)| q.domain == d)
                .map(|(q, r)| (q.id.clone(), r.clone()))
                .collect();
            let r = recall_at_k(&sel, &gt, &KS)?;
            Ok((d, [r[0], r[1], r[2]]))
        })
        .collect()
}

fn text_queries(queries: &[GenQuery]) -> Vec<(String, Query)> {
    queries
        .iter()
        .map(|q| (q.id.clone(), Query::Text(q.text.clone())))
        .collect()
}

/// Zero-shot rankings, `depth` entries each.
pub fn zero_shot_runs(input: &SuiteInput<'_>, depth: usize) -> Result<Vec<RankedList>> {
    use rayon::prelude::*;
    input
        .queries
        .par_iter()
        .map(|q| {
            let e = encode_query(input.encoders, &Query::Text(q.text.clone()))?;
            zero_shot_rank(input.pool, &e, depth)
        })
        .collect()
}

/// EFSA episodes for every query.
pub fn efsa_runs(input: &SuiteInput<'_>, cfg: &EpisodeConfig) -> Result<Vec<EpisodeOutcome>> {
    let ctx = EpisodeContext {
        pool: input.pool,
        encoders: input.encoders,
    };
    run_episodes(&ctx, &text_queries(input.queries), cfg)
}

fn method_run(input: &SuiteInput<'_>, method: Method, cfg: &SuiteConfig) -> Result<MethodRun> {
    use rayon::prelude::*;
    let mut episodes = Vec::new();
    let rankings = match method {
        Method::ZeroShot => zero_shot_runs(input, DEPTH)?,
        Method::TextToText => {
            let index = CaptionIndex::build(input.pool, input.encoders)?;
            input
                .queries
                .par_iter()
                .map(|q| t2t_rank(&index, input.pool, input.encoders, &q.text, DEPTH))
                .collect::<Result<_>>()?
        }
        Method::FineTune => {
            let ft = finetune_baseline(input.pool, input.encoders, &cfg.finetune)?;
            let pool = ft.reindex(input.pool, input.encoders)?;
            input
                .queries
                .par_iter()
                .map(|q| {
                    let e = ft.encode_query(input.encoders, &q.text)?;
                    zero_shot_rank(&pool, &e, DEPTH)
                })
                .collect::<Result<_>>()?
        }
        Method::Efsa => {
            episodes = efsa_runs(input, &cfg.episode)?;
            episodes.iter().map(|o| o.ranking.clone()).collect()
        }
    };
    Ok(MethodRun {
        method: method.name().to_string(),
        rankings,
        episodes,
    })
}

fn suite_metadata(report: &mut RecallReport, input: &SuiteInput<'_>, cfg: &EpisodeConfig) {
    report.meta("pool_size", input.pool.len());
    report.meta("queries", input.queries.len());
    report.meta("k", cfg.k);
    report.meta("epochs", cfg.epochs);
    report.meta("seed", cfg.seed);
}

/// Runs each method over the pool and reports per-domain recall.
pub fn run_suite(input: &SuiteInput<'_>, cfg: &SuiteConfig) -> Result<SuiteOutput> {
    cfg.episode.validate()?;
    let mut report = RecallReport::default();
    suite_metadata(&mut report, input, &cfg.episode);
    let mut runs = Vec::with_capacity(cfg.methods.len());
    for &m in &cfg.methods {
        let run = method_run(input, m, cfg)?;
        if m == Method::Efsa {
            let aborted = run.episodes.iter().filter(|o| o.result.is_none()).count();
            report.meta("efsa_aborted", aborted);
        }
        report.add_method(
            &run.method,
            &per_domain_recall(input.queries, &run.rankings)?,
        );
        runs.push(run);
    }
    Ok(SuiteOutput { report, runs })
}

/// Runs the suite once per domain over that domain's rows only.
pub fn run_single_domain(input: &SuiteInput<'_>, cfg: &SuiteConfig) -> Result<SuiteOutput> {
    let mut report = RecallReport::default();
    suite_metadata(&mut report, input, &cfg.episode);
    let mut per_method: Vec<(String, Vec<(String, [f64; 3])>)> = Vec::new();
    let mut runs: Vec<MethodRun> = Vec::new();
    for d in domains_of(input.queries) {
        let pool = input.pool.subset(&input.pool.domain_rows(&d))?;
        let queries: Vec<GenQuery> = input
            .queries
            .iter()
            .filter(|q| q.domain == d)
            .cloned()
            .collect();
        let sub = SuiteInput {
            pool: &pool,
            encoders: input.encoders,
            queries: &queries,
        };
        let out = run_suite(&sub, cfg)?;
        for run in out.runs {
            let recall = per_domain_recall(&queries, &run.rankings)?;
            match per_method.iter_mut().find(|(m, _)| *m == run.method) {
                Some((_, v)) => v.extend(recall),
                None => per_method.push((run.method.clone(), recall)),
            }
            match runs.iter_mut().find(|r| r.method == run.method) {
                Some(r) => {
                    r.rankings.extend(run.rankings);
                    r.episodes.extend(run.episodes);
                }
                None => runs.push(run),
            }
        }
    }
    for (m, rows) in &per_method {
        report.add_method(m, rows);
    }
    Ok(SuiteOutput { report, runs })
}

/// Per-query flags: ground truth within the first `k` entries.
pub fn hits_within(queries: &[GenQuery], rankings: &[RankedList], k: usize) -> Vec<bool> {
    queries
        .iter()
        .zip(rankings)
        .map(|(q, r)| r.rank_of(&q.target).is_some_and(|i| i <= k))
        .collect()
}

/// Containment: each completed episode's post-ranking is a permutation of
/// its initial top-k ids, and each fallback ranking has at most k entries.
/// Hence EFSA R@c never exceeds the initial retrieval's R@k.
pub fn containment_holds(efsa: &[EpisodeOutcome], k: usize) -> bool {
    efsa.iter().all(|o| match &o.result {
        Some(res) => {
            let mut pre: Vec<&str> = res.pre_ranking.ids().take(k).collect();
            let mut post: Vec<&str> = res.post_ranking.ids().collect();
            pre.sort_unstable();
            post.sort_unstable();
            pre.len() == k && pre == post
        }
        None => o.ranking.len() <= k,
    })
}

/// Initial-retrieval rankings (first `max(k, 10)` zero-shot entries) of
/// completed episodes; fallbacks contribute their zero-shot top-k.
pub fn initial_rankings(efsa: &[EpisodeOutcome]) -> Vec<RankedList> {
    efsa.iter()
        .map(|o| {
            o.result
                .as_ref()
                .map_or_else(|| o.ranking.clone(), |r| r.pre_ranking.clone())
        })
        .collect()
}

fn efsa_variant(
    input: &SuiteInput<'_>,
    name: String,
    cfg: &EpisodeConfig,
    report: &mut RecallReport,
) -> Result<MethodRun> {
    let episodes = efsa_runs(input, cfg)?;
    let rankings: Vec<RankedList> = episodes.iter().map(|o| o.ranking.clone()).collect();
    report.add_method(&name, &per_domain_recall(input.queries, &rankings)?);
    Ok(MethodRun {
        method: name,
        rankings,
        episodes,
    })
}

/// Ablation output: the report plus every variant's runs.
#[derive(Debug, Clone)]
pub struct Ablation {
    pub report: RecallReport,
    pub runs: Vec<MethodRun>,
}

fn avg(report: &RecallReport, m: &str, i: usize) -> f64 {
    report.average(m).map_or(f64::NAN, |r| r[i])
}

/// EFSA at each candidate-set size, with the zero-shot row for reference.
pub fn ablate_topk(input: &SuiteInput<'_>, base: &EpisodeConfig, ks: &[usize]) -> Result<Ablation> {
    let mut report = RecallReport::default();
    suite_metadata(&mut report, input, base);
    let zs = zero_shot_runs(input, DEPTH)?;
    report.add_method(
        Method::ZeroShot.name(),
        &per_domain_recall(input.queries, &zs)?,
    );
    let mut runs = Vec::new();
    for &k in ks {
        let cfg = EpisodeConfig { k, ..*base };
        runs.push(efsa_variant(
            input,
            format!("EFSA-k{k}"),
            &cfg,
            &mut report,
        )?);
    }
    let r10: Vec<f64> = runs.iter().map(|r| avg(&report, &r.method, 2)).collect();
    let r1: Vec<f64> = runs.iter().map(|r| avg(&report, &r.method, 0)).collect();
    report.meta(
        "r10_nondecreasing_in_k",
        r10.windows(2).all(|w| w[0] <= w[1]),
    );
    let plateau = r1.len() < 2 || (r1[r1.len() - 1] - r1[r1.len() - 2]).abs() <= 0.01;
    report.meta("r1_plateau", plateau);
    Ok(Ablation { report, runs })
}

/// EFSA at each epoch count.
pub fn ablate_epochs(
    input: &SuiteInput<'_>,
    base: &EpisodeConfig,
    epochs: &[usize],
) -> Result<Ablation> {
    let mut report = RecallReport::default();
    suite_metadata(&mut report, input, base);
    let mut runs = Vec::new();
    for &e in epochs {
        let cfg = EpisodeConfig { epochs: e, ..*base };
        runs.push(efsa_variant(
            input,
            format!("EFSA-e{e}"),
            &cfg,
            &mut report,
        )?);
    }
    for (i, k) in KS.iter().enumerate() {
        let best = epochs
            .iter()
            .zip(&runs)
            .fold((0usize, f64::NEG_INFINITY), |acc, (&e, r)| {
                let v = avg(&report, &r.method, i);
                if v > acc.1 {
                    (e, v)
                } else {
                    acc
                }
            });
        report.meta(&format!("best_epochs_r{k}"), best.0);
    }
    Ok(Ablation { report, runs })
}

/// EFSA with hinge-only, contrastive-only and combined objectives.
pub fn ablate_loss(input: &SuiteInput<'_>, base: &EpisodeConfig) -> Result<Ablation> {
    let mut report = RecallReport::default();
    suite_metadata(&mut report, input, base);
    let variants: [(&str, LossConfig); 3] = [
        ("hinge", base.loss.hinge_only()),
        ("contrastive", base.loss.contrastive_only()),
        ("combined", base.loss),
    ];
    let mut runs = Vec::new();
    for (name, loss) in variants {
        let cfg = EpisodeConfig { loss, ..*base };
        runs.push(efsa_variant(
            input,
            format!("EFSA-{name}"),
            &cfg,
            &mut report,
        )?);
    }
    Ok(Ablation { report, runs })
}

/// EFSA with adapters versus updating every encoder weight.
pub fn ablate_lora_vs_full(input: &SuiteInput<'_>, base: &EpisodeConfig) -> Result<Ablation> {
    let mut report = RecallReport::default();
    suite_metadata(&mut report, input, base);
    let mut runs = Vec::new();
    for (name, tuning) in [("lora", TuningMode::Lora), ("full", TuningMode::Full)] {
        let cfg = EpisodeConfig { tuning, ..*base };
        runs.push(efsa_variant(
            input,
            format!("EFSA-{name}"),
            &cfg,
            &mut report,
        )?);
    }
    Ok(Ablation { report, runs })
}
