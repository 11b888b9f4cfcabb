//! Synthetic multi-domain retrieval benchmark with hard-negative groups.
//!
//! Every target domain is a cluster around a signature vector. Items carry
//! one value per attribute slot; the members of a hard group share every
//! slot except one fine-detail slot. An image is
//! `signature + Σ attribute embeddings + σ·noise`, except that:
//!
//! - the trailing `detail_channels` input dimensions carry no signature or
//!   attribute signal; deployed target-domain images show their detail
//!   values there, as per-domain vectors of norm `detail_shift`;
//! - deployed images show the generic detail embedding only at
//!   `detail_salience`;
//! - open-domain images carry no detail attributes at all.
//!
//! Pre-training pairs show target-domain details in the generic appearance
//! only, so the base model never sees the deployed detail channels. Cached
//! captions name the distinguishing detail plus `caption_slots` other
//! attributes; queries describe every slot in a different template.
//! Open-domain distractors come from background clusters; lookalike
//! distractors are captioned with target-domain vocabulary.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::pool::{
    parse_tsv_line, read_features, read_manifest, write_features, write_manifest, write_tsv_line,
    FeatureMatrix, ManifestRecord, RankedList,
};
use crate::seed::derive;

const DOMAIN_NAMES: [&str; 8] = [
    "aerial", "botany", "cuisine", "fashion", "fauna", "interior", "street", "textile",
];
const SLOT_NAMES: [&str; 8] = [
    "hue", "form", "grain", "size", "pose", "mood", "era", "glow",
];
const OPEN_DOMAIN: &str = "open";

const TAG_WORLD: u64 = 1;
const TAG_DOMAIN: u64 = 2;
const TAG_DISTRACTOR: u64 = 3;
const TAG_QUERY: u64 = 4;
const TAG_TRAIN: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub n_domains: usize,
    /// Must be a multiple of `hard_group_size`.
    pub items_per_domain: usize,
    pub hard_group_size: usize,
    pub n_slots: usize,
    /// Values per attribute slot.
    pub vocab_size: usize,
    /// Slots `0..detail_slots` are fine details; hard groups vary in one of
    /// them.
    pub detail_slots: usize,
    /// Scale of the generic detail embedding in deployed images.
    pub detail_salience: f32,
    /// Feature noise; the noise vector has expected norm σ.
    pub sigma: f32,
    /// Norm of a domain signature relative to one attribute embedding.
    pub signature_scale: f32,
    pub queries_per_domain: usize,
    pub n_distractors: usize,
    /// Background clusters the distractors are drawn around.
    pub n_background: usize,
    /// Fraction of distractors captioned with a target domain's place word
    /// and a detail word.
    pub lookalike_fraction: f32,
    /// Trailing input dimensions reserved for deployed detail appearance.
    pub detail_channels: usize,
    /// Norm of a deployed detail vector on the detail channels.
    pub detail_shift: f32,
    /// Pre-training pairs for the base model (disjoint from the pool).
    pub train_pairs: usize,
    /// Fraction of pre-training pairs drawn from the target domains; the
    /// rest come from the open-domain background.
    pub train_domain_fraction: f32,
    /// Slots a cached caption mentions besides the distinguishing one.
    pub caption_slots: usize,
    /// Chance that each extra caption word names the wrong value.
    pub caption_error: f32,
    pub d_in: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_domains: 4,
            items_per_domain: 600,
            hard_group_size: 2,
            n_slots: 4,
            vocab_size: 8,
            detail_slots: 1,
            detail_salience: 0.1,
            sigma: 0.8,
            signature_scale: 1.0,
            queries_per_domain: 100,
            n_distractors: 20_000,
            n_background: 32,
            lookalike_fraction: 1.0,
            detail_channels: 64,
            detail_shift: 3.0,
            train_pairs: 8_000,
            train_domain_fraction: 0.1,
            caption_slots: 2,
            caption_error: 0.0,
            d_in: 256,
            seed: 1,
        }
    }
}

fn finite_nonneg(name: &str, v: f32) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "{name} = {v} must be finite and >= 0"
        )))
    }
}

fn fraction(name: &str, v: f32) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(format!("{name} = {v} must lie in [0, 1]")))
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_domains", self.n_domains),
            ("items_per_domain", self.items_per_domain),
            ("n_slots", self.n_slots),
            ("vocab_size", self.vocab_size),
            ("queries_per_domain", self.queries_per_domain),
            ("n_background", self.n_background),
            ("d_in", self.d_in),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.hard_group_size < 2 {
            return Err(Error::config("hard_group_size must be at least 2"));
        }
        if self.hard_group_size > self.vocab_size {
            return Err(Error::config(format!(
                "hard_group_size {} exceeds vocab_size {}",
                self.hard_group_size, self.vocab_size
            )));
        }
        if !self.items_per_domain.is_multiple_of(self.hard_group_size) {
            return Err(Error::config(format!(
                "items_per_domain {} is not a multiple of hard_group_size {}",
                self.items_per_domain, self.hard_group_size
            )));
        }
        if self.queries_per_domain > self.items_per_domain {
            return Err(Error::config("queries_per_domain exceeds items_per_domain"));
        }
        if self.n_slots > SLOT_NAMES.len() {
            return Err(Error::config(format!("at most {} slots", SLOT_NAMES.len())));
        }
        if self.detail_slots == 0 || self.detail_slots >= self.n_slots {
            return Err(Error::config("detail_slots must lie in 1..n_slots"));
        }
        if self.caption_slots >= self.n_slots {
            return Err(Error::config("caption_slots must be below n_slots"));
        }
        let tuples = (self.vocab_size as f64).powi(self.n_slots as i32);
        if tuples < 2.0 * self.items_per_domain as f64 {
            return Err(Error::config(
                "attribute space too small for items_per_domain",
            ));
        }
        if self.detail_channels >= self.d_in {
            return Err(Error::config("detail_channels must be below d_in"));
        }
        finite_nonneg("sigma", self.sigma)?;
        finite_nonneg("signature_scale", self.signature_scale)?;
        finite_nonneg("detail_salience", self.detail_salience)?;
        finite_nonneg("detail_shift", self.detail_shift)?;
        fraction("lookalike_fraction", self.lookalike_fraction)?;
        fraction("train_domain_fraction", self.train_domain_fraction)?;
        fraction("caption_error", self.caption_error)
    }
}

pub fn domain_name(d: usize) -> String {
    DOMAIN_NAMES
        .get(d)
        .map_or_else(|| format!("domain{d}"), |s| s.to_string())
}

pub fn attribute_word(slot: usize, value: usize) -> String {
    format!("{}{}", SLOT_NAMES[slot], value)
}

/// Generative latents of one item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Latents {
    /// Target-domain index; `None` for open-domain distractors.
    pub domain: Option<usize>,
    /// Hard group within the domain.
    pub group: Option<usize>,
    pub attributes: Vec<usize>,
    /// The slot that varies inside the hard group.
    pub distinguishing_slot: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenItem {
    pub id: String,
    pub domain: String,
    pub latents: Latents,
    pub features: Vec<f32>,
    pub caption: String,
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenQuery {
    pub id: String,
    pub domain: String,
    pub target: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub domain: String,
    pub features: Vec<f32>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub config: BenchConfig,
    /// Domain items in domain order, then distractors.
    pub items: Vec<GenItem>,
    pub queries: Vec<GenQuery>,
    pub train: Vec<TrainPair>,
}

struct World {
    signatures: Vec<Vec<f32>>,
    background: Vec<Vec<f32>>,
    /// `[slot][value]` embeddings.
    attributes: Vec<Vec<Vec<f32>>>,
    /// `[domain][detail slot][value]` deployed appearance on the detail
    /// channels.
    shifts: Vec<Vec<Vec<Vec<f32>>>>,
    detail_slots: usize,
    detail_salience: f64,
    detail_channels: usize,
}

/// How an image shows its detail slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Appearance {
    /// Not at all.
    Open,
    /// Generic embedding at full scale.
    Generic,
    /// Generic embedding at `detail_salience`, plus the domain's vectors on
    /// the detail channels.
    Deployed(usize),
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize, norm: f32) -> Vec<f32> {
    let s = norm as f64 / (d as f64).sqrt();
    (0..d)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * s) as f32)
        .collect()
}

fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(derive(seed, tag), index))
}

impl World {
    fn new(cfg: &BenchConfig) -> Self {
        let mut rng = stream(cfg.seed, TAG_WORLD, 0);
        let signatures = (0..cfg.n_domains)
            .map(|_| gaussian(&mut rng, cfg.d_in, cfg.signature_scale))
            .collect();
        let background = (0..cfg.n_background)
            .map(|_| gaussian(&mut rng, cfg.d_in, cfg.signature_scale))
            .collect();
        let attributes = (0..cfg.n_slots)
            .map(|_| {
                (0..cfg.vocab_size)
                    .map(|_| gaussian(&mut rng, cfg.d_in, 1.0))
                    .collect()
            })
            .collect();
        let shifts = (0..cfg.n_domains)
            .map(|_| {
                (0..cfg.detail_slots)
                    .map(|_| {
                        (0..cfg.vocab_size)
                            .map(|_| gaussian(&mut rng, cfg.detail_channels, cfg.detail_shift))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            signatures,
            background,
            attributes,
            shifts,
            detail_slots: cfg.detail_slots,
            detail_salience: cfg.detail_salience as f64,
            detail_channels: cfg.detail_channels,
        }
    }

    /// Noiseless image of `attrs` around `signature`.
    fn clean(&self, look: Appearance, signature: &[f32], attrs: &[usize]) -> Vec<f64> {
        let mut x: Vec<f64> = signature.iter().map(|&v| v as f64).collect();
        for (slot, &v) in attrs.iter().enumerate() {
            let scale = match look {
                _ if slot >= self.detail_slots => 1.0,
                Appearance::Open => continue,
                Appearance::Generic => 1.0,
                Appearance::Deployed(_) => self.detail_salience,
            };
            for (xi, &a) in x.iter_mut().zip(&self.attributes[slot][v]) {
                *xi += scale * a as f64;
            }
        }
        let open = x.len() - self.detail_channels;
        x[open..].fill(0.0);
        if let Appearance::Deployed(d) = look {
            for (slot, &v) in attrs.iter().enumerate().take(self.detail_slots) {
                for (xi, &u) in x[open..].iter_mut().zip(&self.shifts[d][slot][v]) {
                    *xi += u as f64;
                }
            }
        }
        x
    }

    fn features(
        &self,
        rng: &mut ChaCha8Rng,
        look: Appearance,
        signature: &[f32],
        attrs: &[usize],
        sigma: f32,
    ) -> Vec<f32> {
        let noise = gaussian(rng, signature.len(), sigma);
        self.clean(look, signature, attrs)
            .iter()
            .zip(&noise)
            .map(|(&a, &n)| (a + n as f64) as f32)
            .collect()
    }
}

const CAPTION_LEADS: [&str; 3] = ["a photo of", "an image showing", "a picture with"];
const QUERY_LEADS: [&str; 3] = ["find the", "show me the", "looking for the"];
const TRAIN_LEADS: [&str; 4] = ["a", "the", "this is a", "there is a"];

fn background_word(c: usize) -> String {
    format!("scene{c}")
}

/// Names every slot from `skip` on, in random order.
fn full_description(
    rng: &mut ChaCha8Rng,
    leads: &[&str],
    place: &str,
    attrs: &[usize],
    skip: usize,
) -> String {
    let mut words: Vec<String> = attrs
        .iter()
        .enumerate()
        .skip(skip)
        .map(|(s, &v)| attribute_word(s, v))
        .collect();
    words.shuffle(rng);
    format!(
        "{} {} {}",
        leads.choose(rng).expect("leads"),
        place,
        words.join(" ")
    )
}

/// Names the distinguishing slot and `caption_slots` others from `skip` on.
fn lossy_caption(
    rng: &mut ChaCha8Rng,
    cfg: &BenchConfig,
    place: &str,
    lat: &Latents,
    skip: usize,
) -> String {
    let mut others: Vec<usize> = (skip..cfg.n_slots)
        .filter(|&s| s != lat.distinguishing_slot)
        .collect();
    others.shuffle(rng);
    let mut words = vec![attribute_word(
        lat.distinguishing_slot,
        lat.attributes[lat.distinguishing_slot],
    )];
    for &s in others.iter().take(cfg.caption_slots) {
        let mut v = lat.attributes[s];
        if rng.random::<f32>() < cfg.caption_error {
            v = (v + rng.random_range(1..cfg.vocab_size.max(2))) % cfg.vocab_size;
        }
        words.push(attribute_word(s, v));
    }
    words.shuffle(rng);
    format!(
        "{} {place} {}",
        CAPTION_LEADS.choose(rng).expect("leads"),
        words.join(" ")
    )
}

fn random_tuple(rng: &mut ChaCha8Rng, cfg: &BenchConfig) -> Vec<usize> {
    (0..cfg.n_slots)
        .map(|_| rng.random_range(0..cfg.vocab_size))
        .collect()
}

fn domain_items(cfg: &BenchConfig, world: &World, d: usize) -> Vec<GenItem> {
    let mut rng = stream(cfg.seed, TAG_DOMAIN, d as u64);
    let name = domain_name(d);
    let n_groups = cfg.items_per_domain / cfg.hard_group_size;
    let mut used: HashSet<Vec<usize>> = HashSet::new();
    let mut items = Vec::with_capacity(cfg.items_per_domain);
    let width = digits(cfg.items_per_domain);
    for group in 0..n_groups {
        let (base, slot, values) = loop {
            let base = random_tuple(&mut rng, cfg);
            let slot = rng.random_range(0..cfg.detail_slots);
            let values: Vec<usize> =
                rand::seq::index::sample(&mut rng, cfg.vocab_size, cfg.hard_group_size).into_vec();
            let clash = values.iter().any(|&v| {
                let mut t = base.clone();
                t[slot] = v;
                used.contains(&t)
            });
            if !clash {
                break (base, slot, values);
            }
        };
        for v in values {
            let mut attrs = base.clone();
            attrs[slot] = v;
            used.insert(attrs.clone());
            let lat = Latents {
                domain: Some(d),
                group: Some(group),
                attributes: attrs,
                distinguishing_slot: slot,
            };
            let features = world.features(
                &mut rng,
                Appearance::Deployed(d),
                &world.signatures[d],
                &lat.attributes,
                cfg.sigma,
            );
            let caption = lossy_caption(&mut rng, cfg, &name, &lat, 0);
            let query = full_description(&mut rng, &QUERY_LEADS, &name, &lat.attributes, 0);
            items.push(GenItem {
                id: format!("{name}/{:0width$}", items.len()),
                domain: name.clone(),
                latents: lat,
                features,
                caption,
                query,
            });
        }
    }
    items
}

/// Open-domain item around a background cluster. Its image and its own
/// description carry no detail slots; a lookalike caption still names a
/// detail word and a target domain.
fn distractor(cfg: &BenchConfig, world: &World, i: usize) -> GenItem {
    let mut rng = stream(cfg.seed, TAG_DISTRACTOR, i as u64);
    let c = rng.random_range(0..cfg.n_background);
    let skip = cfg.detail_slots;
    let attrs = random_tuple(&mut rng, cfg);
    let lat = Latents {
        domain: None,
        group: None,
        distinguishing_slot: rng.random_range(skip..cfg.n_slots),
        attributes: attrs,
    };
    let features = world.features(
        &mut rng,
        Appearance::Open,
        &world.background[c],
        &lat.attributes,
        cfg.sigma,
    );
    let (place, caption) = if rng.random::<f32>() < cfg.lookalike_fraction {
        let place = domain_name(rng.random_range(0..cfg.n_domains));
        let shown = Latents {
            distinguishing_slot: rng.random_range(0..skip),
            ..lat.clone()
        };
        let caption = lossy_caption(&mut rng, cfg, &place, &shown, 0);
        (place, caption)
    } else {
        let place = background_word(c);
        let caption = lossy_caption(&mut rng, cfg, &place, &lat, skip);
        (place, caption)
    };
    let query = full_description(&mut rng, &QUERY_LEADS, &place, &lat.attributes, skip);
    GenItem {
        id: format!("{OPEN_DOMAIN}/{i:07}"),
        domain: OPEN_DOMAIN.to_string(),
        latents: lat,
        features,
        caption,
        query,
    }
}

fn train_pair(cfg: &BenchConfig, world: &World, i: usize) -> TrainPair {
    let mut rng = stream(cfg.seed, TAG_TRAIN, i as u64);
    let attrs = random_tuple(&mut rng, cfg);
    let (domain, look, signature, place, skip) = if rng.random::<f32>() < cfg.train_domain_fraction
    {
        let d = rng.random_range(0..cfg.n_domains);
        (
            domain_name(d),
            Appearance::Generic,
            &world.signatures[d],
            domain_name(d),
            0,
        )
    } else {
        let c = rng.random_range(0..cfg.n_background);
        (
            OPEN_DOMAIN.to_string(),
            Appearance::Open,
            &world.background[c],
            background_word(c),
            cfg.detail_slots,
        )
    };
    let features = world.features(&mut rng, look, signature, &attrs, cfg.sigma);
    let text = full_description(&mut rng, &TRAIN_LEADS, &place, &attrs, skip);
    TrainPair {
        domain,
        features,
        text,
    }
}

fn digits(n: usize) -> usize {
    n.max(1).to_string().len()
}

/// Generates the benchmark. Deterministic from `cfg.seed`; each part uses
/// its own random stream, so e.g. growing `n_distractors` appends
/// distractors without changing anything else.
pub fn generate(cfg: &BenchConfig) -> Result<Benchmark> {
    cfg.validate()?;
    let world = World::new(cfg);
    let mut items = Vec::with_capacity(cfg.n_domains * cfg.items_per_domain + cfg.n_distractors);
    let mut queries = Vec::with_capacity(cfg.n_domains * cfg.queries_per_domain);
    for d in 0..cfg.n_domains {
        let domain = domain_items(cfg, &world, d);
        let mut rng = stream(cfg.seed, TAG_QUERY, d as u64);
        let mut picks =
            rand::seq::index::sample(&mut rng, domain.len(), cfg.queries_per_domain).into_vec();
        picks.sort_unstable();
        let width = digits(cfg.queries_per_domain);
        for (n, p) in picks.into_iter().enumerate() {
            let item = &domain[p];
            queries.push(GenQuery {
                id: format!("{}/q{n:0width$}", item.domain),
                domain: item.domain.clone(),
                target: item.id.clone(),
                text: item.query.clone(),
            });
        }
        items.extend(domain);
    }
    items.extend((0..cfg.n_distractors).map(|i| distractor(cfg, &world, i)));
    let train = (0..cfg.train_pairs)
        .map(|i| train_pair(cfg, &world, i))
        .collect();
    Ok(Benchmark {
        config: *cfg,
        items,
        queries,
        train,
    })
}

impl Benchmark {
    pub fn manifest(&self) -> Vec<ManifestRecord> {
        self.items
            .iter()
            .map(|it| ManifestRecord::new(it.id.clone(), it.domain.clone(), it.caption.clone()))
            .collect()
    }

    pub fn features(&self) -> FeatureMatrix {
        let data = self
            .items
            .iter()
            .flat_map(|it| it.features.iter().copied())
            .collect();
        FeatureMatrix::new(self.config.d_in, data).expect("rows of d_in")
    }

    pub fn item(&self, id: &str) -> Option<&GenItem> {
        self.items.iter().find(|it| it.id == id)
    }

    pub fn domains(&self) -> Vec<String> {
        (0..self.config.n_domains).map(domain_name).collect()
    }
}

/// Latent overlap score: shared domain, shared hard group, and matching
/// attribute values each count one.
pub fn overlap(a: &Latents, b: &Latents) -> usize {
    let domain = usize::from(a.domain.is_some() && a.domain == b.domain);
    let group = usize::from(domain == 1 && a.group.is_some() && a.group == b.group);
    let attrs = a
        .attributes
        .iter()
        .zip(&b.attributes)
        .filter(|(x, y)| x == y)
        .count();
    domain + group + attrs
}

/// Ranks `pool` by latent overlap with `query`'s target, ties by ascending
/// id. Errors if the target is not among `pool`.
pub fn oracle_rank(query: &GenQuery, pool: &[GenItem]) -> Result<RankedList> {
    let target = pool
        .iter()
        .find(|it| it.id == query.target)
        .ok_or_else(|| Error::contract(format!("no latents for target `{}`", query.target)))?;
    let scored = pool
        .iter()
        .map(|it| (it.id.clone(), overlap(&target.latents, &it.latents) as f32))
        .collect();
    Ok(RankedList::from_scored(scored))
}

pub fn write_queries(w: &mut impl Write, queries: &[GenQuery]) -> Result<()> {
    for q in queries {
        write_tsv_line(w, &[&q.id, &q.domain, &q.target, &q.text])?;
    }
    Ok(())
}

pub fn read_queries(r: impl BufRead) -> Result<Vec<GenQuery>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f = parse_tsv_line(&line, 4)
            .map_err(|e| Error::Format(format!("query line {}: {e}", n + 1)))?;
        let mut f = f.into_iter();
        let mut next = || f.next().unwrap_or_default();
        out.push(GenQuery {
            id: next(),
            domain: next(),
            target: next(),
            text: next(),
        });
    }
    Ok(out)
}

/// On-disk layout of a generated benchmark.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchPaths {
    pub manifest: PathBuf,
    pub features: PathBuf,
    pub queries: PathBuf,
    pub train_texts: PathBuf,
    pub train_features: PathBuf,
}

impl BenchPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            manifest: dir.join("pool.manifest"),
            features: dir.join("pool.feat"),
            queries: dir.join("queries.tsv"),
            train_texts: dir.join("train.manifest"),
            train_features: dir.join("train.feat"),
        }
    }

    pub fn all(&self) -> [&Path; 5] {
        [
            &self.manifest,
            &self.features,
            &self.queries,
            &self.train_texts,
            &self.train_features,
        ]
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    Ok(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Writes the pool manifest and features, the query file, and the
/// pre-training pairs into `dir`, creating it if needed.
pub fn save_benchmark(bench: &Benchmark, dir: &Path) -> Result<BenchPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = BenchPaths::in_dir(dir);
    let mut w = create(&paths.manifest)?;
    write_manifest(&mut w, &bench.manifest())?;
    w.flush()?;
    let mut w = create(&paths.features)?;
    write_features(&mut w, &bench.features())?;
    w.flush()?;
    let mut w = create(&paths.queries)?;
    write_queries(&mut w, &bench.queries)?;
    w.flush()?;
    let width = digits(bench.train.len());
    let train_manifest: Vec<ManifestRecord> = bench
        .train
        .iter()
        .enumerate()
        .map(|(i, p)| {
            ManifestRecord::new(
                format!("train/{i:0width$}"),
                p.domain.clone(),
                p.text.clone(),
            )
        })
        .collect();
    let mut w = create(&paths.train_texts)?;
    write_manifest(&mut w, &train_manifest)?;
    w.flush()?;
    let data = bench
        .train
        .iter()
        .flat_map(|p| p.features.iter().copied())
        .collect();
    let mut w = create(&paths.train_features)?;
    write_features(&mut w, &FeatureMatrix::new(bench.config.d_in, data)?)?;
    w.flush()?;
    Ok(paths)
}

/// Paired pre-training data: one caption per feature row.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedData {
    pub features: FeatureMatrix,
    pub texts: Vec<String>,
}

impl PairedData {
    pub fn new(features: FeatureMatrix, texts: Vec<String>) -> Result<Self> {
        if features.len() != texts.len() {
            return Err(Error::shape(format!(
                "{} feature rows for {} texts",
                features.len(),
                texts.len()
            )));
        }
        Ok(Self { features, texts })
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }
}

impl Benchmark {
    pub fn train_data(&self) -> PairedData {
        let data = self
            .train
            .iter()
            .flat_map(|p| p.features.iter().copied())
            .collect();
        PairedData {
            features: FeatureMatrix::new(self.config.d_in, data).expect("rows of d_in"),
            texts: self.train.iter().map(|p| p.text.clone()).collect(),
        }
    }
}

pub fn load_train_data(paths: &BenchPaths) -> Result<PairedData> {
    let features = read_features(&mut open(&paths.train_features)?)?;
    let texts = read_manifest(open(&paths.train_texts)?)?
        .into_iter()
        .map(|r| r.caption)
        .collect();
    PairedData::new(features, texts)
}

pub fn load_queries(path: &Path) -> Result<Vec<GenQuery>> {
    read_queries(open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        BenchConfig {
            n_domains: 3,
            items_per_domain: 40,
            hard_group_size: 4,
            queries_per_domain: 10,
            n_distractors: 50,
            n_background: 4,
            train_pairs: 30,
            d_in: 32,
            detail_channels: 8,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn same_seed_same_benchmark() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = generate(&BenchConfig { seed: 9, ..small() }).unwrap();
        assert_ne!(generate(&small()).unwrap().items, other.items);
    }

    #[test]
    fn counts_and_ids() {
        let b = generate(&small()).unwrap();
        assert_eq!(b.items.len(), 3 * 40 + 50);
        assert_eq!(b.queries.len(), 30);
        assert_eq!(b.train.len(), 30);
        let ids: HashSet<&str> = b.items.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids.len(), b.items.len());
        for q in &b.queries {
            let t = b.item(&q.target).unwrap();
            assert_eq!(t.domain, q.domain);
            assert_eq!(t.query, q.text);
        }
    }

    #[test]
    fn noiseless_pair_differs_in_one_attribute_component() {
        let cfg = BenchConfig {
            sigma: 0.0,
            hard_group_size: 2,
            items_per_domain: 10,
            queries_per_domain: 2,
            ..small()
        };
        let b = generate(&cfg).unwrap();
        let world = World::new(&cfg);
        let open = cfg.d_in - cfg.detail_channels;
        for pair in b.items[..10].chunks(2) {
            let (x, y) = (&pair[0], &pair[1]);
            let s = x.latents.distinguishing_slot;
            let (vx, vy) = (x.latents.attributes[s], y.latents.attributes[s]);
            assert_ne!(vx, vy);
            for j in 0..cfg.d_in {
                let expected = if j < open {
                    cfg.detail_salience as f64
                        * (world.attributes[s][vx][j] as f64 - world.attributes[s][vy][j] as f64)
                } else {
                    world.shifts[0][s][vx][j - open] as f64
                        - world.shifts[0][s][vy][j - open] as f64
                };
                let got = x.features[j] as f64 - y.features[j] as f64;
                assert!((expected - got).abs() < 1e-5, "{expected} vs {got}");
            }
        }
    }

    #[test]
    fn appearances() {
        let cfg = small();
        let world = World::new(&cfg);
        let open = cfg.d_in - cfg.detail_channels;
        let sig = &world.signatures[1];
        let a = [3, 1, 4, 1];
        let b = [5, 1, 4, 1];
        assert_eq!(
            world.clean(Appearance::Open, sig, &a),
            world.clean(Appearance::Open, sig, &b)
        );
        let generic = world.clean(Appearance::Generic, sig, &a);
        assert!(generic[open..].iter().all(|&v| v == 0.0));
        assert_ne!(generic, world.clean(Appearance::Generic, sig, &b));
        let deployed = world.clean(Appearance::Deployed(1), sig, &a);
        for (j, (&g, &d)) in generic.iter().zip(&deployed).enumerate() {
            if j >= open {
                assert!((d - world.shifts[1][0][3][j - open] as f64).abs() < 1e-12);
            } else {
                let detail = world.attributes[0][3][j] as f64;
                assert!((g - d - (1.0 - cfg.detail_salience as f64) * detail).abs() < 1e-6);
            }
        }
    }

    fn names_detail(text: &str) -> bool {
        text.split(' ').any(|t| t.starts_with(SLOT_NAMES[0]))
    }

    #[test]
    fn open_domain_text_omits_details_unless_lookalike() {
        let plain = generate(&BenchConfig {
            lookalike_fraction: 0.0,
            train_pairs: 200,
            ..small()
        })
        .unwrap();
        let domains = plain.domains();
        for it in plain.items.iter().filter(|it| it.latents.domain.is_none()) {
            assert!(
                !names_detail(&it.caption) && !names_detail(&it.query),
                "{}",
                it.caption
            );
            assert!(it.latents.distinguishing_slot >= plain.config.detail_slots);
            assert!(it.caption.split(' ').any(|t| t.starts_with("scene")));
        }
        for p in &plain.train {
            assert_eq!(names_detail(&p.text), p.domain != OPEN_DOMAIN, "{}", p.text);
        }
        let look = generate(&BenchConfig {
            lookalike_fraction: 1.0,
            ..small()
        })
        .unwrap();
        for it in look.items.iter().filter(|it| it.latents.domain.is_none()) {
            assert!(names_detail(&it.caption), "{}", it.caption);
            assert!(
                it.caption
                    .split(' ')
                    .any(|t| domains.iter().any(|d| d == t)),
                "{}",
                it.caption
            );
            assert!(!names_detail(&it.query));
        }
    }

    #[test]
    fn hard_group_overlap_statistics() {
        let cfg = BenchConfig {
            n_domains: 5,
            items_per_domain: 800,
            hard_group_size: 4,
            queries_per_domain: 1,
            n_distractors: 0,
            train_pairs: 0,
            d_in: 8,
            detail_channels: 2,
            n_slots: 5,
            ..BenchConfig::default()
        };
        let b = generate(&cfg).unwrap();
        let mut groups: std::collections::BTreeMap<(usize, usize), Vec<&GenItem>> =
            Default::default();
        for it in &b.items {
            groups
                .entry((it.latents.domain.unwrap(), it.latents.group.unwrap()))
                .or_default()
                .push(it);
        }
        assert_eq!(groups.len(), 1000);
        for members in groups.values() {
            assert_eq!(members.len(), cfg.hard_group_size);
            for (i, a) in members.iter().enumerate() {
                for b in &members[i + 1..] {
                    let shared = a
                        .latents
                        .attributes
                        .iter()
                        .zip(&b.latents.attributes)
                        .filter(|(x, y)| x == y)
                        .count();
                    assert_eq!(shared, cfg.n_slots - 1);
                }
            }
        }
    }

    #[test]
    fn captions_and_queries_name_the_distinguishing_attribute() {
        let b = generate(&small()).unwrap();
        for it in b.items.iter().filter(|it| it.latents.domain.is_some()) {
            let s = it.latents.distinguishing_slot;
            let w = attribute_word(s, it.latents.attributes[s]);
            assert!(it.caption.split(' ').any(|t| t == w), "{}", it.caption);
            assert!(it.query.split(' ').any(|t| t == w), "{}", it.query);
            assert_ne!(it.caption, it.query);
        }
    }

    #[test]
    fn oracle_puts_target_first_and_sibling_second() {
        let b = generate(&BenchConfig {
            sigma: 0.0,
            ..small()
        })
        .unwrap();
        for q in &b.queries {
            let r = oracle_rank(q, &b.items).unwrap();
            assert_eq!(r.entries[0].0, q.target);
            let t = b.item(&q.target).unwrap();
            let second = b.item(&r.entries[1].0).unwrap();
            assert_eq!(second.latents.group, t.latents.group);
            assert_eq!(second.latents.domain, t.latents.domain);
        }
    }

    #[test]
    fn oracle_requires_latents() {
        let b = generate(&small()).unwrap();
        let mut q = b.queries[0].clone();
        q.target = "missing".into();
        assert!(matches!(oracle_rank(&q, &b.items), Err(Error::Contract(_))));
    }

    #[test]
    fn more_distractors_extend_the_pool() {
        let a = generate(&small()).unwrap();
        let b = generate(&BenchConfig {
            n_distractors: 80,
            ..small()
        })
        .unwrap();
        assert_eq!(&b.items[..a.items.len()], &a.items[..]);
        assert_eq!(a.queries, b.queries);
        assert_eq!(a.train, b.train);
    }

    #[test]
    fn config_errors() {
        for cfg in [
            BenchConfig {
                hard_group_size: 1,
                ..small()
            },
            BenchConfig {
                items_per_domain: 41,
                ..small()
            },
            BenchConfig {
                n_domains: 0,
                ..small()
            },
            BenchConfig {
                sigma: -1.0,
                ..small()
            },
            BenchConfig {
                detail_slots: 4,
                ..small()
            },
            BenchConfig {
                detail_channels: 32,
                ..small()
            },
            BenchConfig {
                lookalike_fraction: 1.5,
                ..small()
            },
            BenchConfig {
                hard_group_size: 9,
                vocab_size: 8,
                items_per_domain: 36,
                ..small()
            },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn files_round_trip() {
        let b = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = save_benchmark(&b, &dir.path().join("nested")).unwrap();
        assert_eq!(load_queries(&paths.queries).unwrap(), b.queries);
        assert_eq!(load_train_data(&paths).unwrap(), b.train_data());
        let manifest = read_manifest(open(&paths.manifest).unwrap()).unwrap();
        assert_eq!(manifest, b.manifest());
        assert_eq!(
            read_features(&mut open(&paths.features).unwrap()).unwrap(),
            b.features()
        );
    }
}
