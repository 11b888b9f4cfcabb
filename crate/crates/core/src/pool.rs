//! The cached retrieval pool: unit-norm image embeddings, a manifest with
//! cached captions, optional raw image features, and exact cosine top-k.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{dot, l2_normalized, norm};

const POOL_MAGIC: &[u8; 8] = b"EFSAPOOL";
const FEAT_MAGIC: &[u8; 8] = b"EFSAFEAT";
const FORMAT_VERSION: u32 = 1;

/// Rows scanned per top-k work unit.
pub const SCAN_CHUNK: usize = 4096;

/// Rows whose norm is within this of 1 are stored as given.
const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub domain: String,
    pub caption: String,
}

impl ManifestRecord {
    pub fn new(
        id: impl Into<String>,
        domain: impl Into<String>,
        caption: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            domain: domain.into(),
            caption: caption.into(),
        }
    }
}

/// Row-major `count × dim` f32 matrix, used for raw image features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 && !data.is_empty() || dim > 0 && !data.len().is_multiple_of(dim) {
            return Err(Error::shape(format!(
                "{} values do not tile rows of {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Immutable retrieval pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolStore {
    dim: usize,
    embeddings: Vec<f32>,
    manifest: Vec<ManifestRecord>,
    index: HashMap<String, usize>,
    features: Option<FeatureMatrix>,
}

impl PoolStore {
    /// Validates and ingests rows. Rows that are not already unit-norm are
    /// normalized; unit rows are kept bit-for-bit.
    pub fn new(dim: usize, embeddings: Vec<f32>, manifest: Vec<ManifestRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::shape("embedding dimension must be positive"));
        }
        if embeddings.len() != manifest.len() * dim {
            return Err(Error::shape(format!(
                "{} embedding values for {} manifest rows of dimension {dim}",
                embeddings.len(),
                manifest.len()
            )));
        }
        let mut embeddings = embeddings;
        for (i, row) in embeddings.chunks_mut(dim).enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                let unit =
                    l2_normalized(row).map_err(|e| Error::Ingest(format!("row {i}: {e}")))?;
                row.copy_from_slice(&unit);
            }
        }
        Self::from_parts(dim, embeddings, manifest)
    }

    fn from_parts(dim: usize, embeddings: Vec<f32>, manifest: Vec<ManifestRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(manifest.len());
        for (i, rec) in manifest.iter().enumerate() {
            if index.insert(rec.id.clone(), i).is_some() {
                return Err(Error::Ingest(format!("duplicate id `{}`", rec.id)));
            }
        }
        Ok(Self {
            dim,
            embeddings,
            manifest,
            index,
            features: None,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self::from_parts(dim, Vec::new(), Vec::new()).expect("empty pool")
    }

    /// Attaches raw image features, one row per pool row.
    pub fn with_features(mut self, features: FeatureMatrix) -> Result<Self> {
        if features.len() != self.len() {
            return Err(Error::shape(format!(
                "{} feature rows for {} pool rows",
                features.len(),
                self.len()
            )));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn embedding(&self, row: usize) -> &[f32] {
        &self.embeddings[row * self.dim..(row + 1) * self.dim]
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn manifest(&self) -> &[ManifestRecord] {
        &self.manifest
    }

    pub fn record(&self, row: usize) -> &ManifestRecord {
        &self.manifest[row]
    }

    pub fn row_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::Lookup(id.to_string()))
    }

    pub fn features(&self) -> Option<&FeatureMatrix> {
        self.features.as_ref()
    }

    /// Rows belonging to `domain`, in pool order.
    pub fn domain_rows(&self, domain: &str) -> Vec<usize> {
        (0..self.len())
            .filter(|&r| self.manifest[r].domain == domain)
            .collect()
    }

    /// Distinct domains in first-appearance order.
    pub fn domains(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for rec in &self.manifest {
            if !seen.iter().any(|d| d == &rec.domain) {
                seen.push(rec.domain.clone());
            }
        }
        seen
    }

    /// Restricts the pool to `rows`, keeping features.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let mut emb = Vec::with_capacity(rows.len() * self.dim);
        let mut man = Vec::with_capacity(rows.len());
        for &r in rows {
            emb.extend_from_slice(self.embedding(r));
            man.push(self.manifest[r].clone());
        }
        let mut out = Self::from_parts(self.dim, emb, man)?;
        if let Some(f) = &self.features {
            let mut data = Vec::with_capacity(rows.len() * f.dim());
            for &r in rows {
                data.extend_from_slice(f.row(r));
            }
            out.features = Some(FeatureMatrix::new(f.dim(), data)?);
        }
        Ok(out)
    }
}

/// Ranked `(id, score)` pairs: descending score, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedList {
    pub entries: Vec<(String, f32)>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    /// 1-based rank of `id`, if present.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.entries
            .iter()
            .position(|(i, _)| i == id)
            .map(|p| p + 1)
    }

    pub fn truncated(&self, k: usize) -> Self {
        Self {
            entries: self.entries.iter().take(k).cloned().collect(),
        }
    }

    /// Sorts `(id, score)` pairs into ranking order.
    pub fn from_scored(mut entries: Vec<(String, f32)>) -> Self {
        entries.sort_by(|a, b| rank_order(a.1, &a.0, b.1, &b.0));
        Self { entries }
    }
}

/// `Less` when `(sa, ia)` ranks ahead of `(sb, ib)`.
pub fn rank_order(sa: f32, ia: &str, sb: f32, ib: &str) -> Ordering {
    sb.total_cmp(&sa).then_with(|| ia.cmp(ib))
}

/// Dot product of unit vectors, i.e. their cosine similarity.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f32> {
    if u.len() != v.len() {
        return Err(Error::shape(format!(
            "cosine of {}-d and {}-d vectors",
            u.len(),
            v.len()
        )));
    }
    Ok(dot(u, v) as f32)
}

#[derive(Debug, Clone, Copy)]
struct Candidate<'a> {
    score: f32,
    id: &'a str,
    row: usize,
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate<'_> {}
impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate<'_> {
    // Worse candidates compare greater so a max-heap keeps the worst on top.
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(self.score, self.id, other.score, other.id)
    }
}

fn scan_chunk<'a>(
    store: &'a PoolStore,
    q: &[f32],
    rows: std::ops::Range<usize>,
    k: usize,
) -> Vec<Candidate<'a>> {
    let mut heap: BinaryHeap<Candidate<'a>> = BinaryHeap::with_capacity(k + 1);
    for row in rows {
        let cand = Candidate {
            score: dot(q, store.embedding(row)) as f32,
            id: &store.manifest[row].id,
            row,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if let Some(worst) = heap.peek() {
            if cand < *worst {
                heap.pop();
                heap.push(cand);
            }
        }
    }
    heap.into_vec()
}

/// Exact top-`k` by cosine. Chunks are scanned in parallel into bounded
/// heaps and merged under the total ranking order, so the result does not
/// depend on the thread count. Returns all rows when `k > len`.
pub fn top_k(store: &PoolStore, q: &[f32], k: usize) -> Result<RankedList> {
    Ok(to_ranked(store, top_k_rows(store, q, k)?))
}

/// [`top_k`] returning `(row, score)` pairs.
pub fn top_k_rows(store: &PoolStore, q: &[f32], k: usize) -> Result<Vec<(usize, f32)>> {
    if store.is_empty() {
        return Err(Error::contract("top-k over an empty pool"));
    }
    if k == 0 {
        return Err(Error::contract("top-k needs k >= 1"));
    }
    if q.len() != store.dim() {
        return Err(Error::shape(format!(
            "query dimension {} vs pool dimension {}",
            q.len(),
            store.dim()
        )));
    }
    let n = store.len();
    let k = k.min(n);
    let chunks: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(SCAN_CHUNK)
        .map(|s| s..(s + SCAN_CHUNK).min(n))
        .collect();
    let mut merged: Vec<Candidate<'_>> = chunks
        .into_par_iter()
        .map(|range| scan_chunk(store, q, range, k))
        .flatten()
        .collect();
    merged.sort();
    merged.truncate(k);
    Ok(merged.into_iter().map(|c| (c.row, c.score)).collect())
}

fn to_ranked(store: &PoolStore, rows: Vec<(usize, f32)>) -> RankedList {
    RankedList {
        entries: rows
            .into_iter()
            .map(|(r, s)| (store.manifest[r].id.clone(), s))
            .collect(),
    }
}

/// Cached captions for `ids`, in the given order.
pub fn captions_for<S: AsRef<str>>(store: &PoolStore, ids: &[S]) -> Result<Vec<String>> {
    ids.iter()
        .map(|id| {
            let row = store.row_of(id.as_ref())?;
            Ok(store.manifest[row].caption.clone())
        })
        .collect()
}

/// Concatenates pools. Each id is prefixed with `"{domain}/"` unless it
/// already carries that prefix. Features survive only if every input has
/// them with a common dimension.
pub fn mix_pools(stores: &[PoolStore]) -> Result<PoolStore> {
    let Some(first) = stores.first() else {
        return Err(Error::contract("mixing zero pools"));
    };
    let dim = first.dim();
    let mut emb = Vec::new();
    let mut man = Vec::new();
    for s in stores {
        if s.dim() != dim {
            return Err(Error::shape(format!(
                "mixing {}-d pool into {dim}-d pool",
                s.dim()
            )));
        }
        emb.extend_from_slice(s.embeddings());
        for rec in s.manifest() {
            let prefix = format!("{}/", rec.domain);
            let id = if rec.id.starts_with(&prefix) {
                rec.id.clone()
            } else {
                format!("{prefix}{}", rec.id)
            };
            man.push(ManifestRecord {
                id,
                domain: rec.domain.clone(),
                caption: rec.caption.clone(),
            });
        }
    }
    let mut out = PoolStore::from_parts(dim, emb, man)?;
    let feature_dim = first.features().map(FeatureMatrix::dim);
    if let Some(fd) = feature_dim {
        if stores
            .iter()
            .all(|s| s.features().is_some_and(|f| f.dim() == fd))
        {
            let data = stores
                .iter()
                .flat_map(|s| s.features().expect("checked").data().iter().copied())
                .collect();
            out.features = Some(FeatureMatrix::new(fd, data)?);
        }
    }
    Ok(out)
}

fn write_matrix(w: &mut impl Write, magic: &[u8; 8], dim: usize, data: &[f32]) -> Result<()> {
    let count = if dim == 0 { 0 } else { data.len() / dim };
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(count as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_matrix(r: &mut impl Read, magic: &[u8; 8]) -> Result<(usize, Vec<f32>)> {
    let mut head = [0u8; 24];
    r.read_exact(&mut head)?;
    if &head[..8] != magic {
        return Err(Error::Format(format!(
            "bad magic, expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(head[12..16].try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(head[16..24].try_into().expect("8 bytes")) as usize;
    let mut bytes = vec![0u8; count * dim * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dim, data))
}

pub fn write_embeddings(w: &mut impl Write, store: &PoolStore) -> Result<()> {
    write_matrix(w, POOL_MAGIC, store.dim(), store.embeddings())
}

pub fn write_features(w: &mut impl Write, features: &FeatureMatrix) -> Result<()> {
    write_matrix(w, FEAT_MAGIC, features.dim(), features.data())
}

pub fn read_features(r: &mut impl Read) -> Result<FeatureMatrix> {
    let (dim, data) = read_matrix(r, FEAT_MAGIC)?;
    FeatureMatrix::new(dim, data)
}

fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_field(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(Error::Format(format!(
                    "bad escape `\\{}`",
                    other.unwrap_or(' ')
                )))
            }
        }
    }
    Ok(out)
}

/// Writes tab-separated `fields` as one line with `\t`, `\n`, `\r` and `\\`
/// escaped.
pub fn write_tsv_line(w: &mut impl Write, fields: &[&str]) -> Result<()> {
    let line: Vec<String> = fields.iter().map(|f| escape_field(f)).collect();
    writeln!(w, "{}", line.join("\t"))?;
    Ok(())
}

/// Splits and unescapes one TSV line into exactly `n` fields.
pub fn parse_tsv_line(line: &str, n: usize) -> Result<Vec<String>> {
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != n {
        return Err(Error::Format(format!(
            "expected {n} tab-separated fields, got {}",
            parts.len()
        )));
    }
    parts.into_iter().map(unescape_field).collect()
}

pub fn write_manifest(w: &mut impl Write, manifest: &[ManifestRecord]) -> Result<()> {
    for rec in manifest {
        write_tsv_line(w, &[&rec.id, &rec.domain, &rec.caption])?;
    }
    Ok(())
}

pub fn read_manifest(r: impl BufRead) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let f = parse_tsv_line(&line, 3)
            .map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))?;
        let mut it = f.into_iter();
        let (id, domain, caption) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        out.push(ManifestRecord {
            id,
            domain,
            caption,
        });
    }
    Ok(out)
}

/// Writes `<stem>.pool` and `<stem>.manifest` (and `<stem>.feat` when the
/// pool carries features).
pub fn build_store(
    dim: usize,
    embeddings: Vec<f32>,
    manifest: Vec<ManifestRecord>,
    stem: &Path,
) -> Result<PoolStore> {
    let store = PoolStore::new(dim, embeddings, manifest)?;
    save_store(&store, stem)?;
    Ok(store)
}

pub fn store_paths(stem: &Path) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    let with = |ext: &str| {
        let mut p = stem.as_os_str().to_owned();
        p.push(ext);
        std::path::PathBuf::from(p)
    };
    (with(".pool"), with(".manifest"), with(".feat"))
}

pub fn save_store(store: &PoolStore, stem: &Path) -> Result<()> {
    let (pool, manifest, feat) = store_paths(stem);
    if let Some(dir) = pool.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(&pool)?);
    write_embeddings(&mut w, store)?;
    w.flush()?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(&manifest)?);
    write_manifest(&mut w, store.manifest())?;
    w.flush()?;
    if let Some(f) = store.features() {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&feat)?);
        write_features(&mut w, f)?;
        w.flush()?;
    }
    Ok(())
}

/// Loads a store written by [`save_store`]. Rows are taken as stored.
pub fn load_store(stem: &Path) -> Result<PoolStore> {
    let (pool, manifest, feat) = store_paths(stem);
    let (dim, data) = read_matrix(
        &mut std::io::BufReader::new(std::fs::File::open(&pool)?),
        POOL_MAGIC,
    )?;
    let man = read_manifest(std::io::BufReader::new(std::fs::File::open(&manifest)?))?;
    if data.len() != man.len() * dim {
        return Err(Error::Format(format!(
            "{} has {} rows but manifest has {}",
            pool.display(),
            data.len() / dim.max(1),
            man.len()
        )));
    }
    let mut store = PoolStore::from_parts(dim.max(1), data, man)?;
    store.dim = dim;
    if feat.exists() {
        let f = read_features(&mut std::io::BufReader::new(std::fs::File::open(&feat)?))?;
        store = store.with_features(f)?;
    }
    Ok(store)
}

/// Embedding versus caption storage for a cached pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StorageReport {
    pub pool_size: u64,
    pub embedding_bytes_per_image: u64,
    pub caption_bytes_per_image: u64,
    pub embedding_bytes: u64,
    pub caption_bytes: u64,
    /// caption bytes / embedding bytes
    pub overhead: f64,
}

pub fn storage_report(
    pool_size: u64,
    d_e: u64,
    bytes_per_scalar: u64,
    avg_caption_tokens: u64,
    bytes_per_token: u64,
) -> Result<StorageReport> {
    if [
        pool_size,
        d_e,
        bytes_per_scalar,
        avg_caption_tokens,
        bytes_per_token,
    ]
    .contains(&0)
    {
        return Err(Error::config("storage report inputs must be positive"));
    }
    let emb = d_e * bytes_per_scalar;
    let cap = avg_caption_tokens * bytes_per_token;
    Ok(StorageReport {
        pool_size,
        embedding_bytes_per_image: emb,
        caption_bytes_per_image: cap,
        embedding_bytes: emb * pool_size,
        caption_bytes: cap * pool_size,
        overhead: cap as f64 / emb as f64,
    })
}

impl fmt::Display for StorageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pool_size={}", self.pool_size)?;
        writeln!(
            f,
            "embedding_bytes_per_image={}",
            self.embedding_bytes_per_image
        )?;
        writeln!(
            f,
            "caption_bytes_per_image={}",
            self.caption_bytes_per_image
        )?;
        writeln!(f, "embedding_bytes_total={}", self.embedding_bytes)?;
        writeln!(f, "caption_bytes_total={}", self.caption_bytes)?;
        writeln!(
            f,
            "relative_overhead={} (≈ {:.0}%)",
            self.overhead,
            self.overhead * 100.0
        )
    }
}
