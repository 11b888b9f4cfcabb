//! Raw encoder inputs: image feature vectors and hashed bag-of-words text.

use crate::tensor::{norm, EPS_NORM};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    ImageSynthetic,
    TextHashed,
    /// An externally computed embedding; encoders only normalize it.
    Imported,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f32>,
    pub source: FeatureSource,
}

impl FeatureVector {
    pub fn new(values: Vec<f32>, source: FeatureSource) -> Self {
        Self { values, source }
    }

    pub fn image(values: Vec<f32>) -> Self {
        Self::new(values, FeatureSource::ImageSynthetic)
    }

    pub fn imported(values: Vec<f32>) -> Self {
        Self::new(values, FeatureSource::Imported)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// True when the vector carries no direction (e.g. text with no tokens).
    pub fn is_degenerate(&self) -> bool {
        !(norm(&self.values) > EPS_NORM)
    }
}

/// Lowercased alphanumeric runs of `text`.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Hashes each token into one of `d_in` buckets, counts, and
/// l2-normalizes. Text without tokens yields the zero vector.
pub fn featurize_text(text: &str, d_in: usize) -> FeatureVector {
    assert!(d_in >= 1, "feature dimension must be positive");
    let mut counts = vec![0.0f64; d_in];
    for tok in tokenize(text) {
        let bucket = (fnv1a64(tok.as_bytes()) % d_in as u64) as usize;
        counts[bucket] += 1.0;
    }
    let mut sq = 0.0f64;
    for c in &counts {
        sq += c * c;
    }
    let values = if sq > 0.0 {
        let n = sq.sqrt();
        counts.iter().map(|&c| (c / n) as f32).collect()
    } else {
        vec![0.0; d_in]
    };
    FeatureVector::new(values, FeatureSource::TextHashed)
}
