//! Frozen reference-embedding providers.
//!
//! Providers hold no trainable state. Every returned vector is
//! L2-normalized, and text is NFC-normalized before hashing or lookup.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;
use xxhash_rust::xxh3::xxh3_64_with_seed;

pub const DEFAULT_HASH_DIM: usize = 64;

const BOS: char = '\u{2}';
const EOS: char = '\u{3}';

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding dimension must be >= 2, got {0}")]
    BadDimension(usize),
    #[error("hash embedding of {0:?} cancelled to the zero vector")]
    Degenerate(String),
    #[error("cache line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("cache entry {text:?} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        text: String,
        expected: usize,
        found: usize,
    },
    #[error("cache has conflicting vectors for {0:?}")]
    ConflictingDuplicate(String),
    #[error("cache entry {0:?} has a zero or non-finite vector")]
    InvalidVector(String),
    #[error("no cached embedding for {0:?}")]
    Miss(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EmbedError>;

/// A unit-norm target vector for one reference text.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEmbedding {
    pub vector: Vec<f64>,
    pub source_text: String,
}

fn nfc(text: &str) -> String {
    text.nfc().collect()
}

fn normalized(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

/// Signed feature hashing of character 3-grams (text wrapped in boundary markers).
pub fn hash_embed(text: &str, dim: usize, seed: u64) -> Result<ReferenceEmbedding> {
    if dim < 2 {
        return Err(EmbedError::BadDimension(dim));
    }
    if text.is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let text = nfc(text);
    let chars: Vec<char> = std::iter::once(BOS)
        .chain(text.chars())
        .chain(std::iter::once(EOS))
        .collect();
    let mut v = vec![0.0; dim];
    let mut buf = String::with_capacity(12);
    for gram in chars.windows(3) {
        buf.clear();
        buf.extend(gram);
        let h = xxh3_64_with_seed(buf.as_bytes(), seed);
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let vector = normalized(v).ok_or_else(|| EmbedError::Degenerate(text.clone()))?;
    Ok(ReferenceEmbedding {
        vector,
        source_text: text,
    })
}

#[derive(Deserialize, Serialize)]
struct CacheLine {
    text: String,
    vector: Vec<f64>,
}

/// Precomputed embeddings keyed by exact NFC text. Vectors are stored as read.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingCache {
    dim: Option<usize>,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, text: &str) -> Option<&[f64]> {
        self.entries.get(&nfc(text)).map(Vec::as_slice)
    }

    pub fn insert(&mut self, text: &str, vector: Vec<f64>) -> Result<()> {
        let key = nfc(text);
        if vector.iter().any(|v| !v.is_finite()) || vector.iter().all(|&v| v == 0.0) {
            return Err(EmbedError::InvalidVector(key));
        }
        match self.dim {
            Some(d) if d != vector.len() => {
                return Err(EmbedError::DimensionMismatch {
                    text: key,
                    expected: d,
                    found: vector.len(),
                })
            }
            None if vector.len() < 2 => return Err(EmbedError::BadDimension(vector.len())),
            _ => {}
        }
        if let Some(existing) = self.entries.get(&key) {
            if *existing != vector {
                return Err(EmbedError::ConflictingDuplicate(key));
            }
            return Ok(());
        }
        self.dim = Some(vector.len());
        self.entries.insert(key, vector);
        Ok(())
    }

    fn digest_into(&self, hasher: &mut Sha256) {
        for (k, v) in &self.entries {
            hasher.update((k.len() as u64).to_le_bytes());
            hasher.update(k.as_bytes());
            for x in v {
                hasher.update(x.to_bits().to_le_bytes());
            }
        }
    }
}

/// Reads a JSON-lines cache of `{"text": ..., "vector": [...]}` records.
pub fn load_cache(path: &Path) -> Result<EmbeddingCache> {
    let reader = BufReader::new(File::open(path)?);
    let mut cache = EmbeddingCache::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CacheLine =
            serde_json::from_str(&line).map_err(|e| EmbedError::MalformedLine {
                line: i + 1,
                reason: e.to_string(),
            })?;
        cache.insert(&rec.text, rec.vector)?;
    }
    Ok(cache)
}

/// Writes a cache file in the format read by [`load_cache`].
pub fn write_cache_line(text: &str, vector: &[f64]) -> String {
    serde_json::to_string(&CacheLine {
        text: text.to_string(),
        vector: vector.to_vec(),
    })
    .expect("serializable")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fallback {
    Error,
    Hash,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provider {
    Hash {
        dim: usize,
        seed: u64,
    },
    Cache {
        cache: EmbeddingCache,
        fallback: Fallback,
        dim: usize,
        hash_seed: u64,
    },
}

impl Provider {
    pub fn hash(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(EmbedError::BadDimension(dim));
        }
        Ok(Provider::Hash { dim, seed })
    }

    /// `dim` is required when the cache is empty; otherwise it must agree with the cache.
    pub fn cache(
        cache: EmbeddingCache,
        fallback: Fallback,
        dim: Option<usize>,
        hash_seed: u64,
    ) -> Result<Self> {
        let dim = match (cache.dim(), dim) {
            (Some(c), Some(d)) if c != d => {
                return Err(EmbedError::DimensionMismatch {
                    text: "<cache>".into(),
                    expected: d,
                    found: c,
                })
            }
            (Some(c), _) => c,
            (None, Some(d)) => d,
            (None, None) => return Err(EmbedError::BadDimension(0)),
        };
        if dim < 2 {
            return Err(EmbedError::BadDimension(dim));
        }
        Ok(Provider::Cache {
            cache,
            fallback,
            dim,
            hash_seed,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Provider::Hash { dim, .. } | Provider::Cache { dim, .. } => *dim,
        }
    }

    pub fn embed(&self, text: &str) -> Result<ReferenceEmbedding> {
        embed(self, text)
    }

    /// SHA-256 over every value the provider holds.
    pub fn state_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        match self {
            Provider::Hash { dim, seed } => {
                h.update(b"hash");
                h.update((*dim as u64).to_le_bytes());
                h.update(seed.to_le_bytes());
            }
            Provider::Cache {
                cache,
                fallback,
                dim,
                hash_seed,
            } => {
                h.update(b"cache");
                h.update((*dim as u64).to_le_bytes());
                h.update([*fallback as u8]);
                h.update(hash_seed.to_le_bytes());
                cache.digest_into(&mut h);
            }
        }
        h.finalize().into()
    }
}

/// Looks up or computes the frozen reference embedding for `text`.
pub fn embed(provider: &Provider, text: &str) -> Result<ReferenceEmbedding> {
    match provider {
        Provider::Hash { dim, seed } => hash_embed(text, *dim, *seed),
        Provider::Cache {
            cache,
            fallback,
            dim,
            hash_seed,
        } => {
            let key = nfc(text);
            match cache.entries.get(&key) {
                Some(v) => Ok(ReferenceEmbedding {
                    vector: normalized(v.clone())
                        .ok_or_else(|| EmbedError::InvalidVector(key.clone()))?,
                    source_text: key,
                }),
                None => match fallback {
                    Fallback::Error => Err(EmbedError::Miss(key)),
                    Fallback::Hash => hash_embed(&key, *dim, *hash_seed),
                },
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
    }

    #[test]
    fn hash_embed_is_deterministic_unit_norm() {
        let a = hash_embed("le chien dort", 64, 0).unwrap();
        let b = hash_embed("le chien dort", 64, 0).unwrap();
        assert_eq!(a, b);
        let n: f64 = a.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let chien = hash_embed("chien", 64, 0).unwrap();
        assert!((cos(&chien.vector, &chien.vector) - 1.0).abs() < 1e-12);
        assert!(matches!(hash_embed("", 64, 0), Err(EmbedError::EmptyText)));
        assert!(hash_embed("a", 1, 0).is_err());
        assert_ne!(
            hash_embed("chien", 64, 0).unwrap(),
            hash_embed("chien", 64, 1).unwrap()
        );
    }

    #[test]
    fn near_identical_strings_are_close() {
        let a = hash_embed("les enfants jouent dans la cour", 64, 0).unwrap();
        let b = hash_embed("les enfants jouent dans la cours", 64, 0).unwrap();
        assert!(cos(&a.vector, &b.vector) > 0.8);
    }

    #[test]
    fn disjoint_alphabets_are_near_orthogonal_on_average() {
        // Empirical check over 100 random pairs.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let left: Vec<char> = "abcdefghijklm".chars().collect();
        let right: Vec<char> = "nopqrstuvwxyz".chars().collect();
        let mut sum_abs = 0.0;
        let mut sum = 0.0;
        for _ in 0..100 {
            let s1: String = (0..60)
                .map(|_| left[rng.gen_range(0..left.len())])
                .collect();
            let s2: String = (0..60)
                .map(|_| right[rng.gen_range(0..right.len())])
                .collect();
            let c = cos(
                &hash_embed(&s1, DEFAULT_HASH_DIM, 0).unwrap().vector,
                &hash_embed(&s2, DEFAULT_HASH_DIM, 0).unwrap().vector,
            );
            sum += c;
            sum_abs += c.abs();
        }
        assert!((sum / 100.0).abs() < 0.05);
        assert!(sum_abs / 100.0 < 0.2);
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn cache_loading() {
        let empty = write_lines(&[]);
        let cache = load_cache(empty.path()).unwrap();
        assert!(cache.is_empty());
        assert!(cache.get("x").is_none());

        let v1 = [0.1f64, -0.25, 1.0e-3, 3.5];
        let v2 = [1.0f64, 0.0, 0.0, 0.0];
        let f = write_lines(&[&write_cache_line("un", &v1), &write_cache_line("deux", &v2)]);
        let cache = load_cache(f.path()).unwrap();
        assert_eq!(cache.dim(), Some(4));
        assert_eq!(cache.get("un").unwrap(), &v1);
        assert_eq!(cache.get("deux").unwrap(), &v2);

        let f = write_lines(&[
            r#"{"text":"a","vector":[1,0,0,0]}"#,
            r#"{"text":"b","vector":[1,0,0]}"#,
        ]);
        match load_cache(f.path()) {
            Err(EmbedError::DimensionMismatch { text, .. }) => assert_eq!(text, "b"),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_lines(&[
            r#"{"text":"a","vector":[1,0]}"#,
            r#"{"text":"a","vector":[0,1]}"#,
        ]);
        assert!(matches!(
            load_cache(f.path()),
            Err(EmbedError::ConflictingDuplicate(_))
        ));
        let f = write_lines(&[
            r#"{"text":"a","vector":[1,0]}"#,
            r#"{"text":"a","vector":[1,0]}"#,
        ]);
        assert_eq!(load_cache(f.path()).unwrap().len(), 1);
        let f = write_lines(&["not json"]);
        assert!(matches!(
            load_cache(f.path()),
            Err(EmbedError::MalformedLine { line: 1, .. })
        ));
    }

    #[test]
    fn lookup_uses_nfc() {
        let mut cache = EmbeddingCache::default();
        // "é" as e + combining acute
        cache.insert("cafe\u{301}", vec![1.0, 0.0]).unwrap();
        assert!(cache.get("caf\u{e9}").is_some());
    }

    #[test]
    fn provider_fallbacks() {
        let mut cache = EmbeddingCache::default();
        cache.insert("chien", vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let strict = Provider::cache(cache.clone(), Fallback::Error, None, 0).unwrap();
        let hit = strict.embed("chien").unwrap();
        assert_eq!(hit.vector, vec![0.6, 0.8, 0.0, 0.0]);
        match strict.embed("chat") {
            Err(EmbedError::Miss(t)) => assert_eq!(t, "chat"),
            other => panic!("unexpected {other:?}"),
        }
        let lenient = Provider::cache(cache.clone(), Fallback::Hash, None, 5).unwrap();
        assert_eq!(
            lenient.embed("chat").unwrap(),
            hash_embed("chat", 4, 5).unwrap()
        );
        assert!(Provider::cache(cache, Fallback::Hash, Some(8), 0).is_err());
        assert!(Provider::cache(EmbeddingCache::default(), Fallback::Hash, None, 0).is_err());
    }

    #[test]
    fn embedding_does_not_change_provider_state() {
        let mut cache = EmbeddingCache::default();
        cache.insert("chien", vec![3.0, 4.0]).unwrap();
        let p = Provider::cache(cache, Fallback::Hash, None, 0).unwrap();
        let before = p.state_digest();
        for t in ["chien", "chat", "oiseau"] {
            p.embed(t).unwrap();
        }
        assert_eq!(before, p.state_digest());
        assert_ne!(before, Provider::hash(2, 0).unwrap().state_digest());
    }
}
