//! Utterances, manifests, character vocabularies and the seeded toy corpus.
//!
//! Feature files use a small little-endian container:
//!
//! ```text
//! b"LAUF" | T: u32 | F: u32 | T*F f32 values, row-major
//! ```
//!
//! Manifests are JSON-lines, one [`ManifestRecord`] per line, with feature
//! paths relative to the manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FEATURE_MAGIC: &[u8; 4] = b"LAUF";
pub const BLANK_SYMBOL: &str = "<blank>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty manifest")]
    EmptyManifest,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("manifest line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("feature dimension mismatch: '{first_id}' has F={first_dim}, '{other_id}' has F={other_dim}")]
    FeatureDimMismatch {
        first_id: String,
        first_dim: usize,
        other_id: String,
        other_dim: usize,
    },
    #[error("missing feature file {}", .0.display())]
    MissingFeatureFile(PathBuf),
    #[error("invalid feature file {}: {reason}", path.display())]
    BadFeatureFile { path: PathBuf, reason: String },
    #[error("invalid utterance '{id}': {reason}")]
    InvalidUtterance { id: String, reason: String },
    #[error("duplicate utterance id '{0}'")]
    DuplicateId(String),
    #[error("character {ch:?} at position {position} is not in the vocabulary")]
    OutOfVocabulary { ch: char, position: usize },
    #[error("token index {0} is out of range")]
    BadIndex(usize),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("invalid toy corpus spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// One speech/translation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// T x F normalized feature frames.
    pub features: Array2<f32>,
    pub transcription: Option<String>,
    pub translation: String,
    pub topic: Option<String>,
}

impl Utterance {
    pub fn new(
        id: impl Into<String>,
        features: Array2<f32>,
        transcription: Option<String>,
        translation: impl Into<String>,
        topic: Option<String>,
    ) -> Result<Self> {
        let utt = Self {
            id: id.into(),
            features,
            transcription,
            translation: translation.into(),
            topic,
        };
        utt.validate()?;
        Ok(utt)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: &str| CorpusError::InvalidUtterance {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.features.nrows() == 0 || self.features.ncols() == 0 {
            return Err(invalid("feature matrix must be at least 1x1"));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite feature value"));
        }
        if self.translation.trim().is_empty() {
            return Err(invalid("empty translation"));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }
}

/// An ordered, immutable collection of utterances sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    utterances: Vec<Utterance>,
    feature_dim: usize,
}

impl Corpus {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        let first = utterances.first().ok_or(CorpusError::EmptyCorpus)?;
        let feature_dim = first.feature_dim();
        let mut seen = HashSet::new();
        for utt in &utterances {
            utt.validate()?;
            if utt.feature_dim() != feature_dim {
                return Err(CorpusError::FeatureDimMismatch {
                    first_id: first.id.clone(),
                    first_dim: feature_dim,
                    other_id: utt.id.clone(),
                    other_dim: utt.feature_dim(),
                });
            }
            if !seen.insert(utt.id.as_str()) {
                return Err(CorpusError::DuplicateId(utt.id.clone()));
            }
        }
        Ok(Self {
            utterances,
            feature_dim,
        })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    /// Distinct topic labels in first-seen order. `None` if any utterance lacks a topic.
    pub fn topics(&self) -> Option<Vec<String>> {
        let mut out: Vec<String> = Vec::new();
        for utt in &self.utterances {
            let topic = utt.topic.as_ref()?;
            if !out.contains(topic) {
                out.push(topic.clone());
            }
        }
        Some(out)
    }

    /// Deterministic split: every `every`-th utterance (1-based) goes to the held-out part.
    ///
    /// Returns `(kept, held_out)`. `every < 2` keeps everything and the held-out part is `None`.
    pub fn split_holdout(&self, every: usize) -> Result<(Corpus, Option<Corpus>)> {
        if every < 2 {
            return Ok((self.clone(), None));
        }
        let (held, kept): (Vec<_>, Vec<_>) = self
            .utterances
            .iter()
            .cloned()
            .enumerate()
            .partition(|(i, _)| i % every == every - 1);
        let kept = Corpus::new(kept.into_iter().map(|(_, u)| u).collect())?;
        let held: Vec<_> = held.into_iter().map(|(_, u)| u).collect();
        let held = if held.is_empty() {
            None
        } else {
            Some(Corpus::new(held)?)
        };
        Ok((kept, held))
    }
}

/// Character vocabulary with a single blank symbol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    blank_index: usize,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, blank_index: usize) -> Result<Self> {
        if blank_index >= tokens.len() {
            return Err(CorpusError::InvalidVocabulary(format!(
                "blank index {blank_index} out of range for {} tokens",
                tokens.len()
            )));
        }
        if tokens[blank_index] != BLANK_SYMBOL {
            return Err(CorpusError::InvalidVocabulary(format!(
                "token at blank index is {:?}",
                tokens[blank_index]
            )));
        }
        let mut seen = HashSet::new();
        for (i, tok) in tokens.iter().enumerate() {
            if !seen.insert(tok.as_str()) {
                return Err(CorpusError::InvalidVocabulary(format!(
                    "duplicate token {tok:?}"
                )));
            }
            if i != blank_index && tok.chars().count() != 1 {
                return Err(CorpusError::InvalidVocabulary(format!(
                    "token {tok:?} is not a single character"
                )));
            }
        }
        Ok(Self {
            tokens,
            blank_index,
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn blank_index(&self) -> usize {
        self.blank_index
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, ch: char) -> Option<usize> {
        let mut buf = [0u8; 4];
        let s: &str = ch.encode_utf8(&mut buf);
        self.tokens
            .iter()
            .enumerate()
            .find(|(i, t)| *i != self.blank_index && t.as_str() == s)
            .map(|(i, _)| i)
    }

    /// Maps a non-blank index back to its character.
    pub fn symbol(&self, index: usize) -> Option<char> {
        if index == self.blank_index {
            return None;
        }
        self.tokens.get(index).and_then(|t| t.chars().next())
    }

    pub fn covers(&self, text: &str) -> bool {
        text.chars().all(|c| self.index_of(c).is_some())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        encode_text(self, text)
    }

    pub fn decode(&self, indices: &[usize]) -> Result<String> {
        indices
            .iter()
            .map(|&i| self.symbol(i).ok_or(CorpusError::BadIndex(i)))
            .collect()
    }
}

/// Blank plus every distinct translation character, sorted by code point.
pub fn build_vocab(corpus: &Corpus) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let chars: BTreeSet<char> = corpus
        .utterances()
        .iter()
        .flat_map(|u| u.translation.chars())
        .collect();
    let mut tokens = vec![BLANK_SYMBOL.to_string()];
    tokens.extend(chars.into_iter().map(String::from));
    Vocabulary::new(tokens, 0)
}

pub fn encode_text(vocab: &Vocabulary, text: &str) -> Result<Vec<usize>> {
    text.chars()
        .enumerate()
        .map(|(position, ch)| {
            vocab
                .index_of(ch)
                .ok_or(CorpusError::OutOfVocabulary { ch, position })
        })
        .collect()
}

/// One line of a JSON-lines manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub features: String,
    pub transcription: Option<String>,
    pub translation: String,
    pub topic: Option<String>,
}

pub fn read_features(path: &Path) -> Result<Array2<f32>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CorpusError::MissingFeatureFile(path.to_path_buf()),
        _ => CorpusError::Io(e),
    })?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes)?;
    decode_features(&bytes).map_err(|reason| CorpusError::BadFeatureFile {
        path: path.to_path_buf(),
        reason,
    })
}

fn decode_features(bytes: &[u8]) -> std::result::Result<Array2<f32>, String> {
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err("missing LAUF header".into());
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != t * f * 4 {
        return Err(format!(
            "expected {} payload bytes for {t}x{f}, found {}",
            t * f * 4,
            body.len()
        ));
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((t, f), values).map_err(|e| e.to_string())
}

pub fn write_features(path: &Path, features: &Array2<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(features.nrows() as u32).to_le_bytes())?;
    w.write_all(&(features.ncols() as u32).to_le_bytes())?;
    for v in features.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Corpus> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let reader = BufReader::new(File::open(path)?);
    let mut utterances: Vec<Utterance> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
                line: line_no,
                reason: e.to_string(),
            })?;
        let features = read_features(&base.join(&record.features))?;
        if let Some(prev) = utterances.last() {
            if prev.feature_dim() != features.ncols() {
                return Err(CorpusError::FeatureDimMismatch {
                    first_id: prev.id.clone(),
                    first_dim: prev.feature_dim(),
                    other_id: record.id,
                    other_dim: features.ncols(),
                });
            }
        }
        let utt = Utterance::new(
            record.id,
            features,
            record.transcription,
            record.translation,
            record.topic,
        )
        .map_err(|e| CorpusError::MalformedLine {
            line: line_no,
            reason: e.to_string(),
        })?;
        utterances.push(utt);
    }
    if utterances.is_empty() {
        return Err(CorpusError::EmptyManifest);
    }
    Corpus::new(utterances)
}

/// Writes `manifest_name` into `dir` and one feature file per utterance under `dir/features/`.
pub fn write_manifest(corpus: &Corpus, dir: &Path, manifest_name: &str) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir)?;
    let manifest_path = dir.join(manifest_name);
    let mut w = BufWriter::new(File::create(&manifest_path)?);
    for utt in corpus.utterances() {
        let rel = format!("features/{}.lauf", utt.id);
        write_features(&dir.join(&rel), &utt.features)?;
        let record = ManifestRecord {
            id: utt.id.clone(),
            features: rel,
            transcription: utt.transcription.clone(),
            translation: utt.translation.clone(),
            topic: utt.topic.clone(),
        };
        serde_json::to_writer(&mut w, &record).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(manifest_path)
}

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyCorpusSpec {
    pub n_utterances: usize,
    pub n_topics: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub frames_per_token: usize,
    pub noise_scale: f64,
    /// Probability of swapping a translation for a same-topic paraphrase.
    #[serde(default)]
    pub paraphrase_prob: f64,
    #[serde(default = "default_words_per_topic")]
    pub words_per_topic: usize,
    #[serde(default = "default_words_per_sentence")]
    pub words_per_sentence: (usize, usize),
}

fn default_words_per_topic() -> usize {
    6
}

fn default_words_per_sentence() -> (usize, usize) {
    (2, 4)
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            n_utterances: 100,
            n_topics: 3,
            feature_dim: 16,
            seed: 7,
            frames_per_token: 4,
            noise_scale: 0.1,
            paraphrase_prob: 0.0,
            words_per_topic: default_words_per_topic(),
            words_per_sentence: default_words_per_sentence(),
        }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CorpusError::InvalidSpec(m.to_string()));
        if self.n_utterances == 0 {
            return bad("n_utterances must be >= 1");
        }
        if self.n_topics < 2 {
            return bad("n_topics must be >= 2");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1");
        }
        if self.frames_per_token == 0 {
            return bad("frames_per_token must be >= 1");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.paraphrase_prob) {
            return bad("paraphrase_prob must be in [0, 1]");
        }
        if self.words_per_topic == 0 {
            return bad("words_per_topic must be >= 1");
        }
        let (lo, hi) = self.words_per_sentence;
        if lo == 0 || lo > hi {
            return bad("words_per_sentence must satisfy 1 <= min <= max");
        }
        Ok(())
    }
}

const TOY_ALPHABET: &[char] = &[
    'a', 'b', 'd', 'e', 'i', 'k', 'l', 'm', 'n', 'o', 'r', 's', 't', 'u',
];

/// Seeded prototypes and per-topic word inventories shared by every toy utterance.
#[derive(Debug, Clone)]
pub struct ToyLexicon {
    pub prototypes: BTreeMap<char, Vec<f32>>,
    pub inventories: Vec<Vec<String>>,
}

impl ToyLexicon {
    pub fn new(spec: &ToyCorpusSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut prototypes = BTreeMap::new();
        for &ch in TOY_ALPHABET.iter().chain(std::iter::once(&' ')) {
            let v: Vec<f32> = (0..spec.feature_dim)
                .map(|_| rng.gen_range(-1.0f32..1.0))
                .collect();
            prototypes.insert(ch, v);
        }
        let mut used = HashSet::new();
        let inventories = (0..spec.n_topics)
            .map(|_| {
                let mut words = Vec::with_capacity(spec.words_per_topic);
                while words.len() < spec.words_per_topic {
                    let len = rng.gen_range(3..=6);
                    let w: String = (0..len)
                        .map(|_| *TOY_ALPHABET.choose(&mut rng).unwrap())
                        .collect();
                    if used.insert(w.clone()) {
                        words.push(w);
                    }
                }
                words
            })
            .collect();
        Self {
            prototypes,
            inventories,
        }
    }

    pub fn topic_name(topic: usize) -> String {
        format!("topic{topic}")
    }

    fn sentence(&self, topic: usize, spec: &ToyCorpusSpec, rng: &mut ChaCha8Rng) -> String {
        let (lo, hi) = spec.words_per_sentence;
        let n = rng.gen_range(lo..=hi);
        let inv = &self.inventories[topic];
        (0..n)
            .map(|_| inv.choose(rng).unwrap().as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Prototype frames for `text`, each character repeated `frames_per_token` times.
    pub fn clean_features(&self, text: &str, frames_per_token: usize) -> Array2<f32> {
        let dim = self.prototypes.values().next().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(text.chars().count() * frames_per_token * dim);
        for ch in text.chars() {
            let proto = &self.prototypes[&ch];
            for _ in 0..frames_per_token {
                data.extend_from_slice(proto);
            }
        }
        Array2::from_shape_vec((data.len() / dim.max(1), dim), data).unwrap()
    }
}

/// Deterministic synthetic corpus; topics are assigned round-robin.
pub fn generate_toy_corpus(spec: &ToyCorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let lexicon = ToyLexicon::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut utterances = Vec::with_capacity(spec.n_utterances);
    for i in 0..spec.n_utterances {
        let topic = i % spec.n_topics;
        let transcription = lexicon.sentence(topic, spec, &mut rng);
        // The acoustics always follow the spoken sentence; a paraphrased
        // translation is a noisy label for the same audio.
        let translation = if spec.paraphrase_prob > 0.0 && rng.gen_bool(spec.paraphrase_prob) {
            lexicon.sentence(topic, spec, &mut rng)
        } else {
            transcription.clone()
        };
        let mut features = lexicon.clean_features(&transcription, spec.frames_per_token);
        if spec.noise_scale > 0.0 {
            for v in features.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v = (*v as f64 + spec.noise_scale * n) as f32;
            }
        }
        utterances.push(Utterance::new(
            format!("utt{i:05}"),
            features,
            Some(transcription),
            translation,
            Some(ToyLexicon::topic_name(topic)),
        )?);
    }
    Corpus::new(utterances)
}
