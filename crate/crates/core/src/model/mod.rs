//! Encoder with a CTC head and a training-only semantic head.
//!
//! Encoder: a strided input projection over non-overlapping windows of
//! `subsample` frames, followed by `encoder_layers - 1` residual
//! kernel-3 temporal convolutions with tanh. Both heads read the final
//! encoder states. The semantic head mean-pools valid frames and applies
//! two affine layers with a tanh in between (H -> H -> D).
//!
//! Parameters live in `f64` but are kept on the `f32` grid after init and
//! after every optimizer step so checkpoints round-trip exactly.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC,
};

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Utterance, Vocabulary};
use crate::losses::collapse;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("feature dimension mismatch: model expects {expected}, batch has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("missing tensor '{0}'")]
    MissingTensor(String),
    #[error("semantic head has been stripped")]
    NoSemanticHead,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub encoder_layers: usize,
    pub encoder_hidden: usize,
    pub subsample: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1");
        }
        if self.encoder_layers == 0 {
            return bad("encoder_layers must be >= 1");
        }
        if self.encoder_hidden == 0 {
            return bad("encoder_hidden must be >= 1");
        }
        if self.subsample == 0 {
            return bad("subsample must be >= 1");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be >= 2");
        }
        if self.embed_dim < 2 {
            return bad("embed_dim must be >= 2");
        }
        Ok(())
    }

    pub fn output_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.subsample)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    CtcHead,
    SemanticHead,
}

impl Component {
    pub fn as_str(&self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::CtcHead => "ctc_head",
            Component::SemanticHead => "semantic_head",
        }
    }
}

/// A named, component-tagged parameter tensor stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub component: Component,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, component: Component, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            component,
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => panic!("tensor {} is not a matrix", self.name),
        };
        ArrayView2::from_shape((r, c), &self.data).expect("shape matches data")
    }

    pub fn vector(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[..])
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

pub(crate) mod names {
    pub const INPUT_W: &str = "encoder.input.weight";
    pub const INPUT_B: &str = "encoder.input.bias";
    pub const CTC_W: &str = "ctc_head.weight";
    pub const CTC_B: &str = "ctc_head.bias";
    pub const SEM1_W: &str = "semantic_head.fc1.weight";
    pub const SEM1_B: &str = "semantic_head.fc1.bias";
    pub const SEM2_W: &str = "semantic_head.fc2.weight";
    pub const SEM2_B: &str = "semantic_head.fc2.bias";

    pub fn layer_w(l: usize) -> String {
        format!("encoder.layer{l}.weight")
    }

    pub fn layer_b(l: usize) -> String {
        format!("encoder.layer{l}.bias")
    }
}

/// Model parameters in canonical order, plus the config that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Builds params from explicit tensors, checking names and shapes against `config`.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = tensor_layout(&config);
        let has_head = tensors
            .iter()
            .any(|t| t.component == Component::SemanticHead);
        let expected: Vec<_> = expected
            .into_iter()
            .filter(|(_, c, _)| has_head || *c != Component::SemanticHead)
            .collect();
        if expected.len() != tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, comp, shape), t) in expected.iter().zip(&tensors) {
            if *name != t.name || *comp != t.component || *shape != t.shape {
                return Err(ModelError::Checkpoint(format!(
                    "tensor '{}' ({:?} {:?}) does not match expected '{}' ({:?} {:?})",
                    t.name, t.component, t.shape, name, comp, shape
                )));
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor '{}' has wrong length",
                    t.name
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    fn req(&self, name: &str) -> &Tensor {
        self.get(name)
            .unwrap_or_else(|| panic!("missing tensor {name}"))
    }

    pub fn has_semantic_head(&self) -> bool {
        self.tensors
            .iter()
            .any(|t| t.component == Component::SemanticHead)
    }

    pub fn component(&self, component: Component) -> impl Iterator<Item = &Tensor> {
        self.tensors
            .iter()
            .filter(move |t| t.component == component)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.component, t.shape.clone()))
                .collect(),
        }
    }

    /// Rounds every value onto the f32 grid.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Gradients with the same layout as the [`ModelParams`] they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .iter_mut()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("missing gradient {name}"))
    }

    pub fn max_abs(&self, component: Component) -> f64 {
        self.tensors
            .iter()
            .filter(|t| t.component == component)
            .flat_map(|t| t.data.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self, component: Component) -> f64 {
        self.tensors
            .iter()
            .filter(|t| t.component == component)
            .map(Tensor::squared_norm)
            .sum::<f64>()
            .sqrt()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            debug_assert_eq!(a.name, b.name);
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

fn tensor_layout(cfg: &ModelConfig) -> Vec<(String, Component, Vec<usize>)> {
    let h = cfg.encoder_hidden;
    let mut out = vec![
        (
            names::INPUT_W.to_string(),
            Component::Encoder,
            vec![h, cfg.subsample * cfg.feature_dim],
        ),
        (names::INPUT_B.to_string(), Component::Encoder, vec![h]),
    ];
    for l in 1..cfg.encoder_layers {
        out.push((names::layer_w(l), Component::Encoder, vec![h, 3 * h]));
        out.push((names::layer_b(l), Component::Encoder, vec![h]));
    }
    out.push((
        names::CTC_W.to_string(),
        Component::CtcHead,
        vec![cfg.vocab_size, h],
    ));
    out.push((
        names::CTC_B.to_string(),
        Component::CtcHead,
        vec![cfg.vocab_size],
    ));
    out.push((
        names::SEM1_W.to_string(),
        Component::SemanticHead,
        vec![h, h],
    ));
    out.push((names::SEM1_B.to_string(), Component::SemanticHead, vec![h]));
    out.push((
        names::SEM2_W.to_string(),
        Component::SemanticHead,
        vec![cfg.embed_dim, h],
    ));
    out.push((
        names::SEM2_B.to_string(),
        Component::SemanticHead,
        vec![cfg.embed_dim],
    ));
    out
}

/// Seeded init: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
pub fn init_model(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tensors = tensor_layout(config)
        .into_iter()
        .map(|(name, component, shape)| {
            let mut t = Tensor::zeros(name, component, shape);
            if t.shape.len() == 2 {
                let bound = 1.0 / (t.shape[1] as f64).sqrt();
                for v in &mut t.data {
                    *v = rng.gen_range(-bound..bound) as f32 as f64;
                }
            }
            t
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StripStatus {
    Removed,
    /// The head was already absent; the call was a no-op.
    AlreadyAbsent,
}

/// Drops every semantic-head tensor, leaving the inference graph.
pub fn strip_semantic_head(params: &ModelParams) -> (ModelParams, StripStatus) {
    if !params.has_semantic_head() {
        log::warn!("strip_semantic_head: semantic head already absent");
        return (params.clone(), StripStatus::AlreadyAbsent);
    }
    let tensors = params
        .tensors
        .iter()
        .filter(|t| t.component != Component::SemanticHead)
        .cloned()
        .collect();
    (
        ModelParams {
            config: params.config.clone(),
            tensors,
        },
        StripStatus::Removed,
    )
}

/// Zero-padded `B x T_max x F` features with true lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub features: Array3<f64>,
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn new(features: Array3<f64>, lengths: Vec<usize>) -> Result<Self> {
        let (b, t_max, _) = features.dim();
        if b != lengths.len() {
            return Err(ModelError::InvalidBatch(format!(
                "{b} feature rows but {} lengths",
                lengths.len()
            )));
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > t_max) {
            return Err(ModelError::InvalidBatch(format!(
                "length {bad} outside 1..={t_max}"
            )));
        }
        Ok(Self { features, lengths })
    }

    pub fn from_utterances(utts: &[&Utterance]) -> Result<Self> {
        let t_max = utts.iter().map(|u| u.num_frames()).max().unwrap_or(0);
        Self::padded(utts, t_max, 0.0)
    }

    /// Pads every utterance to `t_max` frames with `pad_value`.
    pub fn padded(utts: &[&Utterance], t_max: usize, pad_value: f64) -> Result<Self> {
        if utts.is_empty() {
            return Err(ModelError::InvalidBatch("empty batch".into()));
        }
        let f = utts[0].feature_dim();
        let mut features = Array3::from_elem((utts.len(), t_max, f), pad_value);
        let mut lengths = Vec::with_capacity(utts.len());
        for (i, u) in utts.iter().enumerate() {
            if u.feature_dim() != f {
                return Err(ModelError::DimensionMismatch {
                    expected: f,
                    found: u.feature_dim(),
                });
            }
            if u.num_frames() > t_max {
                return Err(ModelError::InvalidBatch(format!(
                    "utterance '{}' has {} frames > {t_max}",
                    u.id,
                    u.num_frames()
                )));
            }
            features
                .slice_mut(s![i, ..u.num_frames(), ..])
                .assign(&u.features.mapv(f64::from));
            lengths.push(u.num_frames());
        }
        Self::new(features, lengths)
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim().2
    }
}

/// Per-utterance encoder outputs, each `T' x H` with `T' = ceil(T / subsample)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    pub states: Vec<Array2<f64>>,
}

impl EncoderStates {
    pub fn lengths(&self) -> Vec<usize> {
        self.states.iter().map(|s| s.nrows()).collect()
    }

    /// `B x T'_max` validity mask.
    pub fn mask(&self) -> Array2<bool> {
        let t_max = self.states.iter().map(|s| s.nrows()).max().unwrap_or(0);
        let mut mask = Array2::from_elem((self.states.len(), t_max), false);
        for (i, s) in self.states.iter().enumerate() {
            mask.slice_mut(s![i, ..s.nrows()]).fill(true);
        }
        mask
    }
}

/// Intermediate values kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct EncoderTrace {
    windows: Array2<f64>,
    /// Output of the input projection followed by each residual layer.
    outputs: Vec<Array2<f64>>,
    contexts: Vec<Array2<f64>>,
    activations: Vec<Array2<f64>>,
}

impl EncoderTrace {
    pub(crate) fn states(&self) -> &Array2<f64> {
        self.outputs.last().expect("at least one layer")
    }
}

fn affine_rows(x: &ArrayView2<f64>, w: &Tensor, b: &Tensor) -> Array2<f64> {
    let mut y = x.dot(&w.matrix().t());
    y += &b.vector();
    y
}

fn windows(features: ArrayView2<f64>, len: usize, subsample: usize) -> Array2<f64> {
    let f = features.ncols();
    let frames = len.div_ceil(subsample);
    let mut u = Array2::zeros((frames, subsample * f));
    for t in 0..frames {
        for j in 0..subsample {
            let src = t * subsample + j;
            if src < len {
                u.slice_mut(s![t, j * f..(j + 1) * f])
                    .assign(&features.row(src));
            }
        }
    }
    u
}

fn temporal_context(h: &Array2<f64>) -> Array2<f64> {
    let (t, dim) = h.dim();
    let mut c = Array2::zeros((t, 3 * dim));
    for i in 0..t {
        if i > 0 {
            c.slice_mut(s![i, ..dim]).assign(&h.row(i - 1));
        }
        c.slice_mut(s![i, dim..2 * dim]).assign(&h.row(i));
        if i + 1 < t {
            c.slice_mut(s![i, 2 * dim..]).assign(&h.row(i + 1));
        }
    }
    c
}

pub(crate) fn encode_one(
    params: &ModelParams,
    features: ArrayView2<f64>,
    len: usize,
) -> EncoderTrace {
    let cfg = &params.config;
    let u = windows(features, len, cfg.subsample);
    let h0 = affine_rows(
        &u.view(),
        params.req(names::INPUT_W),
        params.req(names::INPUT_B),
    )
    .mapv(f64::tanh);
    let mut outputs = vec![h0];
    let mut contexts = Vec::new();
    let mut activations = Vec::new();
    for l in 1..cfg.encoder_layers {
        let prev = outputs.last().unwrap();
        let c = temporal_context(prev);
        let act = affine_rows(
            &c.view(),
            params.req(&names::layer_w(l)),
            params.req(&names::layer_b(l)),
        )
        .mapv(f64::tanh);
        let next = prev + &act;
        contexts.push(c);
        activations.push(act);
        outputs.push(next);
    }
    EncoderTrace {
        windows: u,
        outputs,
        contexts,
        activations,
    }
}

fn check_batch(params: &ModelParams, batch: &PaddedBatch) -> Result<()> {
    if batch.feature_dim() != params.config.feature_dim {
        return Err(ModelError::DimensionMismatch {
            expected: params.config.feature_dim,
            found: batch.feature_dim(),
        });
    }
    Ok(())
}

pub(crate) fn encode_traced(
    params: &ModelParams,
    batch: &PaddedBatch,
) -> Result<Vec<EncoderTrace>> {
    check_batch(params, batch)?;
    Ok(batch
        .lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| encode_one(params, batch.features.index_axis(Axis(0), i), len))
        .collect())
}

/// Runs the encoder. Frames past each utterance's length never reach the output.
pub fn encode(params: &ModelParams, batch: &PaddedBatch) -> Result<EncoderStates> {
    Ok(EncoderStates {
        states: encode_traced(params, batch)?
            .into_iter()
            .map(|mut t| t.outputs.pop().unwrap())
            .collect(),
    })
}

fn log_softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
}

pub(crate) fn ctc_log_probs_one(params: &ModelParams, states: &Array2<f64>) -> Array2<f64> {
    let mut z = affine_rows(
        &states.view(),
        params.req(names::CTC_W),
        params.req(names::CTC_B),
    );
    log_softmax_rows(&mut z);
    z
}

/// Per-frame log-probabilities over the vocabulary (blank included).
pub fn ctc_logits(params: &ModelParams, states: &EncoderStates) -> Vec<Array2<f64>> {
    states
        .states
        .iter()
        .map(|s| ctc_log_probs_one(params, s))
        .collect()
}

#[derive(Debug, Clone)]
pub(crate) struct SemanticTrace {
    pooled: Array1<f64>,
    hidden: Array1<f64>,
    pub(crate) output: Array1<f64>,
}

pub(crate) fn semantic_one(params: &ModelParams, states: &Array2<f64>) -> Result<SemanticTrace> {
    if !params.has_semantic_head() {
        return Err(ModelError::NoSemanticHead);
    }
    let pooled = states.mean_axis(Axis(0)).expect("at least one frame");
    let w1 = params.req(names::SEM1_W).matrix();
    let hidden = (w1.dot(&pooled) + params.req(names::SEM1_B).vector()).mapv(f64::tanh);
    let w2 = params.req(names::SEM2_W).matrix();
    let output = w2.dot(&hidden) + params.req(names::SEM2_B).vector();
    Ok(SemanticTrace {
        pooled,
        hidden,
        output,
    })
}

/// Mean-pools valid frames and maps them into the embedding space (one D-vector per utterance).
pub fn semantic_project(params: &ModelParams, states: &EncoderStates) -> Result<Vec<Vec<f64>>> {
    states
        .states
        .iter()
        .map(|s| semantic_one(params, s).map(|t| t.output.to_vec()))
        .collect()
}

/// Accumulates into `grads` the gradient flowing back from one utterance.
///
/// `d_log_probs` is the loss gradient w.r.t. the CTC log-probabilities and
/// `d_embedding` w.r.t. the semantic-head output; either may be absent.
pub(crate) fn backward_one(
    params: &ModelParams,
    trace: &EncoderTrace,
    log_probs: Option<&Array2<f64>>,
    d_log_probs: Option<&Array2<f64>>,
    semantic: Option<&SemanticTrace>,
    d_embedding: Option<&[f64]>,
    grads: &mut Gradients,
) {
    let states = trace.states();
    let mut d_states = Array2::<f64>::zeros(states.raw_dim());

    if let (Some(lp), Some(g)) = (log_probs, d_log_probs) {
        // log-softmax backward: dz = g - softmax * rowsum(g)
        let mut dz = g.clone();
        for ((mut dz_row, lp_row), g_row) in dz.rows_mut().into_iter().zip(lp.rows()).zip(g.rows())
        {
            let total = g_row.sum();
            dz_row.zip_mut_with(&lp_row, |d, &l| *d -= l.exp() * total);
        }
        add_outer_rows(grads, names::CTC_W, names::CTC_B, &dz, &states.view());
        d_states += &dz.dot(&params.req(names::CTC_W).matrix());
    }

    if let (Some(sem), Some(dy)) = (semantic, d_embedding) {
        let dy = ArrayView1::from(dy);
        {
            let gw2 = grads.get_mut(names::SEM2_W);
            let dim = sem.hidden.len();
            for (i, &d) in dy.iter().enumerate() {
                for (j, &h) in sem.hidden.iter().enumerate() {
                    gw2.data[i * dim + j] += d * h;
                }
            }
        }
        add_vec(grads.get_mut(names::SEM2_B), dy.iter().copied());
        let d_hidden = params.req(names::SEM2_W).matrix().t().dot(&dy);
        let d_pre: Array1<f64> = d_hidden
            .iter()
            .zip(sem.hidden.iter())
            .map(|(d, h)| d * (1.0 - h * h))
            .collect();
        {
            let gw1 = grads.get_mut(names::SEM1_W);
            let dim = sem.pooled.len();
            for (i, &d) in d_pre.iter().enumerate() {
                for (j, &p) in sem.pooled.iter().enumerate() {
                    gw1.data[i * dim + j] += d * p;
                }
            }
        }
        add_vec(grads.get_mut(names::SEM1_B), d_pre.iter().copied());
        let d_pooled = params.req(names::SEM1_W).matrix().t().dot(&d_pre);
        let frames = states.nrows() as f64;
        for mut row in d_states.rows_mut() {
            row.scaled_add(1.0 / frames, &d_pooled);
        }
    }

    let hidden = params.config.encoder_hidden;
    let mut d_h = d_states;
    for l in (1..params.config.encoder_layers).rev() {
        let act = &trace.activations[l - 1];
        let d_a = &d_h * &act.mapv(|a| 1.0 - a * a);
        add_outer_rows(
            grads,
            &names::layer_w(l),
            &names::layer_b(l),
            &d_a,
            &trace.contexts[l - 1].view(),
        );
        let d_c = d_a.dot(&params.req(&names::layer_w(l)).matrix());
        let frames = d_h.nrows();
        for t in 0..frames {
            if t > 0 {
                let mut r = d_h.row_mut(t - 1);
                r += &d_c.slice(s![t, ..hidden]);
            }
            {
                let mut r = d_h.row_mut(t);
                r += &d_c.slice(s![t, hidden..2 * hidden]);
            }
            if t + 1 < frames {
                let mut r = d_h.row_mut(t + 1);
                r += &d_c.slice(s![t, 2 * hidden..]);
            }
        }
    }
    let h0 = &trace.outputs[0];
    let d_a0 = &d_h * &h0.mapv(|a| 1.0 - a * a);
    add_outer_rows(
        grads,
        names::INPUT_W,
        names::INPUT_B,
        &d_a0,
        &trace.windows.view(),
    );
}

fn add_vec(t: &mut Tensor, values: impl Iterator<Item = f64>) {
    for (d, v) in t.data.iter_mut().zip(values) {
        *d += v;
    }
}

/// `W += d^T x`, `b += sum_rows(d)` for a row-wise affine map.
fn add_outer_rows(grads: &mut Gradients, w: &str, b: &str, d: &Array2<f64>, x: &ArrayView2<f64>) {
    let gw = d.t().dot(x);
    add_vec(grads.get_mut(w), gw.iter().copied());
    add_vec(grads.get_mut(b), d.sum_axis(Axis(0)).iter().copied());
}

/// Per-frame argmax, collapse repeats, drop blanks, map to characters.
pub fn greedy_ctc_decode(log_probs: ArrayView2<f64>, vocab: &Vocabulary) -> String {
    let path: Vec<usize> = log_probs
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect();
    collapse(&path, vocab.blank_index())
        .into_iter()
        .filter_map(|k| vocab.symbol(k))
        .collect()
}

/// Greedy transcripts for every utterance in the batch.
pub fn transcribe(
    params: &ModelParams,
    batch: &PaddedBatch,
    vocab: &Vocabulary,
) -> Result<Vec<String>> {
    let states = encode(params, batch)?;
    Ok(ctc_logits(params, &states)
        .iter()
        .map(|lp| greedy_ctc_decode(lp.view(), vocab))
        .collect())
}
