//! Corpus-aware global embeddings.
//!
//! Local features (image regions or word states) are pooled into a global
//! vector `x_s`, which attends into a frozen bank of concept embeddings `Q`
//! to produce `x_c`. A learned gate fuses the two into `x_m`, and a learned
//! convex combination of `(x_s, x_c, x_m)` gives the final embedding `x_f`.
//! The textual side additionally mixes a per-caption prior over concepts
//! into its attention weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::uniform_init;
use crate::error::{Error, Result};
use crate::numerics::{
    axpy, dot, l2_normalize_backward, l2_normalize_with_norm, norm, sigmoid, softmax_scaled,
    softmax_scaled_backward, DenseMatrix, Normalized,
};

/// Frozen concept bank `Q` (`z × d`, unit rows) with one name per concept.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEmbedding {
    q: DenseMatrix,
    concepts: Vec<String>,
}

impl CorpusEmbedding {
    pub fn new(q: DenseMatrix, concepts: Vec<String>) -> Result<Self> {
        if q.rows() < 2 {
            return Err(Error::invalid(format!(
                "corpus needs at least 2 concepts, got {}",
                q.rows()
            )));
        }
        if concepts.len() != q.rows() {
            return Err(Error::invalid(format!(
                "{} concept names for {} corpus rows",
                concepts.len(),
                q.rows()
            )));
        }
        for (i, row) in q.row_iter().enumerate() {
            if (norm(row) - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("corpus row {i} is not unit-norm")));
            }
        }
        Ok(Self { q, concepts })
    }

    /// Normalizes every row before building the corpus.
    pub fn from_raw(q: DenseMatrix, concepts: Vec<String>) -> Result<Self> {
        let mut q = q;
        for i in 0..q.rows() {
            let unit = l2_normalize_with_norm(q.row(i))?.unit;
            q.row_mut(i).copy_from_slice(&unit);
        }
        Self::new(q, concepts)
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.q
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.q.cols()
    }
}

/// Prior distribution over corpus concepts for one caption.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptLabel(Vec<f64>);

impl ConceptLabel {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty("ConceptLabel"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("concept label entries must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "concept label sums to {total}, expected 1"
            )));
        }
        Ok(Self(weights))
    }

    pub fn uniform(z: usize) -> Self {
        Self(vec![1.0 / z as f64; z])
    }

    /// Uniform mass over concepts whose name occurs among `tokens`, or over
    /// all concepts when none occurs.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S], corpus: &CorpusEmbedding) -> Self {
        let hits: Vec<bool> = corpus
            .concepts()
            .iter()
            .map(|c| tokens.iter().any(|t| t.as_ref() == c))
            .collect();
        let count = hits.iter().filter(|&&h| h).count();
        if count == 0 {
            return Self::uniform(corpus.len());
        }
        Self(
            hits.into_iter()
                .map(|h| if h { 1.0 / count as f64 } else { 0.0 })
                .collect(),
        )
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }
}

/// How the textual attention combines its softmax with the concept prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CtlmMixture {
    /// `(1 − η)·softmax + η·label`
    #[default]
    Prior,
    /// `(1 − η)·softmax + η·softmax`, i.e. plain softmax.
    Literal,
}

/// Trainable parameters of one modality's consensus block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusBranch {
    /// projects the global query, `d × d`
    pub w_theta1: DenseMatrix,
    /// projects concept rows, `d × d`
    pub w_theta2: DenseMatrix,
    /// gate readout over `[x_s; x_c]`, `1 × 2d`
    pub gate_w: DenseMatrix,
    pub gate_b: DenseMatrix,
    /// pre-softmax weights of `(x_s, x_c, x_m)`, `1 × 3`
    pub stack: DenseMatrix,
}

impl ConsensusBranch {
    pub fn init<R: Rng>(rng: &mut R, d: usize) -> Self {
        Self {
            w_theta1: uniform_init(rng, d, d, d),
            w_theta2: uniform_init(rng, d, d, d),
            gate_w: uniform_init(rng, 1, 2 * d, 2 * d),
            gate_b: DenseMatrix::zeros(1, 1),
            stack: DenseMatrix::zeros(1, 3),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            w_theta1: DenseMatrix::zeros(d, d),
            w_theta2: DenseMatrix::zeros(d, d),
            gate_w: DenseMatrix::zeros(1, 2 * d),
            gate_b: DenseMatrix::zeros(1, 1),
            stack: DenseMatrix::zeros(1, 3),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim())
    }

    pub fn dim(&self) -> usize {
        self.w_theta1.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusParams {
    pub visual: ConsensusBranch,
    pub textual: ConsensusBranch,
    /// softmax inverse temperature
    pub lambda: f64,
    /// weight of the concept prior in textual attention
    pub eta: f64,
    pub mixture: CtlmMixture,
}

impl ConsensusParams {
    pub fn init<R: Rng>(rng: &mut R, d: usize, lambda: f64, eta: f64, mixture: CtlmMixture) -> Result<Self> {
        let p = Self {
            visual: ConsensusBranch::init(rng, d),
            textual: ConsensusBranch::init(rng, d),
            lambda,
            eta,
            mixture,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

// ---------------------------------------------------------------------------
// attention pooling

#[derive(Debug, Clone)]
pub struct PoolForward {
    query: Vec<f64>,
    weights: Vec<f64>,
    out: Normalized,
}

impl PoolForward {
    pub fn output(&self) -> &[f64] {
        &self.out.unit
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Mean-query attention pooling over the rows of `features`.
pub fn self_attention_pool(features: &DenseMatrix, lambda: f64) -> Result<Vec<f64>> {
    Ok(pool_forward(features, lambda)?.out.unit)
}

pub fn pool_forward(features: &DenseMatrix, lambda: f64) -> Result<PoolForward> {
    let o = features.rows();
    if o == 0 || features.cols() == 0 {
        return Err(Error::Empty("self_attention_pool"));
    }
    let mut query = vec![0.0; features.cols()];
    for row in features.row_iter() {
        axpy(&mut query, 1.0 / o as f64, row);
    }
    let scores: Vec<f64> = features.row_iter().map(|r| dot(&query, r)).collect();
    let weights = softmax_scaled(&scores, lambda)?;
    let pooled = features.mat_t_vec(&weights);
    let out = l2_normalize_with_norm(&pooled)?;
    Ok(PoolForward { query, weights, out })
}

/// Returns `dL/dfeatures`.
pub fn pool_backward(features: &DenseMatrix, cache: &PoolForward, grad_out: &[f64], lambda: f64) -> DenseMatrix {
    let o = features.rows();
    let g_pooled = l2_normalize_backward(&cache.out, grad_out);
    let g_w: Vec<f64> = features.row_iter().map(|r| dot(&g_pooled, r)).collect();
    let g_scores = softmax_scaled_backward(&cache.weights, &g_w, lambda);
    let mut grad = features.zeros_like();
    let mut g_query = vec![0.0; features.cols()];
    for (i, (&w, &g_s)) in cache.weights.iter().zip(&g_scores).enumerate() {
        let row = grad.row_mut(i);
        axpy(row, w, &g_pooled);
        axpy(row, g_s, &cache.query);
        axpy(&mut g_query, g_s, features.row(i));
    }
    for i in 0..o {
        axpy(grad.row_mut(i), 1.0 / o as f64, &g_query);
    }
    grad
}

// ---------------------------------------------------------------------------
// corpus attention

#[derive(Debug, Clone)]
pub struct AttendForward {
    projected_query: Vec<f64>,
    keys: DenseMatrix,
    probs: Vec<f64>,
    weights: Vec<f64>,
    softmax_share: f64,
    out: Normalized,
}

impl AttendForward {
    pub fn output(&self) -> &[f64] {
        &self.out.unit
    }

    /// Final attention weights over the corpus rows.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

fn attend_forward(
    query: &[f64],
    corpus: &CorpusEmbedding,
    branch: &ConsensusBranch,
    lambda: f64,
    prior: Option<(&ConceptLabel, f64)>,
) -> Result<AttendForward> {
    let d = corpus.dim();
    if query.len() != d || branch.dim() != d {
        return Err(Error::Shape {
            op: "corpus attention",
            left: (1, query.len()),
            right: (corpus.len(), d),
        });
    }
    let projected_query = branch.w_theta1.mat_vec(query);
    // row i of keys = W_θ2 q_i
    let keys = corpus.matrix().matmul(&branch.w_theta2.transpose())?;
    let scores: Vec<f64> = keys.row_iter().map(|k| dot(&projected_query, k)).collect();
    let probs = softmax_scaled(&scores, lambda)?;
    let (weights, softmax_share) = match prior {
        None => (probs.clone(), 1.0),
        Some((label, eta)) => {
            if label.weights().len() != corpus.len() {
                return Err(Error::invalid(format!(
                    "concept label has {} entries for a corpus of {}",
                    label.weights().len(),
                    corpus.len()
                )));
            }
            let w = probs
                .iter()
                .zip(label.weights())
                .map(|(p, l)| (1.0 - eta) * p + eta * l)
                .collect();
            (w, 1.0 - eta)
        }
    };
    let mixed = corpus.matrix().mat_t_vec(&weights);
    let out = l2_normalize_with_norm(&mixed)?;
    Ok(AttendForward {
        projected_query,
        keys,
        probs,
        weights,
        softmax_share,
        out,
    })
}

/// Accumulates projection gradients into `grads`; returns `dL/dquery`.
fn attend_backward(
    query: &[f64],
    corpus: &CorpusEmbedding,
    branch: &ConsensusBranch,
    cache: &AttendForward,
    grad_out: &[f64],
    lambda: f64,
    grads: &mut ConsensusBranch,
) -> Vec<f64> {
    let g_mixed = l2_normalize_backward(&cache.out, grad_out);
    let g_probs: Vec<f64> = corpus
        .matrix()
        .row_iter()
        .map(|q| cache.softmax_share * dot(&g_mixed, q))
        .collect();
    let g_scores = softmax_scaled_backward(&cache.probs, &g_probs, lambda);
    let mut g_proj_query = vec![0.0; query.len()];
    for (i, &gs) in g_scores.iter().enumerate() {
        if gs == 0.0 {
            continue;
        }
        axpy(&mut g_proj_query, gs, cache.keys.row(i));
        // d keys_i = gs · projected_query; keys_i = W_θ2 q_i
        grads
            .w_theta2
            .add_outer(&cache.projected_query, corpus.matrix().row(i), gs);
    }
    grads.w_theta1.add_outer(&g_proj_query, query, 1.0);
    branch.w_theta1.mat_t_vec(&g_proj_query)
}

/// Visual corpus attention: `v_c = normalize(Σ_i softmax(λ ĉ)_i q_i)`.
pub fn cvlm_attend(v_s: &[f64], corpus: &CorpusEmbedding, params: &ConsensusParams) -> Result<Vec<f64>> {
    params.validate()?;
    Ok(attend_forward(v_s, corpus, &params.visual, params.lambda, None)?.out.unit)
}

/// Textual corpus attention with the concept prior mixed in.
pub fn ctlm_attend(
    t_s: &[f64],
    corpus: &CorpusEmbedding,
    label: &ConceptLabel,
    params: &ConsensusParams,
) -> Result<Vec<f64>> {
    Ok(ctlm_forward(t_s, corpus, label, params)?.out.unit)
}

pub fn ctlm_forward(
    t_s: &[f64],
    corpus: &CorpusEmbedding,
    label: &ConceptLabel,
    params: &ConsensusParams,
) -> Result<AttendForward> {
    params.validate()?;
    let prior = match params.mixture {
        CtlmMixture::Prior => Some((label, params.eta)),
        CtlmMixture::Literal => None,
    };
    attend_forward(t_s, corpus, &params.textual, params.lambda, prior)
}

pub fn cvlm_forward(v_s: &[f64], corpus: &CorpusEmbedding, params: &ConsensusParams) -> Result<AttendForward> {
    params.validate()?;
    attend_forward(v_s, corpus, &params.visual, params.lambda, None)
}

// ---------------------------------------------------------------------------
// gate and stack

#[derive(Debug, Clone)]
pub struct GateForward {
    pub u: f64,
    out: Normalized,
}

impl GateForward {
    pub fn output(&self) -> &[f64] {
        &self.out.unit
    }
}

/// `x_m = normalize(u·x_s + (1 − u)·x_c)` with `u = σ(w·[x_s; x_c] + b)`.
pub fn gated_fuse(x_s: &[f64], x_c: &[f64], branch: &ConsensusBranch) -> Result<Vec<f64>> {
    Ok(gate_forward(x_s, x_c, branch)?.out.unit)
}

pub fn gate_forward(x_s: &[f64], x_c: &[f64], branch: &ConsensusBranch) -> Result<GateForward> {
    let d = x_s.len();
    if x_c.len() != d || branch.gate_w.cols() != 2 * d {
        return Err(Error::Shape {
            op: "gated_fuse",
            left: (x_s.len(), x_c.len()),
            right: branch.gate_w.shape(),
        });
    }
    let w = branch.gate_w.data();
    let u = sigmoid(dot(&w[..d], x_s) + dot(&w[d..], x_c) + branch.gate_b.data()[0]);
    let fused: Vec<f64> = x_s
        .iter()
        .zip(x_c)
        .map(|(a, b)| u * a + (1.0 - u) * b)
        .collect();
    Ok(GateForward {
        u,
        out: l2_normalize_with_norm(&fused)?,
    })
}

/// Returns `(dL/dx_s, dL/dx_c)`.
pub fn gate_backward(
    x_s: &[f64],
    x_c: &[f64],
    branch: &ConsensusBranch,
    cache: &GateForward,
    grad_out: &[f64],
    grads: &mut ConsensusBranch,
) -> (Vec<f64>, Vec<f64>) {
    let d = x_s.len();
    let u = cache.u;
    let g_fused = l2_normalize_backward(&cache.out, grad_out);
    let g_u: f64 = g_fused
        .iter()
        .zip(x_s.iter().zip(x_c))
        .map(|(g, (a, b))| g * (a - b))
        .sum();
    let g_pre = g_u * u * (1.0 - u);
    {
        let gw = grads.gate_w.data_mut();
        axpy(&mut gw[..d], g_pre, x_s);
        axpy(&mut gw[d..], g_pre, x_c);
    }
    grads.gate_b.data_mut()[0] += g_pre;
    let w = branch.gate_w.data();
    let g_s = (0..d).map(|i| u * g_fused[i] + g_pre * w[i]).collect();
    let g_c = (0..d)
        .map(|i| (1.0 - u) * g_fused[i] + g_pre * w[d + i])
        .collect();
    (g_s, g_c)
}

#[derive(Debug, Clone)]
pub struct StackForward {
    pub alpha: [f64; 3],
    out: Normalized,
}

impl StackForward {
    pub fn output(&self) -> &[f64] {
        &self.out.unit
    }
}

/// `x_f = normalize(Σ softmax(stack)_k x_k)` over `(x_s, x_c, x_m)`.
pub fn stack_final(x_s: &[f64], x_c: &[f64], x_m: &[f64], branch: &ConsensusBranch) -> Result<Vec<f64>> {
    Ok(stack_forward([x_s, x_c, x_m], branch)?.out.unit)
}

pub fn stack_forward(inputs: [&[f64]; 3], branch: &ConsensusBranch) -> Result<StackForward> {
    let d = inputs[0].len();
    if inputs.iter().any(|x| x.len() != d) || branch.stack.len() != 3 {
        return Err(Error::Shape {
            op: "stack_final",
            left: (3, d),
            right: branch.stack.shape(),
        });
    }
    let a = softmax_scaled(branch.stack.data(), 1.0)?;
    let alpha = [a[0], a[1], a[2]];
    let mut combined = vec![0.0; d];
    for (w, x) in alpha.iter().zip(inputs) {
        axpy(&mut combined, *w, x);
    }
    Ok(StackForward {
        alpha,
        out: l2_normalize_with_norm(&combined)?,
    })
}

pub fn stack_backward(
    inputs: [&[f64]; 3],
    cache: &StackForward,
    grad_out: &[f64],
    grads: &mut ConsensusBranch,
) -> [Vec<f64>; 3] {
    let g_comb = l2_normalize_backward(&cache.out, grad_out);
    let g_alpha: Vec<f64> = inputs.iter().map(|x| dot(&g_comb, x)).collect();
    let g_logits = softmax_scaled_backward(&cache.alpha, &g_alpha, 1.0);
    axpy(grads.stack.data_mut(), 1.0, &g_logits);
    let scaled = |k: usize| g_comb.iter().map(|g| cache.alpha[k] * g).collect();
    [scaled(0), scaled(1), scaled(2)]
}

// ---------------------------------------------------------------------------
// full block

/// Everything one consensus block computed for a single item.
#[derive(Debug, Clone)]
pub struct ConsensusForward {
    modality: Modality,
    pool: PoolForward,
    attend: AttendForward,
    gate: GateForward,
    stack: StackForward,
}

impl ConsensusForward {
    pub fn output(&self) -> &[f64] {
        self.stack.output()
    }

    pub fn pooled(&self) -> &[f64] {
        self.pool.output()
    }

    pub fn corpus_view(&self) -> &[f64] {
        self.attend.output()
    }

    pub fn fused(&self) -> &[f64] {
        self.gate.output()
    }

    pub fn attention(&self) -> &[f64] {
        self.attend.weights()
    }

    pub fn gate_value(&self) -> f64 {
        self.gate.u
    }
}

fn branch_of(params: &ConsensusParams, modality: Modality) -> &ConsensusBranch {
    match modality {
        Modality::Image => &params.visual,
        Modality::Text => &params.textual,
    }
}

/// Pool, attend, fuse and stack one item's local features.
///
/// `label` is required for text and ignored for images.
pub fn consensus_forward(
    features: &DenseMatrix,
    corpus: &CorpusEmbedding,
    params: &ConsensusParams,
    modality: Modality,
    label: Option<&ConceptLabel>,
) -> Result<ConsensusForward> {
    params.validate()?;
    let branch = branch_of(params, modality);
    let pool = pool_forward(features, params.lambda)?;
    let attend = match modality {
        Modality::Image => cvlm_forward(pool.output(), corpus, params)?,
        Modality::Text => {
            let label = label.ok_or_else(|| Error::invalid("text consensus needs a concept label"))?;
            ctlm_forward(pool.output(), corpus, label, params)?
        }
    };
    let gate = gate_forward(pool.output(), attend.output(), branch)?;
    let stack = stack_forward([pool.output(), attend.output(), gate.output()], branch)?;
    Ok(ConsensusForward {
        modality,
        pool,
        attend,
        gate,
        stack,
    })
}

/// Backprop from `dL/dx_f` to the local features; accumulates branch
/// gradients into `grads` (the branch matching the cached modality).
pub fn consensus_backward(
    features: &DenseMatrix,
    corpus: &CorpusEmbedding,
    params: &ConsensusParams,
    cache: &ConsensusForward,
    grad_out: &[f64],
    grads: &mut ConsensusGrads,
) -> DenseMatrix {
    let branch = branch_of(params, cache.modality);
    let grads = match cache.modality {
        Modality::Image => &mut grads.visual,
        Modality::Text => &mut grads.textual,
    };
    let x_s = cache.pool.output();
    let x_c = cache.attend.output();
    let x_m = cache.gate.output();
    let [mut g_s, mut g_c, g_m] = stack_backward([x_s, x_c, x_m], &cache.stack, grad_out, grads);
    let (gs2, gc2) = gate_backward(x_s, x_c, branch, &cache.gate, &g_m, grads);
    axpy(&mut g_s, 1.0, &gs2);
    axpy(&mut g_c, 1.0, &gc2);
    let gs3 = attend_backward(x_s, corpus, branch, &cache.attend, &g_c, params.lambda, grads);
    axpy(&mut g_s, 1.0, &gs3);
    pool_backward(features, &cache.pool, &g_s, params.lambda)
}

/// Gradient accumulator for both consensus branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusGrads {
    pub visual: ConsensusBranch,
    pub textual: ConsensusBranch,
}

impl ConsensusGrads {
    pub fn zeros(d: usize) -> Self {
        Self {
            visual: ConsensusBranch::zeros(d),
            textual: ConsensusBranch::zeros(d),
        }
    }
}
