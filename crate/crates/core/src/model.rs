//! The full embedding model: region projection and BiGRU encoders, each
//! followed by its consensus block, plus batch losses with gradients for
//! every parameter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::{
    consensus_backward, consensus_forward, ConceptLabel, ConsensusBranch, ConsensusForward, ConsensusGrads,
    ConsensusParams, CorpusEmbedding, CtlmMixture, Modality,
};
use crate::encoders::{
    encode_image_backward, encode_image_forward, encode_text_backward, encode_text_forward, GruParams,
    ImageEncoderParams, ImageForward, TextEncoderParams, TextForward,
};
use crate::error::{Error, Result};
use crate::losses::{
    ahrl_total_with, batch_penalty_weights, embedding_grads, hardest_negatives, triplet_loss_with, AnchorMargins,
    BatchEmbeddings, BatchSimilarities, LossBreakdown, MinedEmbeddings, NegativeMode, PairMapping, PenaltyWeights,
};
use crate::numerics::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// joint embedding size `d`; also the GRU hidden size and corpus width
    pub embed_dim: usize,
    pub word_dim: usize,
    pub lambda: f64,
    pub eta: f64,
    pub mixture: CtlmMixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub image: ImageEncoderParams,
    pub text: TextEncoderParams,
    pub consensus: ConsensusParams,
}

fn gru_tensors(g: &GruParams) -> [&DenseMatrix; 9] {
    [&g.w_z, &g.w_r, &g.w_h, &g.u_z, &g.u_r, &g.u_h, &g.b_z, &g.b_r, &g.b_h]
}

fn gru_tensors_mut(g: &mut GruParams) -> [&mut DenseMatrix; 9] {
    [
        &mut g.w_z, &mut g.w_r, &mut g.w_h, &mut g.u_z, &mut g.u_r, &mut g.u_h, &mut g.b_z, &mut g.b_r, &mut g.b_h,
    ]
}

fn branch_tensors(b: &ConsensusBranch) -> [&DenseMatrix; 5] {
    [&b.w_theta1, &b.w_theta2, &b.gate_w, &b.gate_b, &b.stack]
}

fn branch_tensors_mut(b: &mut ConsensusBranch) -> [&mut DenseMatrix; 5] {
    [&mut b.w_theta1, &mut b.w_theta2, &mut b.gate_w, &mut b.gate_b, &mut b.stack]
}

const GRU_NAMES: [&str; 9] = ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"];
const BRANCH_NAMES: [&str; 5] = ["w_theta1", "w_theta2", "gate_w", "gate_b", "stack"];

/// Stable names of every trainable tensor, in visiting order.
pub fn tensor_names() -> Vec<String> {
    let mut names = vec!["image.w_f".to_string(), "image.b_f".into(), "text.embed".into()];
    for dir in ["forward", "backward"] {
        names.extend(GRU_NAMES.iter().map(|n| format!("text.{dir}.{n}")));
    }
    for branch in ["visual", "textual"] {
        names.extend(BRANCH_NAMES.iter().map(|n| format!("consensus.{branch}.{n}")));
    }
    names
}

impl ModelParams {
    pub fn init<R: Rng>(rng: &mut R, cfg: &ModelConfig, feature_dim: usize, vocab_size: usize) -> Result<Self> {
        if cfg.embed_dim == 0 || cfg.word_dim == 0 || feature_dim == 0 || vocab_size == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        Ok(Self {
            image: ImageEncoderParams::init(rng, feature_dim, cfg.embed_dim),
            text: TextEncoderParams::init(rng, vocab_size, cfg.word_dim, cfg.embed_dim),
            consensus: ConsensusParams::init(rng, cfg.embed_dim, cfg.lambda, cfg.eta, cfg.mixture)?,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.image.embed_dim()
    }

    pub fn tensors(&self) -> Vec<&DenseMatrix> {
        let mut out = vec![&self.image.w_f, &self.image.b_f, &self.text.embed];
        out.extend(gru_tensors(&self.text.forward));
        out.extend(gru_tensors(&self.text.backward));
        out.extend(branch_tensors(&self.consensus.visual));
        out.extend(branch_tensors(&self.consensus.textual));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out = vec![&mut self.image.w_f, &mut self.image.b_f, &mut self.text.embed];
        out.extend(gru_tensors_mut(&mut self.text.forward));
        out.extend(gru_tensors_mut(&mut self.text.backward));
        out.extend(branch_tensors_mut(&mut self.consensus.visual));
        out.extend(branch_tensors_mut(&mut self.consensus.textual));
        out
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            image: self.image.zeros_like(),
            text: self.text.zeros_like(),
            consensus: ConsensusGrads::zeros(self.embed_dim()),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Every value, flattened in visiting order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::invalid(format!(
                "{} values for {} parameters",
                values.len(),
                self.parameter_count()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

/// Gradient accumulator shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub image: ImageEncoderParams,
    pub text: TextEncoderParams,
    pub consensus: ConsensusGrads,
}

impl ModelGrads {
    pub fn tensors(&self) -> Vec<&DenseMatrix> {
        let mut out = vec![&self.image.w_f, &self.image.b_f, &self.text.embed];
        out.extend(gru_tensors(&self.text.forward));
        out.extend(gru_tensors(&self.text.backward));
        out.extend(branch_tensors(&self.consensus.visual));
        out.extend(branch_tensors(&self.consensus.textual));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out = vec![&mut self.image.w_f, &mut self.image.b_f, &mut self.text.embed];
        out.extend(gru_tensors_mut(&mut self.text.forward));
        out.extend(gru_tensors_mut(&mut self.text.backward));
        out.extend(branch_tensors_mut(&mut self.consensus.visual));
        out.extend(branch_tensors_mut(&mut self.consensus.textual));
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sum_squares()).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            let s = max_norm / n;
            for t in self.tensors_mut() {
                t.scale_in_place(s);
            }
        }
        n
    }
}

/// One encoded image, with everything needed for backprop.
#[derive(Debug, Clone)]
pub struct ImageItemForward {
    encoder: ImageForward,
    local: DenseMatrix,
    consensus: ConsensusForward,
}

impl ImageItemForward {
    pub fn embedding(&self) -> &[f64] {
        self.consensus.output()
    }

    pub fn consensus(&self) -> &ConsensusForward {
        &self.consensus
    }
}

#[derive(Debug, Clone)]
pub struct CaptionItemForward {
    encoder: TextForward,
    local: DenseMatrix,
    consensus: ConsensusForward,
}

impl CaptionItemForward {
    pub fn embedding(&self) -> &[f64] {
        self.consensus.output()
    }

    pub fn consensus(&self) -> &ConsensusForward {
        &self.consensus
    }
}

pub fn image_forward(params: &ModelParams, corpus: &CorpusEmbedding, regions: &DenseMatrix) -> Result<ImageItemForward> {
    let encoder = encode_image_forward(regions, &params.image)?;
    let local = encoder.output();
    let consensus = consensus_forward(&local, corpus, &params.consensus, Modality::Image, None)?;
    Ok(ImageItemForward {
        encoder,
        local,
        consensus,
    })
}

pub fn image_backward(
    params: &ModelParams,
    corpus: &CorpusEmbedding,
    regions: &DenseMatrix,
    cache: &ImageItemForward,
    grad_out: &[f64],
    grads: &mut ModelGrads,
) {
    let g_local = consensus_backward(
        &cache.local,
        corpus,
        &params.consensus,
        &cache.consensus,
        grad_out,
        &mut grads.consensus,
    );
    encode_image_backward(regions, &cache.encoder, &g_local, &mut grads.image);
}

pub fn caption_forward(
    params: &ModelParams,
    corpus: &CorpusEmbedding,
    tokens: &[usize],
    label: &ConceptLabel,
) -> Result<CaptionItemForward> {
    let encoder = encode_text_forward(tokens, &params.text)?;
    let local = encoder.output();
    let consensus = consensus_forward(&local, corpus, &params.consensus, Modality::Text, Some(label))?;
    Ok(CaptionItemForward {
        encoder,
        local,
        consensus,
    })
}

pub fn caption_backward(
    params: &ModelParams,
    corpus: &CorpusEmbedding,
    cache: &CaptionItemForward,
    grad_out: &[f64],
    grads: &mut ModelGrads,
) {
    let g_local = consensus_backward(
        &cache.local,
        corpus,
        &params.consensus,
        &cache.consensus,
        grad_out,
        &mut grads.consensus,
    );
    encode_text_backward(&cache.encoder, &params.text, &g_local, &mut grads.text);
}

/// Read-only view of encoded inputs, indexed by dataset position.
#[derive(Debug, Clone, Copy)]
pub struct ItemStore<'a> {
    pub regions: &'a [DenseMatrix],
    pub tokens: &'a [Vec<usize>],
    pub labels: &'a [ConceptLabel],
    /// image of each caption
    pub caption_image: &'a [usize],
}

impl ItemStore<'_> {
    fn check_image(&self, i: usize) -> Result<()> {
        if i >= self.regions.len() {
            return Err(Error::invalid(format!("image index {i} out of range")));
        }
        Ok(())
    }

    fn check_caption(&self, c: usize) -> Result<()> {
        if c >= self.tokens.len() || c >= self.labels.len() {
            return Err(Error::invalid(format!("caption index {c} out of range")));
        }
        Ok(())
    }
}

pub fn embed_images(params: &ModelParams, corpus: &CorpusEmbedding, store: &ItemStore, images: &[usize]) -> Result<DenseMatrix> {
    let rows = images
        .iter()
        .map(|&i| {
            store.check_image(i)?;
            Ok(image_forward(params, corpus, &store.regions[i])?.embedding().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    DenseMatrix::from_rows(&rows)
}

pub fn embed_captions(
    params: &ModelParams,
    corpus: &CorpusEmbedding,
    store: &ItemStore,
    captions: &[usize],
) -> Result<DenseMatrix> {
    let rows = captions
        .iter()
        .map(|&c| {
            store.check_caption(c)?;
            Ok(caption_forward(params, corpus, &store.tokens[c], &store.labels[c])?
                .embedding()
                .to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    DenseMatrix::from_rows(&rows)
}

/// Dataset indices of a mined quadruple's members.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinedIndices {
    pub t_bar: usize,
    pub v_bar: usize,
    pub t_dbar: usize,
    pub v_dbar: usize,
}

/// Dataset indices of one training batch; entry `i` of each list is anchor `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub images: Vec<usize>,
    pub captions: Vec<usize>,
    pub mined: Option<Vec<MinedIndices>>,
}

/// In-batch hardest negatives of one anchor, as dataset indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorNegatives {
    pub anchor: usize,
    pub image: usize,
    pub caption: usize,
    /// `t⁻`
    pub neg_caption: usize,
    /// `v⁻`
    pub neg_image: usize,
}

pub enum MarginSource<'a> {
    Fixed(&'a [AnchorMargins]),
    /// called once per anchor after the forward pass
    PerAnchor(&'a dyn Fn(&AnchorNegatives) -> Result<AnchorMargins>),
}

pub enum WeightSource<'a> {
    Penalty { tau: f64, mu: f64 },
    Fixed(&'a [PenaltyWeights]),
}

pub enum Objective<'a> {
    Triplet {
        delta1: f64,
        negatives: NegativeMode,
    },
    Hierarchical {
        margins: MarginSource<'a>,
        weights: WeightSource<'a>,
        delta2: f64,
        negatives: NegativeMode,
        mapping: PairMapping,
    },
}

struct BatchForward {
    images: Vec<ImageItemForward>,
    captions: Vec<CaptionItemForward>,
    /// per anchor: t̄, v̄, t̿, v̿
    mined: Option<Vec<(CaptionItemForward, ImageItemForward, CaptionItemForward, ImageItemForward)>>,
}

fn rows_of<'a>(items: impl Iterator<Item = &'a [f64]>) -> Result<DenseMatrix> {
    DenseMatrix::from_rows(&items.map(<[f64]>::to_vec).collect::<Vec<_>>())
}

fn forward_batch(params: &ModelParams, corpus: &CorpusEmbedding, store: &ItemStore, batch: &BatchIndices) -> Result<BatchForward> {
    if batch.images.len() != batch.captions.len() {
        return Err(Error::invalid("batch image and caption lists differ in length"));
    }
    let img = |i: usize| {
        store.check_image(i)?;
        image_forward(params, corpus, &store.regions[i])
    };
    let cap = |c: usize| {
        store.check_caption(c)?;
        caption_forward(params, corpus, &store.tokens[c], &store.labels[c])
    };
    let images = batch.images.iter().map(|&i| img(i)).collect::<Result<Vec<_>>>()?;
    let captions = batch.captions.iter().map(|&c| cap(c)).collect::<Result<Vec<_>>>()?;
    let mined = match &batch.mined {
        None => None,
        Some(m) => {
            if m.len() != batch.images.len() {
                return Err(Error::invalid("mined quadruples do not cover every anchor"));
            }
            Some(
                m.iter()
                    .map(|q| Ok((cap(q.t_bar)?, img(q.v_bar)?, cap(q.t_dbar)?, img(q.v_dbar)?)))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
    };
    Ok(BatchForward {
        images,
        captions,
        mined,
    })
}

fn batch_embeddings(fwd: &BatchForward) -> Result<BatchEmbeddings> {
    let mined = match &fwd.mined {
        None => None,
        Some(m) => Some(MinedEmbeddings {
            t_bar: rows_of(m.iter().map(|x| x.0.embedding()))?,
            v_bar: rows_of(m.iter().map(|x| x.1.embedding()))?,
            t_dbar: rows_of(m.iter().map(|x| x.2.embedding()))?,
            v_dbar: rows_of(m.iter().map(|x| x.3.embedding()))?,
        }),
    };
    Ok(BatchEmbeddings {
        images: rows_of(fwd.images.iter().map(ImageItemForward::embedding))?,
        captions: rows_of(fwd.captions.iter().map(CaptionItemForward::embedding))?,
        mined,
    })
}

fn evaluate_objective(
    emb: &BatchEmbeddings,
    batch: &BatchIndices,
    objective: &Objective,
) -> Result<(LossBreakdown, PairMapping)> {
    match objective {
        Objective::Triplet { delta1, negatives } => {
            let sims = BatchSimilarities::from_embeddings(
                &BatchEmbeddings {
                    images: emb.images.clone(),
                    captions: emb.captions.clone(),
                    mined: None,
                },
                PairMapping::Partners,
            )?;
            Ok((triplet_loss_with(&sims, *delta1, *negatives)?, PairMapping::Partners))
        }
        Objective::Hierarchical {
            margins,
            weights,
            delta2,
            negatives,
            mapping,
        } => {
            if emb.mined.is_none() {
                return Err(Error::invalid("hierarchical objective needs mined quadruples"));
            }
            let sims = BatchSimilarities::from_embeddings(emb, *mapping)?;
            let b = sims.batch_size();
            let neg = hardest_negatives(sims.scores())?;
            let margins: Vec<AnchorMargins> = match margins {
                MarginSource::Fixed(m) => m.to_vec(),
                MarginSource::PerAnchor(f) => (0..b)
                    .map(|i| {
                        f(&AnchorNegatives {
                            anchor: i,
                            image: batch.images[i],
                            caption: batch.captions[i],
                            neg_caption: batch.captions[neg.caption_for_image[i]],
                            neg_image: batch.images[neg.image_for_caption[i]],
                        })
                    })
                    .collect::<Result<_>>()?,
            };
            let weights = match weights {
                WeightSource::Penalty { tau, mu } => batch_penalty_weights(&sims, *tau, *mu)?,
                WeightSource::Fixed(w) => w.to_vec(),
            };
            Ok((ahrl_total_with(&sims, &margins, &weights, *delta2, *negatives)?, *mapping))
        }
    }
}

/// Loss value only; used by gradient checks.
pub fn batch_loss(
    params: &ModelParams,
    corpus: &CorpusEmbedding,
    store: &ItemStore,
    batch: &BatchIndices,
    objective: &Objective,
) -> Result<LossBreakdown> {
    let fwd = forward_batch(params, corpus, store, batch)?;
    let emb = batch_embeddings(&fwd)?;
    Ok(evaluate_objective(&emb, batch, objective)?.0)
}

/// Loss and gradients with respect to every model parameter.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    corpus: &CorpusEmbedding,
    store: &ItemStore,
    batch: &BatchIndices,
    objective: &Objective,
) -> Result<(LossBreakdown, ModelGrads)> {
    let fwd = forward_batch(params, corpus, store, batch)?;
    let emb = batch_embeddings(&fwd)?;
    let (loss, mapping) = evaluate_objective(&emb, batch, objective)?;
    let g = embedding_grads(&emb, &loss, mapping)?;
    let mut grads = params.zero_grads();
    for (i, f) in fwd.images.iter().enumerate() {
        image_backward(params, corpus, &store.regions[batch.images[i]], f, g.images.row(i), &mut grads);
    }
    for (i, f) in fwd.captions.iter().enumerate() {
        caption_backward(params, corpus, f, g.captions.row(i), &mut grads);
    }
    if let (Some(m), Some(gm), Some(idx)) = (&fwd.mined, &g.mined, &batch.mined) {
        for (i, (t_bar, v_bar, t_dbar, v_dbar)) in m.iter().enumerate() {
            caption_backward(params, corpus, t_bar, gm.t_bar.row(i), &mut grads);
            image_backward(params, corpus, &store.regions[idx[i].v_bar], v_bar, gm.v_bar.row(i), &mut grads);
            caption_backward(params, corpus, t_dbar, gm.t_dbar.row(i), &mut grads);
            image_backward(params, corpus, &store.regions[idx[i].v_dbar], v_dbar, gm.v_dbar.row(i), &mut grads);
        }
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_visit_orders_agree() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let cfg = ModelConfig {
            embed_dim: 4,
            word_dim: 3,
            lambda: 10.0,
            eta: 0.35,
            mixture: CtlmMixture::Prior,
        };
        let p = ModelParams::init(&mut rng, &cfg, 5, 7).unwrap();
        let g = p.zero_grads();
        let shapes = |v: Vec<&DenseMatrix>| v.iter().map(|t| t.shape()).collect::<Vec<_>>();
        assert_eq!(shapes(p.tensors()), shapes(g.tensors()));
        assert_eq!(tensor_names().len(), p.tensors().len());
        let mut q = p.clone();
        let flat: Vec<f64> = p.flatten().iter().map(|x| x * 2.0).collect();
        q.assign_flat(&flat).unwrap();
        assert_eq!(q.flatten(), flat);
    }
}
