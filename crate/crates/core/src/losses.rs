//! Ranking losses over a mini-batch of aligned image/caption embeddings.
//!
//! Everything here works on similarity scores. [`BatchSimilarities`] is
//! built from embeddings, a loss function returns a [`LossBreakdown`] holding
//! `dL/dscore`, and [`embedding_grads`] chains that back to embedding rows.
//!
//! Symbols per anchor `i` (image `v`, caption `t`):
//! * `t⁻`, `v⁻`: hardest in-batch negatives of `v` and `t`
//! * `t̄`, `v̄`: mined negatives; `t̿`, `v̿`: their ground-truth partners
//!
//! ```text
//! L_fv = [Δ_v − S(v,t) + S(v,t⁻)]₊ + [Δ₂ − S(v,t) + S(v,t̄)]₊ + [Δ₂ − S(v,t) + S(pair_fv)]₊
//! L_ft = [Δ_t − S(v,t) + S(v⁻,t)]₊ + [Δ₂ − S(v,t) + S(v̄,t)]₊ + [Δ₂ − S(v,t) + S(pair_ft)]₊
//! ```
//! with `pair_fv = (v̄, t̄)` and `pair_ft = (v̿, t̿)` under [`PairMapping::Partners`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, DenseMatrix};

pub const DEFAULT_DELTA1: f64 = 0.2;
pub const DEFAULT_DELTA2: f64 = 0.0;
pub const DEFAULT_TAU: f64 = 1.5;
pub const DEFAULT_MU: f64 = 0.3;

/// `max(x, 0)`
pub fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

/// Which mined pair fills the third hinge of each hierarchical term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PairMapping {
    /// image-side term uses `(v̄, t̄)`, caption-side term uses `(v̿, t̿)`
    #[default]
    Partners,
    /// the two pairs swapped
    Swapped,
}

/// How in-batch negatives enter the first hinge of each term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NegativeMode {
    /// only the highest-scoring negative
    #[default]
    Hardest,
    /// one hinge per negative, summed
    Sum,
}

/// Embeddings of mined items, row `i` belongs to batch anchor `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedEmbeddings {
    pub t_bar: DenseMatrix,
    pub v_bar: DenseMatrix,
    pub t_dbar: DenseMatrix,
    pub v_dbar: DenseMatrix,
}

/// Final embeddings of one batch; row `i` of `images` matches row `i` of `captions`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings {
    pub images: DenseMatrix,
    pub captions: DenseMatrix,
    pub mined: Option<MinedEmbeddings>,
}

/// Scores involving mined items for one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AuxScores {
    /// `S(v, t̄)`
    pub v_tbar: f64,
    /// `S(v̄, t)`
    pub vbar_t: f64,
    /// third hinge of the image-side term
    pub pair_fv: f64,
    /// third hinge of the caption-side term
    pub pair_ft: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSimilarities {
    scores: DenseMatrix,
    aux: Option<Vec<AuxScores>>,
}

impl BatchSimilarities {
    pub fn new(scores: DenseMatrix, aux: Option<Vec<AuxScores>>) -> Result<Self> {
        if scores.rows() != scores.cols() {
            return Err(Error::Shape {
                op: "batch similarities (square)",
                left: scores.shape(),
                right: (scores.rows(), scores.rows()),
            });
        }
        if let Some(aux) = &aux {
            if aux.len() != scores.rows() {
                return Err(Error::invalid(format!(
                    "{} auxiliary score rows for a batch of {}",
                    aux.len(),
                    scores.rows()
                )));
            }
            let finite = aux
                .iter()
                .all(|a| [a.v_tbar, a.vbar_t, a.pair_fv, a.pair_ft].iter().all(|x| x.is_finite()));
            if !finite {
                return Err(Error::NonFinite {
                    what: "auxiliary scores".into(),
                    index: 0,
                });
            }
        }
        Ok(Self { scores, aux })
    }

    pub fn from_embeddings(emb: &BatchEmbeddings, mapping: PairMapping) -> Result<Self> {
        check_batch(emb)?;
        let scores = emb.images.matmul(&emb.captions.transpose())?;
        let aux = emb.mined.as_ref().map(|m| {
            (0..emb.images.rows())
                .map(|i| {
                    let v = emb.images.row(i);
                    let t = emb.captions.row(i);
                    let bar = dot(m.v_bar.row(i), m.t_bar.row(i));
                    let dbar = dot(m.v_dbar.row(i), m.t_dbar.row(i));
                    let (pair_fv, pair_ft) = match mapping {
                        PairMapping::Partners => (bar, dbar),
                        PairMapping::Swapped => (dbar, bar),
                    };
                    AuxScores {
                        v_tbar: dot(v, m.t_bar.row(i)),
                        vbar_t: dot(m.v_bar.row(i), t),
                        pair_fv,
                        pair_ft,
                    }
                })
                .collect()
        });
        Self::new(scores, aux)
    }

    pub fn batch_size(&self) -> usize {
        self.scores.rows()
    }

    pub fn scores(&self) -> &DenseMatrix {
        &self.scores
    }

    pub fn aux(&self) -> Option<&[AuxScores]> {
        self.aux.as_deref()
    }

    pub fn positive(&self, i: usize) -> f64 {
        self.scores.get(i, i)
    }
}

fn check_batch(emb: &BatchEmbeddings) -> Result<()> {
    let shape = emb.images.shape();
    if emb.captions.shape() != shape {
        return Err(Error::Shape {
            op: "batch embeddings",
            left: shape,
            right: emb.captions.shape(),
        });
    }
    if let Some(m) = &emb.mined {
        for part in [&m.t_bar, &m.v_bar, &m.t_dbar, &m.v_dbar] {
            if part.shape() != shape {
                return Err(Error::Shape {
                    op: "mined embeddings",
                    left: shape,
                    right: part.shape(),
                });
            }
        }
    }
    Ok(())
}

/// Hardest in-batch negatives; ties resolve to the lowest index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardestNegatives {
    /// `t⁻` for image anchor `i`: argmax over `j ≠ i` of `S[i][j]`
    pub caption_for_image: Vec<usize>,
    /// `v⁻` for caption anchor `i`: argmax over `j ≠ i` of `S[j][i]`
    pub image_for_caption: Vec<usize>,
}

pub fn hardest_negatives(scores: &DenseMatrix) -> Result<HardestNegatives> {
    let b = scores.rows();
    if b < 2 {
        return Err(Error::invalid(format!(
            "in-batch negatives need a batch of at least 2, got {b}"
        )));
    }
    let argmax = |f: &dyn Fn(usize) -> f64, skip: usize| {
        let mut best = usize::MAX;
        for j in (0..b).filter(|&j| j != skip) {
            if best == usize::MAX || f(j) > f(best) {
                best = j;
            }
        }
        best
    };
    let caption_for_image = (0..b).map(|i| argmax(&|j| scores.get(i, j), i)).collect();
    let image_for_caption = (0..b).map(|i| argmax(&|j| scores.get(j, i), i)).collect();
    Ok(HardestNegatives {
        caption_for_image,
        image_for_caption,
    })
}

/// Per-anchor loss weights; constants for gradient purposes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyWeights {
    pub w1: f64,
    pub w2: f64,
    pub tau: f64,
    pub mu: f64,
}

impl PenaltyWeights {
    pub fn unit() -> Self {
        Self {
            w1: 1.0,
            w2: 1.0,
            tau: 1.0,
            mu: 1.0,
        }
    }
}

/// `w1 = τ − (S(v,t̄) − S(v,t⁻))/μ`, `w2 = τ − (S(v̄,t) − S(v⁻,t))/μ`, clamped to `[0, τ]`.
pub fn penalty_weights(s_v_tbar: f64, s_v_tneg: f64, s_vbar_t: f64, s_vneg_t: f64, tau: f64, mu: f64) -> PenaltyWeights {
    let w = |gap: f64| (tau - gap / mu).clamp(0.0, tau);
    PenaltyWeights {
        w1: w(s_v_tbar - s_v_tneg),
        w2: w(s_vbar_t - s_vneg_t),
        tau,
        mu,
    }
}

/// Penalty weights for every anchor of a batch carrying mined scores.
pub fn batch_penalty_weights(batch: &BatchSimilarities, tau: f64, mu: f64) -> Result<Vec<PenaltyWeights>> {
    if mu.is_nan() || mu <= 0.0 {
        return Err(Error::invalid(format!("mu must be positive, got {mu}")));
    }
    let aux = batch
        .aux()
        .ok_or_else(|| Error::invalid("penalty weights need mined scores"))?;
    let neg = hardest_negatives(batch.scores())?;
    let s = batch.scores();
    Ok((0..batch.batch_size())
        .map(|i| {
            penalty_weights(
                aux[i].v_tbar,
                s.get(i, neg.caption_for_image[i]),
                aux[i].vbar_t,
                s.get(neg.image_for_caption[i], i),
                tau,
                mu,
            )
        })
        .collect())
}

/// The three image-side hinges for scalar scores.
pub fn fv_hinges(s_pos: f64, s_v_tneg: f64, s_v_tbar: f64, s_pair: f64, delta_v: f64, delta2: f64) -> [f64; 3] {
    [
        hinge(delta_v - s_pos + s_v_tneg),
        hinge(delta2 - s_pos + s_v_tbar),
        hinge(delta2 - s_pos + s_pair),
    ]
}

/// The three caption-side hinges for scalar scores.
pub fn ft_hinges(s_pos: f64, s_vneg_t: f64, s_vbar_t: f64, s_pair: f64, delta_t: f64, delta2: f64) -> [f64; 3] {
    [
        hinge(delta_t - s_pos + s_vneg_t),
        hinge(delta2 - s_pos + s_vbar_t),
        hinge(delta2 - s_pos + s_pair),
    ]
}

/// Margins of one anchor's first hinges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorMargins {
    pub delta_v: f64,
    pub delta_t: f64,
}

impl AnchorMargins {
    pub fn fixed(delta: f64) -> Self {
        Self {
            delta_v: delta,
            delta_t: delta,
        }
    }
}

/// Hinge values of one anchor, image side then caption side.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AnchorTerms {
    pub fv: [f64; 3],
    pub ft: [f64; 3],
}

impl AnchorTerms {
    pub fn fv_sum(&self) -> f64 {
        self.fv.iter().sum()
    }

    pub fn ft_sum(&self) -> f64 {
        self.ft.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: Vec<AnchorTerms>,
    pub weights: Vec<PenaltyWeights>,
    pub margins: Vec<AnchorMargins>,
    pub delta2: f64,
    /// `dL/dS`, same shape as the score matrix
    pub grad_scores: DenseMatrix,
    /// `dL/d(aux score)` per anchor; absent for plain triplet batches
    pub grad_aux: Option<Vec<AuxScores>>,
}

impl LossBreakdown {
    /// Mean over anchors of each of the six hinges.
    pub fn term_means(&self) -> [f64; 6] {
        let mut out = [0.0; 6];
        for t in &self.terms {
            for k in 0..3 {
                out[k] += t.fv[k];
                out[3 + k] += t.ft[k];
            }
        }
        let n = self.terms.len().max(1) as f64;
        out.map(|x| x / n)
    }

    pub fn weight_means(&self) -> (f64, f64) {
        mean_pair(self.weights.iter().map(|w| (w.w1, w.w2)))
    }

    pub fn margin_means(&self) -> (f64, f64) {
        mean_pair(self.margins.iter().map(|m| (m.delta_v, m.delta_t)))
    }
}

fn mean_pair(it: impl ExactSizeIterator<Item = (f64, f64)>) -> (f64, f64) {
    let n = it.len().max(1) as f64;
    let (a, b) = it.fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    (a / n, b / n)
}

struct LossSpec<'a> {
    margins: &'a [AnchorMargins],
    weights: &'a [PenaltyWeights],
    delta2: f64,
    use_mined: bool,
    negatives: NegativeMode,
}

fn evaluate(batch: &BatchSimilarities, spec: &LossSpec) -> Result<LossBreakdown> {
    let b = batch.batch_size();
    let neg = hardest_negatives(batch.scores())?;
    if spec.margins.len() != b || spec.weights.len() != b {
        return Err(Error::invalid(format!(
            "batch of {b} with {} margins and {} weights",
            spec.margins.len(),
            spec.weights.len()
        )));
    }
    let aux = if spec.use_mined {
        Some(
            batch
                .aux()
                .ok_or_else(|| Error::invalid("hierarchical loss needs mined scores for every anchor"))?,
        )
    } else {
        None
    };
    let s = batch.scores();
    let mut grad_scores = DenseMatrix::zeros(b, b);
    let mut grad_aux = aux.map(|_| vec![AuxScores::default(); b]);
    let mut terms = Vec::with_capacity(b);
    let mut total = 0.0;

    for i in 0..b {
        let m = spec.margins[i];
        let w = spec.weights[i];
        let pos = s.get(i, i);
        let mut t = AnchorTerms::default();

        // first hinges: in-batch negatives
        match spec.negatives {
            NegativeMode::Hardest => {
                let j = neg.caption_for_image[i];
                t.fv[0] = hinge(m.delta_v - pos + s.get(i, j));
                if t.fv[0] > 0.0 {
                    *grad_at(&mut grad_scores, i, i) -= w.w1;
                    *grad_at(&mut grad_scores, i, j) += w.w1;
                }
                let k = neg.image_for_caption[i];
                t.ft[0] = hinge(m.delta_t - pos + s.get(k, i));
                if t.ft[0] > 0.0 {
                    *grad_at(&mut grad_scores, i, i) -= w.w2;
                    *grad_at(&mut grad_scores, k, i) += w.w2;
                }
            }
            NegativeMode::Sum => {
                for j in (0..b).filter(|&j| j != i) {
                    let h = hinge(m.delta_v - pos + s.get(i, j));
                    if h > 0.0 {
                        t.fv[0] += h;
                        *grad_at(&mut grad_scores, i, i) -= w.w1;
                        *grad_at(&mut grad_scores, i, j) += w.w1;
                    }
                    let h = hinge(m.delta_t - pos + s.get(j, i));
                    if h > 0.0 {
                        t.ft[0] += h;
                        *grad_at(&mut grad_scores, i, i) -= w.w2;
                        *grad_at(&mut grad_scores, j, i) += w.w2;
                    }
                }
            }
        }

        if let (Some(aux), Some(ga)) = (aux, grad_aux.as_mut()) {
            let a = aux[i];
            let fv = fv_hinges(pos, 0.0, a.v_tbar, a.pair_fv, 0.0, spec.delta2);
            let ft = ft_hinges(pos, 0.0, a.vbar_t, a.pair_ft, 0.0, spec.delta2);
            t.fv[1] = fv[1];
            t.fv[2] = fv[2];
            t.ft[1] = ft[1];
            t.ft[2] = ft[2];
            let g = &mut ga[i];
            let mut pos_grad = 0.0;
            if fv[1] > 0.0 {
                pos_grad -= w.w1;
                g.v_tbar += w.w1;
            }
            if fv[2] > 0.0 {
                pos_grad -= w.w1;
                g.pair_fv += w.w1;
            }
            if ft[1] > 0.0 {
                pos_grad -= w.w2;
                g.vbar_t += w.w2;
            }
            if ft[2] > 0.0 {
                pos_grad -= w.w2;
                g.pair_ft += w.w2;
            }
            *grad_at(&mut grad_scores, i, i) += pos_grad;
        }

        total += w.w1 * t.fv_sum() + w.w2 * t.ft_sum();
        terms.push(t);
    }

    Ok(LossBreakdown {
        total,
        terms,
        weights: spec.weights.to_vec(),
        margins: spec.margins.to_vec(),
        delta2: spec.delta2,
        grad_scores,
        grad_aux,
    })
}

fn grad_at(g: &mut DenseMatrix, r: usize, c: usize) -> &mut f64 {
    let cols = g.cols();
    &mut g.data_mut()[r * cols + c]
}

/// `Σ_i [Δ₁ − S(v,t) + S(v,t⁻)]₊ + [Δ₁ − S(v,t) + S(v⁻,t)]₊`
pub fn triplet_loss(batch: &BatchSimilarities, delta1: f64) -> Result<LossBreakdown> {
    triplet_loss_with(batch, delta1, NegativeMode::Hardest)
}

pub fn triplet_loss_with(batch: &BatchSimilarities, delta1: f64, negatives: NegativeMode) -> Result<LossBreakdown> {
    let b = batch.batch_size();
    let margins = vec![AnchorMargins::fixed(delta1); b];
    let weights = vec![PenaltyWeights::unit(); b];
    evaluate(
        batch,
        &LossSpec {
            margins: &margins,
            weights: &weights,
            delta2: 0.0,
            use_mined: false,
            negatives,
        },
    )
}

/// Per-anchor `L_fv` (unweighted).
pub fn hier_loss_fv(batch: &BatchSimilarities, margins: &[AnchorMargins], delta2: f64) -> Result<Vec<f64>> {
    let weights = vec![PenaltyWeights::unit(); batch.batch_size()];
    let out = ahrl_total(batch, margins, &weights, delta2)?;
    Ok(out.terms.iter().map(AnchorTerms::fv_sum).collect())
}

/// Per-anchor `L_ft` (unweighted).
pub fn hier_loss_ft(batch: &BatchSimilarities, margins: &[AnchorMargins], delta2: f64) -> Result<Vec<f64>> {
    let weights = vec![PenaltyWeights::unit(); batch.batch_size()];
    let out = ahrl_total(batch, margins, &weights, delta2)?;
    Ok(out.terms.iter().map(AnchorTerms::ft_sum).collect())
}

/// `Σ_i w1·L_fv + w2·L_ft` with per-anchor margins and frozen weights.
pub fn ahrl_total(
    batch: &BatchSimilarities,
    margins: &[AnchorMargins],
    weights: &[PenaltyWeights],
    delta2: f64,
) -> Result<LossBreakdown> {
    ahrl_total_with(batch, margins, weights, delta2, NegativeMode::Hardest)
}

pub fn ahrl_total_with(
    batch: &BatchSimilarities,
    margins: &[AnchorMargins],
    weights: &[PenaltyWeights],
    delta2: f64,
    negatives: NegativeMode,
) -> Result<LossBreakdown> {
    evaluate(
        batch,
        &LossSpec {
            margins,
            weights,
            delta2,
            use_mined: true,
            negatives,
        },
    )
}

/// The fixed-margin hierarchical loss: every anchor uses `Δ₁` for both first hinges.
pub fn hrl_total(batch: &BatchSimilarities, delta1: f64, weights: &[PenaltyWeights], delta2: f64) -> Result<LossBreakdown> {
    let margins = vec![AnchorMargins::fixed(delta1); batch.batch_size()];
    ahrl_total(batch, &margins, weights, delta2)
}

/// Gradients with respect to every embedding row of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrads {
    pub images: DenseMatrix,
    pub captions: DenseMatrix,
    pub mined: Option<MinedEmbeddings>,
}

pub fn embedding_grads(emb: &BatchEmbeddings, loss: &LossBreakdown, mapping: PairMapping) -> Result<EmbeddingGrads> {
    check_batch(emb)?;
    let g = &loss.grad_scores;
    if g.rows() != emb.images.rows() {
        return Err(Error::Shape {
            op: "embedding_grads",
            left: g.shape(),
            right: emb.images.shape(),
        });
    }
    let mut images = g.matmul(&emb.captions)?;
    let mut captions = g.transpose().matmul(&emb.images)?;
    let mined = match (&loss.grad_aux, &emb.mined) {
        (None, _) => None,
        (Some(_), None) => return Err(Error::invalid("loss used mined scores but batch has no mined embeddings")),
        (Some(ga), Some(m)) => {
            let mut out = MinedEmbeddings {
                t_bar: m.t_bar.zeros_like(),
                v_bar: m.v_bar.zeros_like(),
                t_dbar: m.t_dbar.zeros_like(),
                v_dbar: m.v_dbar.zeros_like(),
            };
            for (i, a) in ga.iter().enumerate() {
                axpy(images.row_mut(i), a.v_tbar, m.t_bar.row(i));
                axpy(out.t_bar.row_mut(i), a.v_tbar, emb.images.row(i));
                axpy(captions.row_mut(i), a.vbar_t, m.v_bar.row(i));
                axpy(out.v_bar.row_mut(i), a.vbar_t, emb.captions.row(i));
                let (g_bar, g_dbar) = match mapping {
                    PairMapping::Partners => (a.pair_fv, a.pair_ft),
                    PairMapping::Swapped => (a.pair_ft, a.pair_fv),
                };
                axpy(out.v_bar.row_mut(i), g_bar, m.t_bar.row(i));
                axpy(out.t_bar.row_mut(i), g_bar, m.v_bar.row(i));
                axpy(out.v_dbar.row_mut(i), g_dbar, m.t_dbar.row(i));
                axpy(out.t_dbar.row_mut(i), g_dbar, m.v_dbar.row(i));
            }
            Some(out)
        }
    };
    Ok(EmbeddingGrads {
        images,
        captions,
        mined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, l2_normalize};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch2(pos: f64, v_tneg: f64, vneg_t: f64) -> BatchSimilarities {
        // anchor 0 sees the given scores; anchor 1 is comfortably satisfied
        let s = DenseMatrix::from_rows(&[vec![pos, v_tneg], vec![vneg_t, 1.0]]).unwrap();
        BatchSimilarities::new(s, None).unwrap()
    }

    #[test]
    fn triplet_satisfied_margins_give_zero() {
        let b = batch2(0.9, 0.2, 0.1);
        let l = triplet_loss(&b, 0.2).unwrap();
        assert_eq!(l.terms[0].fv[0] + l.terms[0].ft[0], 0.0);
    }

    #[test]
    fn triplet_direct_evaluation() {
        let b = batch2(0.5, 0.6, 0.5);
        let l = triplet_loss(&b, 0.2).unwrap();
        let anchor0 = l.terms[0].fv[0] + l.terms[0].ft[0];
        assert!((anchor0 - 0.5).abs() < 1e-12);
        assert!((l.terms[0].fv[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn triplet_identical_embeddings() {
        let b = 5;
        let s = DenseMatrix::new(b, b, vec![1.0; b * b]).unwrap();
        let l = triplet_loss(&BatchSimilarities::new(s, None).unwrap(), 0.2).unwrap();
        assert!((l.total - 2.0 * b as f64 * 0.2).abs() < 1e-12);
        for t in &l.terms {
            assert!((t.fv[0] - 0.2).abs() < 1e-15 && (t.ft[0] - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn triplet_needs_two() {
        let s = DenseMatrix::new(1, 1, vec![1.0]).unwrap();
        assert!(triplet_loss(&BatchSimilarities::new(s, None).unwrap(), 0.2).is_err());
    }

    #[test]
    fn hardest_negative_ties_pick_lowest() {
        let s = DenseMatrix::from_rows(&[
            vec![0.9, 0.5, 0.5],
            vec![0.5, 0.9, 0.5],
            vec![0.5, 0.5, 0.9],
        ])
        .unwrap();
        let n = hardest_negatives(&s).unwrap();
        assert_eq!(n.caption_for_image, vec![1, 0, 0]);
        assert_eq!(n.image_for_caption, vec![1, 0, 0]);
    }

    #[test]
    fn penalty_weight_cases() {
        let w = penalty_weights(0.4, 0.4, 0.1, 0.1, DEFAULT_TAU, DEFAULT_MU);
        assert_eq!((w.w1, w.w2), (1.5, 1.5));
        let w = penalty_weights(0.7, 0.4, 0.6, 0.3, 1.5, 0.3);
        assert!((w.w1 - 0.5).abs() < 1e-12 && (w.w2 - 0.5).abs() < 1e-12);
        let w = penalty_weights(1.0, 0.4, 0.6, 0.0, 1.5, 0.3);
        assert_eq!((w.w1, w.w2), (0.0, 0.0));
        // mined negative easier than in-batch one: capped at tau
        let w = penalty_weights(0.0, 0.9, 0.0, 0.9, 1.5, 0.3);
        assert_eq!((w.w1, w.w2), (1.5, 1.5));
    }

    #[test]
    fn fv_direct_evaluation() {
        let h = fv_hinges(0.6, 0.4, 0.7, 0.2, 0.5, 0.0);
        assert!((h[0] - 0.3).abs() < 1e-12);
        assert!((h[1] - 0.1).abs() < 1e-12);
        assert_eq!(h[2], 0.0);
        assert!((h.iter().sum::<f64>() - 0.4).abs() < 1e-12);
        let far = fv_hinges(0.9, 0.1, 0.2, 0.0, 0.5, 0.0);
        assert_eq!(far, [0.0; 3]);
    }

    #[test]
    fn ft_mirror_and_boundary() {
        assert_eq!(ft_hinges(0.6, 0.4, 0.7, 0.2, 0.5, 0.0), fv_hinges(0.6, 0.4, 0.7, 0.2, 0.5, 0.0));
        let h = ft_hinges(0.5, 0.1, 0.6, 0.45, 0.3, 0.1);
        assert!((h[0] - 0.0).abs() < 1e-12);
        assert!((h[1] - 0.2).abs() < 1e-12);
        assert!((h[2] - 0.05).abs() < 1e-12);
        assert_eq!(ft_hinges(0.5, 0.0, 0.0, 0.5, 0.0, 0.0)[2], 0.0);
    }

    fn aux_batch(b: usize, rng: &mut ChaCha8Rng) -> BatchSimilarities {
        let s = DenseMatrix::new(b, b, (0..b * b).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let aux = (0..b)
            .map(|_| AuxScores {
                v_tbar: rng.gen_range(-1.0..1.0),
                vbar_t: rng.gen_range(-1.0..1.0),
                pair_fv: rng.gen_range(-1.0..1.0),
                pair_ft: rng.gen_range(-1.0..1.0),
            })
            .collect();
        BatchSimilarities::new(s, Some(aux)).unwrap()
    }

    #[test]
    fn unit_weights_give_plain_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = aux_batch(4, &mut rng);
        let m = vec![AnchorMargins { delta_v: 0.3, delta_t: 0.1 }; 4];
        let l = ahrl_total(&batch, &m, &[PenaltyWeights::unit(); 4], 0.0).unwrap();
        let fv: f64 = hier_loss_fv(&batch, &m, 0.0).unwrap().iter().sum();
        let ft: f64 = hier_loss_ft(&batch, &m, 0.0).unwrap().iter().sum();
        assert!((l.total - fv - ft).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_silences_image_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = aux_batch(4, &mut rng);
        let m = vec![AnchorMargins::fixed(2.0); 4];
        let w = vec![
            PenaltyWeights {
                w1: 0.0,
                w2: 1.0,
                tau: 1.5,
                mu: 0.3,
            };
            4
        ];
        let l = ahrl_total(&batch, &m, &w, 2.0).unwrap();
        for a in l.grad_aux.as_ref().unwrap() {
            assert_eq!(a.v_tbar, 0.0);
            assert_eq!(a.pair_fv, 0.0);
        }
        let expect: f64 = l.terms.iter().map(AnchorTerms::ft_sum).sum();
        assert!((l.total - expect).abs() < 1e-12);
    }

    #[test]
    fn inactive_mined_terms_reduce_to_triplet() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let b = 4;
            let s = DenseMatrix::new(b, b, (0..b * b).map(|_| rng.gen_range(-0.9..1.0)).collect()).unwrap();
            let aux = vec![
                AuxScores {
                    v_tbar: -1.0,
                    vbar_t: -1.0,
                    pair_fv: -1.0,
                    pair_ft: -1.0
                };
                b
            ];
            let with = BatchSimilarities::new(s.clone(), Some(aux)).unwrap();
            let plain = BatchSimilarities::new(s, None).unwrap();
            let a = hrl_total(&with, 0.2, &[PenaltyWeights::unit(); 4], 0.0).unwrap();
            let t = triplet_loss(&plain, 0.2).unwrap();
            assert!((a.total - t.total).abs() < 1e-12);
            assert_eq!(a.grad_scores, t.grad_scores);
        }
    }

    #[test]
    fn positive_homogeneity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = aux_batch(4, &mut rng);
        let m = vec![AnchorMargins { delta_v: 0.2, delta_t: 0.4 }; 4];
        let w = vec![PenaltyWeights::unit(); 4];
        let base = ahrl_total(&batch, &m, &w, 0.1).unwrap().total;
        let c = 2.5;
        let mut s = batch.scores().clone();
        s.scale_in_place(c);
        let aux = batch
            .aux()
            .unwrap()
            .iter()
            .map(|a| AuxScores {
                v_tbar: a.v_tbar * c,
                vbar_t: a.vbar_t * c,
                pair_fv: a.pair_fv * c,
                pair_ft: a.pair_ft * c,
            })
            .collect();
        let scaled = BatchSimilarities::new(s, Some(aux)).unwrap();
        let m2: Vec<_> = m
            .iter()
            .map(|x| AnchorMargins {
                delta_v: x.delta_v * c,
                delta_t: x.delta_t * c,
            })
            .collect();
        let got = ahrl_total(&scaled, &m2, &w, 0.1 * c).unwrap().total;
        assert!((got - c * base).abs() < 1e-12);
    }

    #[test]
    fn missing_mined_scores_is_an_error() {
        let b = batch2(0.5, 0.1, 0.1);
        assert!(ahrl_total(&b, &[AnchorMargins::fixed(0.2); 2], &[PenaltyWeights::unit(); 2], 0.0).is_err());
    }

    fn random_unit_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> DenseMatrix {
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|_| l2_normalize(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap())
            .collect();
        DenseMatrix::from_rows(&rows).unwrap()
    }

    fn pack(e: &BatchEmbeddings) -> Vec<f64> {
        let m = e.mined.as_ref().unwrap();
        [&e.images, &e.captions, &m.t_bar, &m.v_bar, &m.t_dbar, &m.v_dbar]
            .iter()
            .flat_map(|x| x.data().to_vec())
            .collect()
    }

    fn unpack(x: &[f64], b: usize, d: usize) -> BatchEmbeddings {
        let part = |k: usize| DenseMatrix::new(b, d, x[k * b * d..(k + 1) * b * d].to_vec()).unwrap();
        BatchEmbeddings {
            images: part(0),
            captions: part(1),
            mined: Some(MinedEmbeddings {
                t_bar: part(2),
                v_bar: part(3),
                t_dbar: part(4),
                v_dbar: part(5),
            }),
        }
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        for seed in 0..20 {
            for mapping in [PairMapping::Partners, PairMapping::Swapped] {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (b, d) = (4, 6);
                let emb = BatchEmbeddings {
                    images: random_unit_rows(&mut rng, b, d),
                    captions: random_unit_rows(&mut rng, b, d),
                    mined: Some(MinedEmbeddings {
                        t_bar: random_unit_rows(&mut rng, b, d),
                        v_bar: random_unit_rows(&mut rng, b, d),
                        t_dbar: random_unit_rows(&mut rng, b, d),
                        v_dbar: random_unit_rows(&mut rng, b, d),
                    }),
                };
                let margins: Vec<_> = (0..b)
                    .map(|_| AnchorMargins {
                        delta_v: rng.gen_range(0.1..0.8),
                        delta_t: rng.gen_range(0.1..0.8),
                    })
                    .collect();
                let batch = BatchSimilarities::from_embeddings(&emb, mapping).unwrap();
                let weights = batch_penalty_weights(&batch, DEFAULT_TAU, DEFAULT_MU).unwrap();
                let loss = ahrl_total(&batch, &margins, &weights, 0.1).unwrap();
                let g = embedding_grads(&emb, &loss, mapping).unwrap();
                let analytic = pack(&EmbeddingGrads::into_batch(g));
                let report = finite_diff_check(
                    "ahrl embeddings",
                    |x| {
                        let e = unpack(x.data(), b, d);
                        let s = BatchSimilarities::from_embeddings(&e, mapping).unwrap();
                        ahrl_total(&s, &margins, &weights, 0.1).unwrap().total
                    },
                    &DenseMatrix::row_vector(&pack(&emb)).unwrap(),
                    &DenseMatrix::row_vector(&analytic).unwrap(),
                    1e-5,
                )
                .unwrap();
                assert!(report.passes(1e-4), "seed {seed}: {:?}", report.worst());
            }
        }
    }

    impl EmbeddingGrads {
        fn into_batch(self) -> BatchEmbeddings {
            BatchEmbeddings {
                images: self.images,
                captions: self.captions,
                mined: self.mined,
            }
        }
    }
}
