//! Two-phase training: the plain triplet loss first, then the hierarchical
//! loss over mined quadruples with penalty weights and CIDEr margins.

mod checkpoint;
mod optimizer;

use std::cell::RefCell;
use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cider::{build_idf, cider_from_vectors, margin_from_scores, CaptionVector};
use crate::consensus::{ConceptLabel, CtlmMixture};
use crate::dataio::{Dataset, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_embeddings, RecallReport};
use crate::losses::{AnchorMargins, NegativeMode, PairMapping, DEFAULT_DELTA1, DEFAULT_DELTA2, DEFAULT_MU, DEFAULT_TAU};
use crate::mining::{draw_quadruple, mine_in_chunks, TopPositionLists};
use crate::model::{
    batch_loss_and_grads, embed_captions, embed_images, AnchorNegatives, BatchIndices, ItemStore, MarginSource,
    MinedIndices, ModelConfig, ModelParams, Objective, WeightSource,
};
use crate::pairs::GroundTruth;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use optimizer::{adam_update, optimizer_step, AdamSettings, OptimizerKind, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub phase1_lr: f64,
    pub phase2_lr: f64,
    pub batch_size: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// global-norm clip; 0 disables clipping
    pub grad_clip: f64,
    pub embed_dim: usize,
    pub word_dim: usize,
    pub lambda: f64,
    pub eta: f64,
    pub ctlm_mixture: CtlmMixture,
    pub delta1: f64,
    pub delta2: f64,
    pub tau: f64,
    pub mu: f64,
    pub beta: f64,
    pub delta_max: f64,
    pub negatives: NegativeMode,
    pub pair_mapping: PairMapping,
    /// mining chunk size in images
    pub mine_images: usize,
    /// caption budget per mining chunk
    pub mine_captions: usize,
    pub top_k: usize,
    pub top_q: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            phase1_lr: 2e-4,
            phase2_lr: 2e-5,
            batch_size: 16,
            phase1_epochs: 30,
            phase2_epochs: 15,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 2.0,
            embed_dim: 32,
            word_dim: 32,
            lambda: 10.0,
            eta: 0.35,
            ctlm_mixture: CtlmMixture::Prior,
            delta1: DEFAULT_DELTA1,
            delta2: DEFAULT_DELTA2,
            tau: DEFAULT_TAU,
            mu: DEFAULT_MU,
            beta: 10.0,
            delta_max: 1.0,
            negatives: NegativeMode::Hardest,
            pair_mapping: PairMapping::Partners,
            mine_images: 40,
            mine_captions: 200,
            top_k: 6,
            top_q: 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive_rate = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        positive_rate("phase1_lr", self.phase1_lr)?;
        positive_rate("phase2_lr", self.phase2_lr)?;
        positive_rate("lambda", self.lambda)?;
        positive_rate("beta", self.beta)?;
        positive_rate("adam_eps", self.adam_eps)?;
        if self.batch_size < 2 {
            return Err(Error::invalid(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.embed_dim == 0 || self.word_dim == 0 {
            return Err(Error::invalid("embed_dim and word_dim must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        for (name, v) in [
            ("grad_clip", self.grad_clip),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("tau", self.tau),
            ("mu", self.mu),
            ("delta_max", self.delta_max),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.top_k == 0 || self.top_q == 0 || self.mine_images == 0 {
            return Err(Error::invalid("top_k, top_q and mine_images must be positive"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            word_dim: self.word_dim,
            lambda: self.lambda,
            eta: self.eta,
            mixture: self.ctlm_mixture,
        }
    }

    pub fn adam(&self) -> AdamSettings {
        AdamSettings {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    One,
    Two,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }
}

/// Mined top lists in dataset indices; entries of non-training items are empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedLists {
    pub p_vs: Vec<Vec<usize>>,
    pub p_sv: Vec<Vec<usize>>,
    pub k: usize,
    pub q: usize,
}

impl MinedLists {
    pub fn as_top_lists(&self) -> TopPositionLists {
        TopPositionLists {
            p_vs: self.p_vs.clone(),
            p_sv: self.p_sv.clone(),
            k: self.k,
            q: self.q,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub phase: Phase,
    /// epochs completed in the current phase
    pub epoch: usize,
    /// updates completed across both phases
    pub step: usize,
    pub mined: Option<MinedLists>,
}

impl ModelState {
    pub fn init(cfg: &TrainConfig, data: &TrainingData) -> Result<Self> {
        cfg.validate()?;
        if cfg.embed_dim != data.dataset.corpus.dim() {
            return Err(Error::invalid(format!(
                "embed_dim {} differs from the corpus width {}",
                cfg.embed_dim,
                data.dataset.corpus.dim()
            )));
        }
        let mut rng = phase_rng(cfg.seed, 0, 0);
        let params = ModelParams::init(&mut rng, &cfg.model_config(), data.dataset.feature_dim(), data.vocab.len())?;
        Ok(Self {
            optimizer: OptimizerState::new(cfg.optimizer, &params),
            params,
            phase: Phase::One,
            epoch: 0,
            step: 0,
            mined: None,
        })
    }

    fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.params.tensors().iter().position(|t| !t.all_finite()) {
            return Err(Error::NonFinite {
                what: "model parameters".into(),
                index: i,
            });
        }
        if !self.optimizer.all_finite() {
            return Err(Error::NonFinite {
                what: "optimizer moments".into(),
                index: self.step,
            });
        }
        Ok(())
    }
}

/// Encoded captions and CIDEr vectors derived from a dataset.
pub struct TrainingData<'a> {
    pub dataset: &'a Dataset,
    pub vocab: Vocabulary,
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<ConceptLabel>,
    pub truth: GroundTruth,
    cider_vectors: Vec<CaptionVector>,
}

impl<'a> TrainingData<'a> {
    /// Builds the vocabulary from training captions unless one is given.
    pub fn new(dataset: &'a Dataset, vocab: Option<Vocabulary>) -> Result<Self> {
        let vocab = vocab.unwrap_or_else(|| {
            Vocabulary::build(
                dataset
                    .train
                    .iter()
                    .flat_map(|&i| dataset.image_captions[i].iter().map(|&c| &dataset.caption_tokens[c])),
            )
        });
        let tokens = dataset.caption_tokens.iter().map(|t| vocab.encode(t)).collect();
        let labels = dataset
            .caption_tokens
            .iter()
            .map(|t| ConceptLabel::from_tokens(t, &dataset.corpus))
            .collect();
        let truth = GroundTruth::from_owners(dataset.caption_image.clone(), dataset.n_images())?;
        let idf = build_idf(&dataset.reference_corpus(&dataset.train))?;
        let cider_vectors = dataset.caption_tokens.iter().map(|t| CaptionVector::new(t, &idf)).collect();
        Ok(Self {
            dataset,
            vocab,
            tokens,
            labels,
            truth,
            cider_vectors,
        })
    }

    pub fn store(&self) -> ItemStore<'_> {
        ItemStore {
            regions: &self.dataset.regions,
            tokens: &self.tokens,
            labels: &self.labels,
            caption_image: &self.dataset.caption_image,
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub w1: f64,
    pub w2: f64,
    pub delta_v: f64,
    pub delta_t: f64,
}

impl StepMetrics {
    pub const TSV_HEADER: &'static str = "phase\tepoch\tstep\tloss\tgrad_norm\tw1\tw2\tdelta_v\tdelta_t";

    pub fn to_tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.9}\t{:.9}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.phase.number(),
            self.epoch,
            self.step,
            self.loss,
            self.grad_norm,
            self.w1,
            self.w2,
            self.delta_v,
            self.delta_t
        )
    }
}

/// Receives progress from the training loops.
pub trait TrainObserver {
    fn on_step(&mut self, _metrics: &StepMetrics) -> Result<()> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _state: &ModelState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for Vec<StepMetrics> {
    fn on_step(&mut self, metrics: &StepMetrics) -> Result<()> {
        self.push(*metrics);
        Ok(())
    }
}

/// Generator for one (phase, epoch); phase 0 is initialization.
pub fn phase_rng(seed: u64, phase: u8, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((u64::from(phase) << 32) | epoch as u64);
    rng
}

/// One random caption per training image, shuffled into batches. A last
/// batch smaller than 2 joins the one before it.
pub fn epoch_batches(
    train_images: &[usize],
    image_captions: &[Vec<usize>],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<(usize, usize)>>> {
    if train_images.len() < 2 {
        return Err(Error::invalid("training needs at least 2 images"));
    }
    let mut pairs = train_images
        .iter()
        .map(|&i| {
            let caps = &image_captions[i];
            caps.choose(rng)
                .map(|&c| (i, c))
                .ok_or_else(|| Error::invalid(format!("image {i} has no caption")))
        })
        .collect::<Result<Vec<_>>>()?;
    pairs.shuffle(rng);
    let mut batches: Vec<Vec<(usize, usize)>> = pairs.chunks(batch_size).map(<[_]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("at least one batch").extend(tail);
    }
    Ok(batches)
}

fn apply_update(
    cfg: &TrainConfig,
    state: &mut ModelState,
    data: &TrainingData,
    batch: &BatchIndices,
    objective: &Objective,
    lr: f64,
) -> Result<StepMetrics> {
    // a non-finite intermediate means the loss itself is undefined
    let (loss, mut grads) = batch_loss_and_grads(&state.params, &data.dataset.corpus, &data.store(), batch, objective)
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::NanLoss { step: state.step },
            other => other,
        })?;
    if !loss.total.is_finite() {
        return Err(Error::NanLoss { step: state.step });
    }
    let grad_norm = if cfg.grad_clip > 0.0 {
        grads.clip_global_norm(cfg.grad_clip)
    } else {
        grads.global_norm()
    };
    optimizer_step(&mut state.params, &mut state.optimizer, &grads, lr, &cfg.adam())?;
    state.check_finite()?;
    let (w1, w2) = loss.weight_means();
    let (delta_v, delta_t) = loss.margin_means();
    let metrics = StepMetrics {
        phase: state.phase,
        epoch: state.epoch,
        step: state.step,
        loss: loss.total,
        grad_norm,
        w1,
        w2,
        delta_v,
        delta_t,
    };
    state.step += 1;
    Ok(metrics)
}

/// Phase 1: triplet loss over in-batch hardest negatives. Resumes from
/// `state.epoch` and stops after `cfg.phase1_epochs` epochs in total.
pub fn run_phase1(
    cfg: &TrainConfig,
    data: &TrainingData,
    mut state: ModelState,
    observer: &mut dyn TrainObserver,
) -> Result<ModelState> {
    cfg.validate()?;
    if state.phase != Phase::One {
        return Err(Error::invalid("phase 1 cannot resume from a phase 2 state"));
    }
    let objective = Objective::Triplet {
        delta1: cfg.delta1,
        negatives: cfg.negatives,
    };
    while state.epoch < cfg.phase1_epochs {
        let mut rng = phase_rng(cfg.seed, 1, state.epoch);
        for pairs in epoch_batches(&data.dataset.train, &data.dataset.image_captions, cfg.batch_size, &mut rng)? {
            let batch = BatchIndices {
                images: pairs.iter().map(|p| p.0).collect(),
                captions: pairs.iter().map(|p| p.1).collect(),
                mined: None,
            };
            let m = apply_update(cfg, &mut state, data, &batch, &objective, cfg.phase1_lr)?;
            observer.on_step(&m)?;
        }
        state.epoch += 1;
        observer.on_epoch_end(&state)?;
    }
    Ok(state)
}

/// Mines top lists over the training split with the current parameters.
pub fn mine_training_split(cfg: &TrainConfig, data: &TrainingData, params: &ModelParams) -> Result<MinedLists> {
    let ds = data.dataset;
    let view = ds.view(&ds.train)?;
    let store = data.store();
    let images = embed_images(params, &ds.corpus, &store, &view.images)?;
    let captions = embed_captions(params, &ds.corpus, &store, &view.captions)?;
    let local = mine_in_chunks(
        &images,
        &captions,
        &view.truth,
        cfg.mine_images,
        cfg.mine_captions,
        cfg.top_k,
        cfg.top_q,
    )?;
    let mut p_vs = vec![Vec::new(); ds.n_images()];
    let mut p_sv = vec![Vec::new(); ds.captions.len()];
    for (li, list) in local.p_vs.iter().enumerate() {
        p_vs[view.images[li]] = list.iter().map(|&c| view.captions[c]).collect();
    }
    for (lc, list) in local.p_sv.iter().enumerate() {
        p_sv[view.captions[lc]] = list.iter().map(|&i| view.images[i]).collect();
    }
    Ok(MinedLists {
        p_vs,
        p_sv,
        k: cfg.top_k,
        q: cfg.top_q,
    })
}

/// Mines from the phase-1 model and switches the state to phase 2 with
/// fresh optimizer moments.
pub fn begin_phase2(cfg: &TrainConfig, data: &TrainingData, mut state: ModelState) -> Result<ModelState> {
    if state.phase != Phase::One {
        return Err(Error::invalid("phase 2 already started"));
    }
    state.mined = Some(mine_training_split(cfg, data, &state.params)?);
    state.optimizer = OptimizerState::new(cfg.optimizer, &state.params);
    state.phase = Phase::Two;
    state.epoch = 0;
    Ok(state)
}

/// CIDEr scores against an image's reference set, computed on first use.
struct PhiCache<'d, 'a> {
    data: &'d TrainingData<'a>,
    /// (image, caption, leave caption out)
    scores: RefCell<HashMap<(usize, usize, bool), f64>>,
}

impl PhiCache<'_, '_> {
    fn phi(&self, image: usize, caption: usize, leave_out: bool) -> Result<f64> {
        if let Some(&v) = self.scores.borrow().get(&(image, caption, leave_out)) {
            return Ok(v);
        }
        let refs: Vec<&CaptionVector> = self.data.dataset.image_captions[image]
            .iter()
            .filter(|&&c| !(leave_out && c == caption))
            .map(|&c| &self.data.cider_vectors[c])
            .collect();
        if refs.is_empty() {
            return Err(Error::invalid(format!(
                "image {image} needs a second caption for leave-one-out CIDEr"
            )));
        }
        let v = cider_from_vectors(&self.data.cider_vectors[caption], &refs)?.value;
        self.scores.borrow_mut().insert((image, caption, leave_out), v);
        Ok(v)
    }

    fn margins(&self, n: &AnchorNegatives, beta: f64, delta_max: f64) -> Result<AnchorMargins> {
        let partner = *self.data.dataset.image_captions[n.neg_image]
            .first()
            .ok_or_else(|| Error::invalid(format!("image {} has no caption", n.neg_image)))?;
        let pos = self.phi(n.image, n.caption, true)?;
        let neg = self.phi(n.image, n.neg_caption, false)?;
        let par = self.phi(n.image, partner, false)?;
        Ok(AnchorMargins {
            delta_v: margin_from_scores(pos, neg, beta, delta_max),
            delta_t: margin_from_scores(pos, par, beta, delta_max),
        })
    }
}

/// Phase 2: hierarchical loss with per-anchor quadruples redrawn every
/// epoch, penalty weights and adaptive margins.
pub fn run_phase2(
    cfg: &TrainConfig,
    data: &TrainingData,
    mut state: ModelState,
    observer: &mut dyn TrainObserver,
) -> Result<ModelState> {
    cfg.validate()?;
    if state.phase != Phase::Two {
        return Err(Error::invalid("phase 2 needs a state prepared by begin_phase2"));
    }
    let lists = state
        .mined
        .as_ref()
        .ok_or_else(|| Error::invalid("phase 2 state carries no mined lists"))?
        .as_top_lists();
    let cache = PhiCache {
        data,
        scores: RefCell::new(HashMap::new()),
    };
    let margin_fn = |n: &AnchorNegatives| cache.margins(n, cfg.beta, cfg.delta_max);
    let objective = Objective::Hierarchical {
        margins: MarginSource::PerAnchor(&margin_fn),
        weights: WeightSource::Penalty {
            tau: cfg.tau,
            mu: cfg.mu,
        },
        delta2: cfg.delta2,
        negatives: cfg.negatives,
        mapping: cfg.pair_mapping,
    };
    while state.epoch < cfg.phase2_epochs {
        let mut rng = phase_rng(cfg.seed, 2, state.epoch);
        for pairs in epoch_batches(&data.dataset.train, &data.dataset.image_captions, cfg.batch_size, &mut rng)? {
            let mined = pairs
                .iter()
                .map(|&(img, cap)| {
                    let q = draw_quadruple(&lists, &data.truth, img, cap, &mut rng)?;
                    Ok(MinedIndices {
                        t_bar: q.t_bar,
                        v_bar: q.v_bar,
                        t_dbar: q.t_dbar,
                        v_dbar: q.v_dbar,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = BatchIndices {
                images: pairs.iter().map(|p| p.0).collect(),
                captions: pairs.iter().map(|p| p.1).collect(),
                mined: Some(mined),
            };
            let m = apply_update(cfg, &mut state, data, &batch, &objective, cfg.phase2_lr)?;
            observer.on_step(&m)?;
        }
        state.epoch += 1;
        observer.on_epoch_end(&state)?;
    }
    Ok(state)
}

/// Recall of `params` on the given images and all their captions.
pub fn evaluate_split(
    params: &ModelParams,
    data: &TrainingData,
    images: &[usize],
    rerank_gamma: Option<f64>,
) -> Result<RecallReport> {
    let ds = data.dataset;
    let view = ds.view(images)?;
    let store = data.store();
    let img = embed_images(params, &ds.corpus, &store, &view.images)?;
    let cap = embed_captions(params, &ds.corpus, &store, &view.captions)?;
    evaluate_embeddings(&img, &cap, &view.truth, rerank_gamma)
}

/// Mean loss of each epoch, in log order.
pub fn epoch_mean_losses(log: &[StepMetrics], phase: Phase) -> Vec<f64> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for m in log.iter().filter(|m| m.phase == phase) {
        if sums.len() <= m.epoch {
            sums.resize(m.epoch + 1, (0.0, 0));
        }
        sums[m.epoch].0 += m.loss;
        sums[m.epoch].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}
