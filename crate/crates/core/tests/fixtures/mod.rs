//! Random instances shared by the oracle comparisons.

#![allow(dead_code)]

use itm_core::evaluation::{rank_scores, recall_at_k, Direction, RECALL_KS};
use itm_core::mining::{top_positions, PredictiveCandidates, SimilarityMatrices};
use itm_core::numerics::l2_normalize;
use itm_core::pairs::GroundTruth;
use itm_core::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracles::oracle_topk;

pub const WORDS: [&str; 8] = ["dog", "runs", "on", "grass", "a", "red", "ball", "park"];

pub fn random_caption(rng: &mut ChaCha8Rng) -> Vec<String> {
    let len = rng.gen_range(1..10);
    (0..len).map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string()).collect()
}

pub fn random_corpus(rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<String>>> {
    let n_images = rng.gen_range(2..8);
    (0..n_images)
        .map(|_| (0..rng.gen_range(1..6)).map(|_| random_caption(rng)).collect())
        .collect()
}

pub fn split_tokens(s: &str) -> Vec<String> {
    s.split(' ').map(str::to_string).collect()
}

pub struct TopkInstance {
    pub sim: DenseMatrix,
    pub truth: GroundTruth,
    pub k: usize,
    pub q: usize,
}

pub fn random_truth(rng: &mut ChaCha8Rng, a: usize, b: usize) -> GroundTruth {
    // every image owns at least one caption
    let mut owners: Vec<usize> = (0..a).collect();
    owners.extend((a..b).map(|_| rng.gen_range(0..a)));
    GroundTruth::from_owners(owners, a).unwrap()
}

pub fn topk_instance(rng: &mut ChaCha8Rng, a: usize, b: usize, levels: Option<f64>) -> TopkInstance {
    let truth = random_truth(rng, a, b);
    let data = (0..a * b)
        .map(|_| {
            let x: f64 = rng.gen_range(-1.0..1.0);
            levels.map_or(x, |l| (x * l).round() / l)
        })
        .collect();
    let max_own = (0..a).map(|i| truth.captions_of(i).len()).max().unwrap();
    let k = rng.gen_range(1..=10usize.min(b - max_own));
    let q = rng.gen_range(1..=10usize.min(a - 1));
    TopkInstance {
        sim: DenseMatrix::new(a, b, data).unwrap(),
        truth,
        k,
        q,
    }
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DenseMatrix {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| l2_normalize(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap())
        .collect();
    DenseMatrix::from_rows(&rows).unwrap()
}

pub fn recall_instance(rng: &mut ChaCha8Rng, quantize: bool) -> (Vec<Vec<f64>>, Vec<usize>) {
    let owner: Vec<usize> = (0..100).map(|c| c / 5).collect();
    let scores = (0..100)
        .map(|c| {
            (0..20)
                .map(|i| {
                    let bonus = if owner[c] == i { 0.4 } else { 0.0 };
                    let x: f64 = rng.gen_range(-1.0..1.0) + bonus;
                    if quantize {
                        (x * 3.0).round() / 3.0
                    } else {
                        x
                    }
                })
                .collect()
        })
        .collect();
    (scores, owner)
}

pub fn library_recall(scores: &[Vec<f64>], owner: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let t2i = DenseMatrix::from_rows(scores).unwrap();
    let truth = GroundTruth::from_owners(owner.to_vec(), t2i.cols()).unwrap();
    let i2t_rank = rank_scores(&t2i.transpose(), Direction::I2T).unwrap();
    let t2i_rank = rank_scores(&t2i, Direction::T2I).unwrap();
    (
        recall_at_k(&i2t_rank, &truth, &RECALL_KS).unwrap(),
        recall_at_k(&t2i_rank, &truth, &RECALL_KS).unwrap(),
    )
}

/// Library top lists for an instance; the candidate embeddings are random
/// because only the similarity matrices are read.
pub fn library_topk(inst: &TopkInstance, rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let (a, b) = inst.sim.shape();
    let cands = PredictiveCandidates::new(unit_rows(rng, a, 3), unit_rows(rng, b, 3), inst.truth.clone()).unwrap();
    let sim = SimilarityMatrices {
        m_vs: inst.sim.transpose(),
        m_sv: inst.sim.clone(),
    };
    let lists = top_positions(&sim, &cands, inst.k, inst.q).unwrap();
    (lists.p_vs, lists.p_sv)
}

pub fn oracle_lists(inst: &TopkInstance) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let rows: Vec<Vec<f64>> = inst.sim.row_iter().map(<[f64]>::to_vec).collect();
    let cols: Vec<Vec<f64>> = inst.sim.transpose().row_iter().map(<[f64]>::to_vec).collect();
    let truth = &inst.truth;
    (
        oracle_topk(&rows, inst.k, &|i, c| truth.is_match(i, c)),
        oracle_topk(&cols, inst.q, &|c, i| truth.is_match(i, c)),
    )
}

/// The 60 random instances plus an all-equal tie case.
pub fn topk_instances(seed: u64) -> Vec<TopkInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<TopkInstance> = (0..60)
        .map(|trial| {
            let a = rng.gen_range(2..=50);
            let b = rng.gen_range(a + 11..=250);
            // every third instance is quantized so ties are common
            let levels = (trial % 3 == 0).then_some(4.0);
            topk_instance(&mut rng, a, b, levels)
        })
        .collect();
    out.push(TopkInstance {
        sim: DenseMatrix::new(3, 6, vec![0.5; 18]).unwrap(),
        truth: GroundTruth::from_owners(vec![0, 1, 0, 1, 2, 2], 3).unwrap(),
        k: 3,
        q: 2,
    });
    out
}

/// A toy corpus with `(image, candidate)` cases drawn against it.
pub struct CiderCorpus {
    pub corpus: Vec<Vec<Vec<String>>>,
    pub cases: Vec<(usize, Vec<String>)>,
}

pub fn cider_corpora(seed: u64, count: usize) -> Vec<CiderCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let corpus = random_corpus(&mut rng);
            let cases = (0..5)
                .map(|_| {
                    let image = rng.gen_range(0..corpus.len());
                    let cand = if rng.gen_bool(0.3) {
                        corpus[image][0].clone()
                    } else {
                        random_caption(&mut rng)
                    };
                    (image, cand)
                })
                .collect();
            CiderCorpus { corpus, cases }
        })
        .collect()
}
