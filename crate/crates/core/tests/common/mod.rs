//! Random tiny models and batches shared by integration tests.

#![allow(dead_code)]

use itm_core::consensus::{ConceptLabel, CorpusEmbedding, CtlmMixture};
use itm_core::model::{BatchIndices, ItemStore, MinedIndices, ModelConfig, ModelParams};
use itm_core::numerics::l2_normalize;
use itm_core::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Toy {
    pub params: ModelParams,
    pub corpus: CorpusEmbedding,
    pub regions: Vec<DenseMatrix>,
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<ConceptLabel>,
    pub caption_image: Vec<usize>,
    pub batch: BatchIndices,
}

impl Toy {
    pub fn store(&self) -> ItemStore<'_> {
        ItemStore {
            regions: &self.regions,
            tokens: &self.tokens,
            labels: &self.labels,
            caption_image: &self.caption_image,
        }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::new(r, c, (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// `b` anchors over `2b` images with two captions each; mined members are
/// drawn from the non-anchor half.
pub fn toy(seed: u64, b: usize, d: usize, z: usize) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d_in, vocab, word_dim) = (5, 9, 4);
    let cfg = ModelConfig {
        embed_dim: d,
        word_dim,
        lambda: 10.0,
        eta: 0.35,
        mixture: CtlmMixture::Prior,
    };
    let mut params = ModelParams::init(&mut rng, &cfg, d_in, vocab).unwrap();
    // nonzero gate bias and stack logits so every path carries gradient
    for t in [&mut params.consensus.visual, &mut params.consensus.textual] {
        t.gate_b = random_matrix(&mut rng, 1, 1, 0.5);
        t.stack = random_matrix(&mut rng, 1, 3, 0.5);
    }
    let q_rows: Vec<Vec<f64>> = (0..z)
        .map(|_| l2_normalize(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap())
        .collect();
    let names = (0..z).map(|i| format!("w{i}")).collect();
    let corpus = CorpusEmbedding::new(DenseMatrix::from_rows(&q_rows).unwrap(), names).unwrap();

    let n_images = 2 * b;
    let regions = (0..n_images).map(|_| random_matrix(&mut rng, 3, d_in, 1.0)).collect();
    let caption_image: Vec<usize> = (0..2 * n_images).map(|c| c / 2).collect();
    let tokens: Vec<Vec<usize>> = caption_image
        .iter()
        .map(|_| {
            let len = rng.gen_range(2..6);
            (0..len).map(|_| rng.gen_range(0..vocab)).collect()
        })
        .collect();
    let labels = tokens
        .iter()
        .map(|t| {
            let mut w: Vec<f64> = (0..z).map(|_| rng.gen_range(0.0..1.0)).collect();
            w[t[0] % z] += 1.0;
            let s: f64 = w.iter().sum();
            ConceptLabel::new(w.into_iter().map(|x| x / s).collect()).unwrap()
        })
        .collect();

    let images: Vec<usize> = (0..b).collect();
    let captions: Vec<usize> = images.iter().map(|&i| 2 * i + rng.gen_range(0..2)).collect();
    let mined = (0..b)
        .map(|_| {
            let t_bar = 2 * b * 2 - 1 - rng.gen_range(0..2 * b);
            let v_bar = rng.gen_range(b..2 * b);
            MinedIndices {
                t_bar,
                v_bar,
                t_dbar: 2 * v_bar,
                v_dbar: caption_image[t_bar],
            }
        })
        .collect();
    Toy {
        params,
        corpus,
        regions,
        tokens,
        labels,
        caption_image,
        batch: BatchIndices {
            images,
            captions,
            mined: Some(mined),
        },
    }
}
