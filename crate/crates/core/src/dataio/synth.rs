//! Desk-scale synthetic image/caption data with a known generative structure.
//!
//! Every image gets a latent unit vector `ℓ`. Its regions are `(ℓ + σε)·M`
//! for a fixed random lift `M`, and its captions draw words from the
//! `topic_words` vocabulary entries whose vectors align best with `ℓ`, with a
//! fraction `min(0.3, σ)` replaced by random words.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize, DenseMatrix};

use super::{load_matrix, read_text, save_matrix, write_atomic, write_captions, CaptionRecord, Manifest, Precision, Splits};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

pub const LATENTS_FILE: &str = "latents.amsp";
pub const WORD_VECTORS_FILE: &str = "word_vectors.amsp";
pub const WORDS_FILE: &str = "words.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_images: usize,
    pub captions_per_image: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    pub vocab_size: usize,
    pub regions_per_image: usize,
    pub feature_dim: usize,
    /// dimension of the concept corpus; must equal the model's embedding size
    pub corpus_dim: usize,
    pub n_concepts: usize,
    pub caption_len: usize,
    pub topic_words: usize,
    pub val_images: usize,
    pub test_images: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_images: 160,
            captions_per_image: 5,
            latent_dim: 12,
            noise_sigma: 0.3,
            vocab_size: 150,
            regions_per_image: 8,
            feature_dim: 64,
            corpus_dim: 32,
            n_concepts: 12,
            caption_len: 8,
            topic_words: 10,
            val_images: 0,
            test_images: 32,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_images", self.n_images),
            ("captions_per_image", self.captions_per_image),
            ("latent_dim", self.latent_dim),
            ("vocab_size", self.vocab_size),
            ("regions_per_image", self.regions_per_image),
            ("feature_dim", self.feature_dim),
            ("corpus_dim", self.corpus_dim),
            ("caption_len", self.caption_len),
            ("topic_words", self.topic_words),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        let max_vocab = (CONSONANTS.len() * VOWELS.len()).pow(2);
        if self.vocab_size > max_vocab {
            return Err(Error::invalid(format!("vocab_size is limited to {max_vocab}")));
        }
        if self.topic_words > self.vocab_size {
            return Err(Error::invalid("topic_words exceeds vocab_size"));
        }
        if self.n_concepts < 2 || self.n_concepts > self.vocab_size {
            return Err(Error::invalid("n_concepts must lie in [2, vocab_size]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and nonnegative"));
        }
        if self.val_images + self.test_images >= self.n_images {
            return Err(Error::invalid("val and test splits leave no training images"));
        }
        Ok(())
    }
}

fn syllable_words(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let syllables: Vec<String> = CONSONANTS
        .iter()
        .flat_map(|&c| VOWELS.iter().map(move |&v| format!("{}{}", c as char, v as char)))
        .collect();
    let mut all: Vec<String> = syllables
        .iter()
        .flat_map(|a| syllables.iter().map(move |b| format!("{a}{b}")))
        .collect();
    all.shuffle(rng);
    all.truncate(n);
    all
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        if let Ok(v) = l2_normalize(&normal_vec(rng, n)) {
            return v;
        }
    }
}

/// Writes a complete dataset into `out_dir` and returns the manifest path.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l = cfg.latent_dim;

    let words = syllable_words(&mut rng, cfg.vocab_size);
    let word_vecs: Vec<Vec<f64>> = (0..cfg.vocab_size).map(|_| unit_vec(&mut rng, l)).collect();
    let word_matrix = DenseMatrix::from_rows(&word_vecs)?;
    let scale = 1.0 / (l as f64).sqrt();
    let lift: Vec<Vec<f64>> = (0..l)
        .map(|_| normal_vec(&mut rng, cfg.feature_dim).into_iter().map(|x| x * scale).collect())
        .collect();
    let off_topic = cfg.noise_sigma.min(0.3);

    let image_ids: Vec<String> = (0..cfg.n_images).map(|i| format!("img{i:04}")).collect();
    let mut latents = Vec::with_capacity(cfg.n_images);
    let mut features = Vec::with_capacity(cfg.n_images * cfg.regions_per_image);
    let mut captions = Vec::with_capacity(cfg.n_images * cfg.captions_per_image);
    for (i, id) in image_ids.iter().enumerate() {
        let latent = unit_vec(&mut rng, l);
        for _ in 0..cfg.regions_per_image {
            let noisy: Vec<f64> = latent
                .iter()
                .map(|&x| x + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut row = vec![0.0; cfg.feature_dim];
            for (k, &z) in noisy.iter().enumerate() {
                for (r, &m) in row.iter_mut().zip(&lift[k]) {
                    *r += z * m;
                }
            }
            features.push(row);
        }

        let topic = topic_pool(&latent, &word_matrix, cfg.topic_words);
        for k in 0..cfg.captions_per_image {
            let mut pool = topic.clone();
            pool.shuffle(&mut rng);
            let tokens: Vec<&str> = (0..cfg.caption_len)
                .map(|j| {
                    let w = if rng.gen::<f64>() < off_topic {
                        rng.gen_range(0..cfg.vocab_size)
                    } else {
                        pool[j % pool.len()]
                    };
                    words[w].as_str()
                })
                .collect();
            captions.push(CaptionRecord {
                image_id: id.clone(),
                caption_id: format!("cap{i:04}_{k}"),
                text: tokens.join(" "),
            });
        }
        latents.push(latent);
    }

    let mut concept_idx: Vec<usize> = (0..cfg.vocab_size).collect();
    concept_idx.shuffle(&mut rng);
    concept_idx.truncate(cfg.n_concepts);
    let proj: Vec<Vec<f64>> = (0..cfg.corpus_dim).map(|_| normal_vec(&mut rng, l)).collect();
    let corpus_rows = concept_idx
        .iter()
        .map(|&w| l2_normalize(&proj.iter().map(|p| dot(p, &word_vecs[w])).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let concepts: Vec<&str> = concept_idx.iter().map(|&w| words[w].as_str()).collect();

    let n_train = cfg.n_images - cfg.val_images - cfg.test_images;
    let splits = Splits {
        train: image_ids[..n_train].to_vec(),
        val: image_ids[n_train..n_train + cfg.val_images].to_vec(),
        test: image_ids[n_train + cfg.val_images..].to_vec(),
    };
    let manifest = Manifest {
        features: "features.amsp".into(),
        regions_per_image: cfg.regions_per_image,
        image_ids,
        captions: "captions.tsv".into(),
        corpus: "corpus.amsp".into(),
        concepts: "concepts.txt".into(),
        splits,
    };

    save_matrix(&out_dir.join(&manifest.features), &DenseMatrix::from_rows(&features)?, Precision::F32)?;
    write_captions(&out_dir.join(&manifest.captions), &captions)?;
    save_matrix(&out_dir.join(&manifest.corpus), &DenseMatrix::from_rows(&corpus_rows)?, Precision::F32)?;
    write_atomic(&out_dir.join(&manifest.concepts), (concepts.join("\n") + "\n").as_bytes())?;
    save_matrix(&out_dir.join(LATENTS_FILE), &DenseMatrix::from_rows(&latents)?, Precision::F64)?;
    save_matrix(&out_dir.join(WORD_VECTORS_FILE), &word_matrix, Precision::F64)?;
    write_atomic(&out_dir.join(WORDS_FILE), (words.join("\n") + "\n").as_bytes())?;
    let manifest_path = out_dir.join("manifest.json");
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&manifest_path, &json)?;
    Ok(manifest_path)
}

/// Words of the `k` vocabulary entries best aligned with `latent`.
fn topic_pool(latent: &[f64], word_vecs: &DenseMatrix, k: usize) -> Vec<usize> {
    let scores: Vec<f64> = word_vecs.row_iter().map(|w| dot(w, latent)).collect();
    let mut by_score: Vec<usize> = (0..scores.len()).collect();
    by_score.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    by_score.truncate(k);
    by_score
}

/// Fraction of captions whose own image attains the highest generative
/// score, the share of caption words drawn from the image's topic pool.
///
/// With `noise_sigma = 0` every caption is drawn from its own pool only, so
/// the result is exactly 1.
pub fn generative_alignment(dataset_dir: &Path, topic_words: usize) -> Result<f64> {
    let ds = super::Dataset::load(&dataset_dir.join("manifest.json"))?;
    let latents = load_matrix(&dataset_dir.join(LATENTS_FILE))?;
    let vectors = load_matrix(&dataset_dir.join(WORD_VECTORS_FILE))?;
    let words: Vec<String> = read_text(&dataset_dir.join(WORDS_FILE))?
        .lines()
        .map(str::to_string)
        .collect();
    let index: std::collections::HashMap<&str, usize> =
        words.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    let pools: Vec<std::collections::HashSet<usize>> = latents
        .row_iter()
        .map(|l| topic_pool(l, &vectors, topic_words).into_iter().collect())
        .collect();
    let mut hits = 0usize;
    for (c, tokens) in ds.caption_tokens.iter().enumerate() {
        let ids = tokens
            .iter()
            .map(|t| {
                index
                    .get(t.as_str())
                    .copied()
                    .ok_or_else(|| Error::Malformed(format!("caption word {t} missing from {WORDS_FILE}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let score = |i: usize| ids.iter().filter(|w| pools[i].contains(w)).count();
        let own = score(ds.caption_image[c]);
        if (0..pools.len()).all(|i| score(i) <= own) {
            hits += 1;
        }
    }
    Ok(hits as f64 / ds.captions.len() as f64)
}
