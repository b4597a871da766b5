//! Hard-negative mining from predictive candidates.
//!
//! Embeddings produced by an earlier model (a phase-1 checkpoint or any
//! external encoder) are scored all-against-all. For every image we keep the
//! `k` most similar captions that do not belong to it, and for every caption
//! the `q` most similar foreign images. Training anchors then draw one entry
//! from each list to form a [`MinedQuadruple`].

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, DenseMatrix};
use crate::pairs::GroundTruth;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveCandidates {
    /// `a × d`, unit rows
    pub images: DenseMatrix,
    /// `b × d`, unit rows
    pub captions: DenseMatrix,
    pub truth: GroundTruth,
}

impl PredictiveCandidates {
    pub fn new(images: DenseMatrix, captions: DenseMatrix, truth: GroundTruth) -> Result<Self> {
        if images.rows() == 0 || captions.rows() == 0 {
            return Err(Error::Empty("PredictiveCandidates"));
        }
        if images.cols() != captions.cols() {
            return Err(Error::Shape {
                op: "PredictiveCandidates",
                left: images.shape(),
                right: captions.shape(),
            });
        }
        if truth.n_images() != images.rows() || truth.n_captions() != captions.rows() {
            return Err(Error::invalid(format!(
                "ground truth covers {} images / {} captions, embeddings have {} / {}",
                truth.n_images(),
                truth.n_captions(),
                images.rows(),
                captions.rows()
            )));
        }
        for (what, m) in [("image", &images), ("caption", &captions)] {
            if let Some(i) = m.row_iter().position(|r| (norm(r) - 1.0).abs() > 1e-6) {
                return Err(Error::invalid(format!("{what} candidate {i} is not unit-norm")));
            }
        }
        Ok(Self {
            images,
            captions,
            truth,
        })
    }
}

/// `m_vs[j][i]` is caption `j` against image `i`; `m_sv` is its transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrices {
    pub m_vs: DenseMatrix,
    pub m_sv: DenseMatrix,
}

pub fn build_similarity(cands: &PredictiveCandidates) -> Result<SimilarityMatrices> {
    let m_sv = cands.images.matmul(&cands.captions.transpose())?;
    let m_vs = m_sv.transpose();
    Ok(SimilarityMatrices { m_vs, m_sv })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopPositionLists {
    /// per image: caption indices, most similar first
    pub p_vs: Vec<Vec<usize>>,
    /// per caption: image indices, most similar first
    pub p_sv: Vec<Vec<usize>>,
    pub k: usize,
    pub q: usize,
}

/// Descending score, ascending index on ties; `-0.0` ties with `0.0`.
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    let key = |x: f64| if x == 0.0 { 0.0 } else { x };
    key(b.0).total_cmp(&key(a.0)).then(a.1.cmp(&b.1))
}

fn top_n(scores: &[f64], take: usize, excluded: impl Fn(usize) -> bool, list: &'static str) -> Result<Vec<usize>> {
    let mut pool: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded(*i))
        .map(|(i, &s)| (s, i))
        .collect();
    if pool.len() < take {
        return Err(Error::NotEnoughCandidates {
            list,
            needed: take,
            available: pool.len(),
        });
    }
    if take == 0 {
        return Ok(Vec::new());
    }
    if take < pool.len() {
        pool.select_nth_unstable_by(take - 1, rank_order);
        pool.truncate(take);
    }
    pool.sort_unstable_by(rank_order);
    Ok(pool.into_iter().map(|(_, i)| i).collect())
}

/// Top-`k` foreign captions per image and top-`q` foreign images per caption.
pub fn top_positions(
    sim: &SimilarityMatrices,
    cands: &PredictiveCandidates,
    k: usize,
    q: usize,
) -> Result<TopPositionLists> {
    let truth = &cands.truth;
    if sim.m_sv.shape() != (truth.n_images(), truth.n_captions()) {
        return Err(Error::Shape {
            op: "top_positions",
            left: sim.m_sv.shape(),
            right: (truth.n_images(), truth.n_captions()),
        });
    }
    let p_vs = (0..truth.n_images())
        .map(|i| top_n(sim.m_sv.row(i), k, |c| truth.is_match(i, c), "image-to-caption"))
        .collect::<Result<Vec<_>>>()?;
    let p_sv = (0..truth.n_captions())
        .map(|c| top_n(sim.m_vs.row(c), q, |i| truth.is_match(i, c), "caption-to-image"))
        .collect::<Result<Vec<_>>>()?;
    Ok(TopPositionLists { p_vs, p_sv, k, q })
}

/// Mined negatives and their true partners for one `(image, caption)` anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinedQuadruple {
    pub anchor_image: usize,
    pub anchor_caption: usize,
    /// hard negative caption of the anchor image
    pub t_bar: usize,
    /// hard negative image of the anchor caption
    pub v_bar: usize,
    /// ground-truth caption of `v_bar` (its first caption)
    pub t_dbar: usize,
    /// ground-truth image of `t_bar`
    pub v_dbar: usize,
}

/// Draws `t̄` uniformly from the anchor image's list and `v̄` uniformly from
/// the anchor caption's list, then resolves their true partners.
pub fn draw_quadruple<R: Rng>(
    lists: &TopPositionLists,
    truth: &GroundTruth,
    anchor_image: usize,
    anchor_caption: usize,
    rng: &mut R,
) -> Result<MinedQuadruple> {
    let captions = lists
        .p_vs
        .get(anchor_image)
        .ok_or_else(|| Error::invalid(format!("no mined list for image {anchor_image}")))?;
    let images = lists
        .p_sv
        .get(anchor_caption)
        .ok_or_else(|| Error::invalid(format!("no mined list for caption {anchor_caption}")))?;
    if captions.is_empty() {
        return Err(Error::Empty("mined caption list"));
    }
    if images.is_empty() {
        return Err(Error::Empty("mined image list"));
    }
    let t_bar = captions[rng.gen_range(0..captions.len())];
    let v_bar = images[rng.gen_range(0..images.len())];
    let t_dbar = *truth
        .captions_of(v_bar)
        .first()
        .ok_or_else(|| Error::invalid(format!("image {v_bar} has no caption")))?;
    Ok(MinedQuadruple {
        anchor_image,
        anchor_caption,
        t_bar,
        v_bar,
        t_dbar,
        v_dbar: truth.image_of(t_bar),
    })
}

pub fn draw_quadruple_seeded(
    lists: &TopPositionLists,
    truth: &GroundTruth,
    anchor_image: usize,
    anchor_caption: usize,
    seed: u64,
) -> Result<MinedQuadruple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_quadruple(lists, truth, anchor_image, anchor_caption, &mut rng)
}

/// Mines a large pool in evenly sized chunks of at most `chunk_images`
/// images (with all their captions), so each similarity matrix stays
/// `a × b`-sized. Returned lists use global indices.
pub fn mine_in_chunks(
    images: &DenseMatrix,
    captions: &DenseMatrix,
    truth: &GroundTruth,
    chunk_images: usize,
    max_captions: usize,
    k: usize,
    q: usize,
) -> Result<TopPositionLists> {
    if chunk_images == 0 {
        return Err(Error::invalid("mining chunk must hold at least one image"));
    }
    let n = truth.n_images();
    let mut p_vs = vec![Vec::new(); n];
    let mut p_sv = vec![Vec::new(); truth.n_captions()];
    // evenly sized chunks, none larger than chunk_images
    let n_chunks = n.div_ceil(chunk_images);
    let mut start = 0;
    for chunk_index in 0..n_chunks {
        let size = n / n_chunks + usize::from(chunk_index < n % n_chunks);
        let end = start + size;
        let chunk: Vec<usize> = (start..end).collect();
        let chunk_caps: Vec<usize> = chunk
            .iter()
            .flat_map(|&i| truth.captions_of(i).iter().copied())
            .collect();
        if chunk_caps.len() > max_captions {
            return Err(Error::invalid(format!(
                "mining chunk of {} images holds {} captions, above the limit of {max_captions}",
                chunk.len(),
                chunk_caps.len()
            )));
        }
        let owners = chunk_caps.iter().map(|&c| truth.image_of(c) - start).collect();
        let local_truth = GroundTruth::from_owners(owners, chunk.len())?;
        let img_rows: Vec<Vec<f64>> = chunk.iter().map(|&i| images.row(i).to_vec()).collect();
        let cap_rows: Vec<Vec<f64>> = chunk_caps.iter().map(|&c| captions.row(c).to_vec()).collect();
        let cands = PredictiveCandidates::new(
            DenseMatrix::from_rows(&img_rows)?,
            DenseMatrix::from_rows(&cap_rows)?,
            local_truth,
        )?;
        let sim = build_similarity(&cands)?;
        let lists = top_positions(&sim, &cands, k, q)?;
        for (local, list) in lists.p_vs.into_iter().enumerate() {
            p_vs[start + local] = list.into_iter().map(|c| chunk_caps[c]).collect();
        }
        for (local, list) in lists.p_sv.into_iter().enumerate() {
            p_sv[chunk_caps[local]] = list.into_iter().map(|i| start + i).collect();
        }
        start = end;
    }
    Ok(TopPositionLists { p_vs, p_sv, k, q })
}

/// Cosine of every caption against every image, `b × a`.
pub fn caption_image_scores(images: &DenseMatrix, captions: &DenseMatrix) -> Vec<Vec<f64>> {
    captions
        .row_iter()
        .map(|c| images.row_iter().map(|v| dot(c, v)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalize;
    use proptest::prelude::*;

    fn unit(rows: &[Vec<f64>]) -> DenseMatrix {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| l2_normalize(r).unwrap()).collect();
        DenseMatrix::from_rows(&rows).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DenseMatrix {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rand::Rng::gen_range(rng, -1.0..1.0)).collect())
            .collect();
        unit(&rows)
    }

    #[test]
    fn similarity_identity_and_orthogonal() {
        let one = unit(&[vec![0.3, 0.4]]);
        let c = PredictiveCandidates::new(one.clone(), one, GroundTruth::uniform(1, 1)).unwrap();
        let s = build_similarity(&c).unwrap();
        assert!((s.m_vs.get(0, 0) - 1.0).abs() < 1e-15);

        let c = PredictiveCandidates::new(
            DenseMatrix::identity(3),
            DenseMatrix::identity(3),
            GroundTruth::uniform(3, 1),
        )
        .unwrap();
        let s = build_similarity(&c).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s.m_vs.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn own_captions_are_excluded() {
        // image 0 owns captions 0 and 1 (identical to it); caption 2 is foreign
        let img = unit(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let caps = unit(&[vec![1.0, 0.0], vec![1.0, 0.01], vec![-1.0, 0.2]]);
        let truth = GroundTruth::from_owners(vec![0, 0, 1], 2).unwrap();
        let c = PredictiveCandidates::new(img, caps, truth).unwrap();
        let lists = top_positions(&build_similarity(&c).unwrap(), &c, 1, 1).unwrap();
        assert_eq!(lists.p_vs[0], vec![2]);
        assert_eq!(lists.p_sv[2], vec![0]);
    }

    #[test]
    fn ties_pick_lowest_indices() {
        let v = unit(&vec![vec![1.0, 0.0]; 4]);
        let c = PredictiveCandidates::new(v.clone(), v, GroundTruth::uniform(4, 1)).unwrap();
        let lists = top_positions(&build_similarity(&c).unwrap(), &c, 2, 3).unwrap();
        assert_eq!(lists.p_vs[0], vec![1, 2]);
        assert_eq!(lists.p_vs[2], vec![0, 1]);
        assert_eq!(lists.p_sv[1], vec![0, 2, 3]);
    }

    #[test]
    fn too_large_k_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = PredictiveCandidates::new(
            random_unit(&mut rng, 3, 4),
            random_unit(&mut rng, 6, 4),
            GroundTruth::uniform(3, 2),
        )
        .unwrap();
        let s = build_similarity(&c).unwrap();
        let err = top_positions(&s, &c, 5, 1).unwrap_err();
        assert!(matches!(err, Error::NotEnoughCandidates { needed: 5, available: 4, .. }));
        assert!(top_positions(&s, &c, 4, 3).is_err());
        assert!(top_positions(&s, &c, 4, 2).is_ok());
    }

    #[test]
    fn singleton_lists_have_no_freedom() {
        let lists = TopPositionLists {
            p_vs: vec![vec![3], vec![0]],
            p_sv: vec![vec![1], vec![1], vec![0], vec![0]],
            k: 1,
            q: 1,
        };
        let truth = GroundTruth::uniform(2, 2);
        for seed in 0..5 {
            let m = draw_quadruple_seeded(&lists, &truth, 0, 1, seed).unwrap();
            assert_eq!((m.t_bar, m.v_bar, m.t_dbar, m.v_dbar), (3, 1, 2, 1));
        }
        let a = draw_quadruple_seeded(&lists, &truth, 1, 2, 9).unwrap();
        let b = draw_quadruple_seeded(&lists, &truth, 1, 2, 9).unwrap();
        assert_eq!(a, b);
        let empty = TopPositionLists { p_vs: vec![vec![]], p_sv: vec![vec![0]], k: 0, q: 1 };
        assert!(draw_quadruple_seeded(&empty, &GroundTruth::uniform(1, 1), 0, 0, 1).is_err());
    }

    #[test]
    fn draws_are_uniform_over_top_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let truth = GroundTruth::uniform(20, 5);
        let c = PredictiveCandidates::new(
            random_unit(&mut rng, 20, 6),
            random_unit(&mut rng, 100, 6),
            truth.clone(),
        )
        .unwrap();
        let k = 6;
        let lists = top_positions(&build_similarity(&c).unwrap(), &c, k, 4).unwrap();
        let draws = 10_000;
        let mut counts = std::collections::HashMap::new();
        let mut draw_rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..draws {
            let m = draw_quadruple(&lists, &truth, 3, 15, &mut draw_rng).unwrap();
            assert!(!truth.is_match(3, m.t_bar));
            assert_ne!(m.v_bar, 3);
            assert!(truth.is_match(m.v_bar, m.t_dbar));
            assert!(truth.is_match(m.v_dbar, m.t_bar));
            *counts.entry(m.t_bar).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), k);
        let p = 1.0 / k as f64;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (&t, &n) in &counts {
            assert!(lists.p_vs[3].contains(&t));
            assert!((n as f64 - mean).abs() <= 3.0 * sigma, "{t}: {n} vs {mean}±{sigma}");
        }
    }

    #[test]
    fn chunked_mining_stays_inside_chunks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = GroundTruth::uniform(10, 3);
        let imgs = random_unit(&mut rng, 10, 5);
        let caps = random_unit(&mut rng, 30, 5);
        let lists = mine_in_chunks(&imgs, &caps, &truth, 5, 15, 3, 2).unwrap();
        for i in 0..10 {
            assert_eq!(lists.p_vs[i].len(), 3);
            for &c in &lists.p_vs[i] {
                assert_eq!(truth.image_of(c) / 5, i / 5);
                assert!(!truth.is_match(i, c));
            }
        }
        // whole pool as one chunk equals direct mining
        let all = mine_in_chunks(&imgs, &caps, &truth, 10, 30, 3, 2).unwrap();
        let c = PredictiveCandidates::new(imgs, caps, truth).unwrap();
        let direct = top_positions(&build_similarity(&c).unwrap(), &c, 3, 2).unwrap();
        assert_eq!(all, direct);
        assert!(mine_in_chunks(&c.images, &c.captions, &c.truth, 5, 10, 3, 2).is_err());
    }

    proptest! {
        #[test]
        fn transposes_and_topk_dominates_rest(seed in 0u64..500, a in 2usize..8, per in 1usize..4, k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = GroundTruth::uniform(a, per);
            let c = PredictiveCandidates::new(
                random_unit(&mut rng, a, 4),
                random_unit(&mut rng, a * per, 4),
                truth.clone(),
            ).unwrap();
            let s = build_similarity(&c).unwrap();
            prop_assert_eq!(&s.m_sv, &s.m_vs.transpose());
            let k = k.min(a * per - per);
            let lists = top_positions(&s, &c, k, 1).unwrap();
            for i in 0..a {
                let chosen = &lists.p_vs[i];
                prop_assert!(chosen.iter().all(|&t| !truth.is_match(i, t)));
                let floor = chosen.iter().map(|&t| s.m_sv.get(i, t)).fold(f64::INFINITY, f64::min);
                for t in 0..a * per {
                    if !truth.is_match(i, t) && !chosen.contains(&t) {
                        prop_assert!(s.m_sv.get(i, t) <= floor);
                    }
                }
            }
        }
    }
}
