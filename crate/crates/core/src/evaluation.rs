//! Bidirectional ranking, recall@K and test-time hybrid re-ranking.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::pairs::GroundTruth;

pub const DEFAULT_GAMMA: f64 = 0.7;
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// image query, caption gallery
    I2T,
    /// caption query, image gallery
    T2I,
}

/// One query's fully ranked gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub direction: Direction,
    pub queries: Vec<Ranking>,
}

impl RankingResult {
    pub fn gallery_size(&self) -> usize {
        self.queries.first().map_or(0, |q| q.candidates.len())
    }
}

/// Total descending order in which `-0.0` and `0.0` tie.
fn descending(a: f64, b: f64) -> Ordering {
    let key = |x: f64| if x == 0.0 { 0.0 } else { x };
    key(b).total_cmp(&key(a))
}

/// Descending by score, ascending index on ties.
fn rank_row(row: &[f64]) -> Ranking {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| descending(row[a], row[b]).then(a.cmp(&b)));
    let scores = idx.iter().map(|&i| row[i]).collect();
    Ranking {
        candidates: idx,
        scores,
    }
}

/// Ranks every row of a query × gallery score matrix.
pub fn rank_scores(scores: &DenseMatrix, direction: Direction) -> Result<RankingResult> {
    if scores.rows() == 0 || scores.cols() == 0 {
        return Err(Error::Empty("rank_scores"));
    }
    Ok(RankingResult {
        direction,
        queries: scores.row_iter().map(rank_row).collect(),
    })
}

/// Cosine ranking of one direction; rows of both matrices are unit-norm.
pub fn rank_all(images: &DenseMatrix, captions: &DenseMatrix, direction: Direction) -> Result<RankingResult> {
    if images.rows() == 0 || captions.rows() == 0 {
        return Err(Error::Empty("rank_all gallery"));
    }
    let scores = match direction {
        Direction::I2T => images.matmul(&captions.transpose())?,
        Direction::T2I => captions.matmul(&images.transpose())?,
    };
    rank_scores(&scores, direction)
}

/// Percentage of queries with a correct item in the top `k`, for every `k`.
pub fn recall_at_k(ranking: &RankingResult, truth: &GroundTruth, ks: &[usize]) -> Result<Vec<f64>> {
    let n_queries = match ranking.direction {
        Direction::I2T => truth.n_images(),
        Direction::T2I => truth.n_captions(),
    };
    if ranking.queries.len() != n_queries {
        return Err(Error::invalid(format!(
            "{} queries ranked but ground truth covers {n_queries}",
            ranking.queries.len()
        )));
    }
    if n_queries == 0 {
        return Err(Error::Empty("recall_at_k"));
    }
    let mut hits = vec![0usize; ks.len()];
    for (q, r) in ranking.queries.iter().enumerate() {
        let first_hit = r.candidates.iter().position(|&c| match ranking.direction {
            Direction::I2T => truth.is_match(q, c),
            Direction::T2I => truth.is_match(c, q),
        });
        if matches!(ranking.direction, Direction::I2T) && truth.captions_of(q).is_empty() {
            return Err(Error::invalid(format!("image {q} has no ground-truth caption")));
        }
        if let Some(pos) = first_hit {
            for (h, &k) in hits.iter_mut().zip(ks) {
                if pos < k {
                    *h += 1;
                }
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|h| 100.0 * h as f64 / n_queries as f64)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// R@1, R@5, R@10 for image queries
    pub i2t: [f64; 3],
    /// R@1, R@5, R@10 for caption queries
    pub t2i: [f64; 3],
    pub r_sum: f64,
}

impl RecallReport {
    pub fn new(i2t: [f64; 3], t2i: [f64; 3]) -> Self {
        let r_sum = i2t.iter().chain(&t2i).sum();
        Self { i2t, t2i, r_sum }
    }

    pub const TSV_HEADER: &'static str = "i2t_r1\ti2t_r5\ti2t_r10\tt2i_r1\tt2i_r5\tt2i_r10\tr_sum";

    pub fn to_tsv_row(&self) -> String {
        let v: Vec<String> = self
            .i2t
            .iter()
            .chain(&self.t2i)
            .chain(std::iter::once(&self.r_sum))
            .map(|x| format!("{x:.1}"))
            .collect();
        v.join("\t")
    }
}

impl fmt::Display for RecallReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6} {:>7} {:>7} {:>7}", "", "R@1", "R@5", "R@10")?;
        writeln!(f, "{:<6} {:>7.1} {:>7.1} {:>7.1}", "I2T", self.i2t[0], self.i2t[1], self.i2t[2])?;
        writeln!(f, "{:<6} {:>7.1} {:>7.1} {:>7.1}", "T2I", self.t2i[0], self.t2i[1], self.t2i[2])?;
        write!(f, "R@sum  {:.1}", self.r_sum)
    }
}

pub fn recall_report(i2t: &RankingResult, t2i: &RankingResult, truth: &GroundTruth) -> Result<RecallReport> {
    let a = recall_at_k(i2t, truth, &RECALL_KS)?;
    let b = recall_at_k(t2i, truth, &RECALL_KS)?;
    Ok(RecallReport::new([a[0], a[1], a[2]], [b[0], b[1], b[2]]))
}

/// Ranks both directions and reports recall, optionally re-ranking I2T.
pub fn evaluate_embeddings(
    images: &DenseMatrix,
    captions: &DenseMatrix,
    truth: &GroundTruth,
    rerank_gamma: Option<f64>,
) -> Result<RecallReport> {
    let t2i = rank_all(images, captions, Direction::T2I)?;
    let mut i2t = rank_all(images, captions, Direction::I2T)?;
    if let Some(gamma) = rerank_gamma {
        i2t = hybrid_rerank_i2t(&i2t, &t2i, gamma)?;
    }
    recall_report(&i2t, &t2i, truth)
}

/// Fuses min-max normalized similarity with the reciprocal rank of the query
/// image in each candidate caption's own ranking:
/// `γ·norm_sim(v,t) + (1 − γ) / rank_t(v)`.
///
/// Ties keep the base order, so `γ = 1` reproduces the base ranking.
pub fn hybrid_rerank_i2t(base: &RankingResult, reverse: &RankingResult, gamma: f64) -> Result<RankingResult> {
    if base.direction != Direction::I2T || reverse.direction != Direction::T2I {
        return Err(Error::invalid("hybrid re-ranking needs an I2T base and a T2I reverse ranking"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let n_images = base.queries.len();
    let n_captions = reverse.queries.len();
    let consistent = base.queries.iter().all(|q| q.candidates.len() == n_captions)
        && reverse.queries.iter().all(|q| q.candidates.len() == n_images);
    if !consistent || n_images == 0 {
        return Err(Error::invalid("I2T and T2I rankings cover different galleries"));
    }

    // rank_of[t][v] = 1-based position of image v in caption t's list
    let mut rank_of = vec![vec![0usize; n_images]; n_captions];
    for (t, r) in reverse.queries.iter().enumerate() {
        for (pos, &v) in r.candidates.iter().enumerate() {
            rank_of[t][v] = pos + 1;
        }
    }

    let queries = base
        .queries
        .iter()
        .enumerate()
        .map(|(v, q)| {
            let max = q.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = q.scores.iter().copied().fold(f64::INFINITY, f64::min);
            let span = max - min;
            let fused: Vec<(usize, usize, f64)> = q
                .candidates
                .iter()
                .zip(&q.scores)
                .enumerate()
                .map(|(pos, (&t, &s))| {
                    let norm = if span > 0.0 { (s - min) / span } else { 0.0 };
                    let rr = 1.0 / rank_of[t][v] as f64;
                    (pos, t, gamma * norm + (1.0 - gamma) * rr)
                })
                .collect();
            let mut order = fused;
            order.sort_by(|a, b| descending(a.2, b.2).then(a.0.cmp(&b.0)));
            Ranking {
                candidates: order.iter().map(|x| x.1).collect(),
                scores: order.iter().map(|x| x.2).collect(),
            }
        })
        .collect();
    Ok(RankingResult {
        direction: Direction::I2T,
        queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_alignment_ranks_own_match_first() {
        let e = DenseMatrix::identity(4);
        let truth = GroundTruth::uniform(4, 1);
        for dir in [Direction::I2T, Direction::T2I] {
            let r = rank_all(&e, &e, dir).unwrap();
            for (q, rank) in r.queries.iter().enumerate() {
                assert_eq!(rank.candidates[0], q);
            }
        }
        let rep = evaluate_embeddings(&e, &e, &truth, None).unwrap();
        assert_eq!(rep.r_sum, 600.0);
    }

    #[test]
    fn equal_scores_rank_by_index() {
        let s = DenseMatrix::new(2, 5, vec![0.3; 10]).unwrap();
        let r = rank_scores(&s, Direction::I2T).unwrap();
        assert_eq!(r.queries[1].candidates, vec![0, 1, 2, 3, 4]);
        assert!(rank_scores(&DenseMatrix::zeros(0, 3), Direction::I2T).is_err());
    }

    #[test]
    fn anti_diagonal_has_zero_r1() {
        let n = 20;
        let mut s = DenseMatrix::zeros(n, n);
        for i in 0..n {
            s.set(i, n - 1 - i, 1.0);
            s.set(i, i, -1.0);
        }
        let truth = GroundTruth::uniform(n, 1);
        let r = rank_scores(&s, Direction::I2T).unwrap();
        assert_eq!(recall_at_k(&r, &truth, &[1]).unwrap(), vec![0.0]);
    }

    #[test]
    fn recall_requires_full_coverage() {
        let r = rank_scores(&DenseMatrix::identity(3), Direction::I2T).unwrap();
        assert!(recall_at_k(&r, &GroundTruth::uniform(4, 1), &[1]).is_err());
    }

    #[test]
    fn report_formats_one_decimal() {
        let rep = RecallReport::new([50.0, 75.0, 100.0], [12.5, 40.0, 60.0]);
        assert_eq!(rep.r_sum, 337.5);
        assert_eq!(rep.to_tsv_row(), "50.0\t75.0\t100.0\t12.5\t40.0\t60.0\t337.5");
    }

    #[test]
    fn rerank_gamma_one_is_identity() {
        let s = DenseMatrix::from_rows(&[
            vec![0.9, 0.1, 0.4, 0.4],
            vec![0.2, 0.8, 0.3, 0.1],
            vec![0.5, 0.5, 0.5, 0.5],
        ])
        .unwrap();
        let i2t = rank_scores(&s, Direction::I2T).unwrap();
        let t2i = rank_scores(&s.transpose(), Direction::T2I).unwrap();
        let r = hybrid_rerank_i2t(&i2t, &t2i, 1.0).unwrap();
        for (a, b) in r.queries.iter().zip(&i2t.queries) {
            assert_eq!(a.candidates, b.candidates);
        }
    }

    #[test]
    fn rerank_hand_case() {
        // image 0 slightly prefers caption 1, but caption 1 strongly prefers image 1
        let s = DenseMatrix::from_rows(&[vec![0.50, 0.55], vec![0.10, 0.90]]).unwrap();
        let i2t = rank_scores(&s, Direction::I2T).unwrap();
        let t2i = rank_scores(&s.transpose(), Direction::T2I).unwrap();
        assert_eq!(i2t.queries[0].candidates, vec![1, 0]);
        // caption 0 ranks image 0 first (0.5 > 0.1), caption 1 ranks it second.
        // gamma 0.5: caption 1 -> 0.5*1 + 0.5*1/2 = 0.75, caption 0 -> 0.5*0 + 0.5*1 = 0.5
        let r = hybrid_rerank_i2t(&i2t, &t2i, 0.5).unwrap();
        assert_eq!(r.queries[0].candidates, vec![1, 0]);
        // gamma 0.2: caption 1 -> 0.2 + 0.4 = 0.6, caption 0 -> 0.8
        let r = hybrid_rerank_i2t(&i2t, &t2i, 0.2).unwrap();
        assert_eq!(r.queries[0].candidates, vec![0, 1]);
        assert!((r.queries[0].scores[0] - 0.8).abs() < 1e-12);
        assert!(hybrid_rerank_i2t(&t2i, &i2t, 0.5).is_err());
        assert!(hybrid_rerank_i2t(&i2t, &t2i, 1.5).is_err());
    }
}
