//! CIDEr caption relevance and the adaptive margins derived from it.
//!
//! Captions are compared as TF-IDF weighted n-gram vectors for n = 1..4.
//! Document frequencies count images (each image's reference set is one
//! document). The score is `10 × mean_n mean_refs cos(cand_n, ref_n)`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const MAX_N: usize = 4;

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> BTreeMap<String, f64> {
    let mut counts = BTreeMap::new();
    if tokens.len() < n {
        return counts;
    }
    for window in tokens.windows(n) {
        let key = window
            .iter()
            .map(AsRef::as_ref)
            .collect::<Vec<_>>()
            .join(" ");
        *counts.entry(key).or_insert(0.0) += 1.0;
    }
    counts
}

/// Document frequencies of n-grams over a reference corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    df: [BTreeMap<String, usize>; MAX_N],
    corpus_size: usize,
}

impl IdfTable {
    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    pub fn document_frequency(&self, n: usize, gram: &str) -> usize {
        self.df[n - 1].get(gram).copied().unwrap_or(0)
    }

    /// `ln(N / df)`, with unseen n-grams treated as `df = 1`.
    pub fn idf(&self, n: usize, gram: &str) -> f64 {
        let df = self.document_frequency(n, gram).max(1);
        (self.corpus_size as f64 / df as f64).ln()
    }
}

/// `reference_corpus[i]` holds the tokenized reference captions of image `i`.
pub fn build_idf<S: AsRef<str>>(reference_corpus: &[Vec<Vec<S>>]) -> Result<IdfTable> {
    if reference_corpus.is_empty() {
        return Err(Error::Empty("build_idf"));
    }
    let mut df: [BTreeMap<String, usize>; MAX_N] = Default::default();
    for refs in reference_corpus {
        for n in 1..=MAX_N {
            let mut seen: Vec<String> = refs
                .iter()
                .flat_map(|r| ngram_counts(r, n).into_keys())
                .collect();
            seen.sort_unstable();
            seen.dedup();
            for g in seen {
                *df[n - 1].entry(g).or_insert(0) += 1;
            }
        }
    }
    Ok(IdfTable {
        df,
        corpus_size: reference_corpus.len(),
    })
}

/// TF-IDF vectors of one caption for every n, with their norms.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionVector {
    grams: [BTreeMap<String, f64>; MAX_N],
    sq_norms: [f64; MAX_N],
}

impl CaptionVector {
    pub fn new<S: AsRef<str>>(tokens: &[S], idf: &IdfTable) -> Self {
        let mut grams: [BTreeMap<String, f64>; MAX_N] = Default::default();
        let mut sq_norms = [0.0; MAX_N];
        for n in 1..=MAX_N {
            let mut v = ngram_counts(tokens, n);
            for (g, w) in v.iter_mut() {
                *w *= idf.idf(n, g);
            }
            sq_norms[n - 1] = v.values().map(|w| w * w).sum::<f64>();
            grams[n - 1] = v;
        }
        Self { grams, sq_norms }
    }

    /// Cosine for n-gram order `n`; zero when either vector is empty.
    ///
    /// The dot product and squared norms sum in the same key order, so a
    /// vector against itself gives exactly 1.
    pub fn cosine(&self, other: &CaptionVector, n: usize) -> f64 {
        let (a, b) = (&self.grams[n - 1], &other.grams[n - 1]);
        let denom = (self.sq_norms[n - 1] * other.sq_norms[n - 1]).sqrt();
        if denom == 0.0 {
            return 0.0;
        }
        let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        let num: f64 = small
            .iter()
            .filter_map(|(g, w)| large.get(g).map(|v| w * v))
            .sum();
        num / denom
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiderScore {
    pub value: f64,
    pub per_n: [f64; MAX_N],
}

pub fn cider_from_vectors(candidate: &CaptionVector, references: &[&CaptionVector]) -> Result<CiderScore> {
    if references.is_empty() {
        return Err(Error::Empty("cider references"));
    }
    let mut per_n = [0.0; MAX_N];
    for (n, slot) in (1..=MAX_N).zip(per_n.iter_mut()) {
        let total: f64 = references.iter().map(|r| candidate.cosine(r, n)).sum();
        *slot = total / references.len() as f64;
    }
    let value = 10.0 * per_n.iter().sum::<f64>() / MAX_N as f64;
    Ok(CiderScore { value, per_n })
}

pub fn cider_score<S: AsRef<str>, R: AsRef<[S]>>(
    candidate: &[S],
    references: &[R],
    idf: &IdfTable,
) -> Result<CiderScore> {
    if candidate.is_empty() {
        return Err(Error::Empty("cider candidate"));
    }
    let cand = CaptionVector::new(candidate, idf);
    let refs: Vec<CaptionVector> = references
        .iter()
        .map(|r| CaptionVector::new(r.as_ref(), idf))
        .collect();
    let refs: Vec<&CaptionVector> = refs.iter().collect();
    cider_from_vectors(&cand, &refs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveMargins {
    pub delta_v: f64,
    pub delta_t: f64,
    pub beta: f64,
}

/// `clamp((Φ_pos − Φ_neg) / β, 0, max)`
pub fn margin_from_scores(phi_positive: f64, phi_negative: f64, beta: f64, delta_max: f64) -> f64 {
    ((phi_positive - phi_negative) / beta).clamp(0.0, delta_max)
}

/// Removes the first reference equal to `positive` from `gt_set`.
pub fn leave_one_out<'a, S: AsRef<str> + PartialEq>(gt_set: &'a [Vec<S>], positive: &[S]) -> Result<Vec<&'a [S]>> {
    let mut refs: Vec<&[S]> = gt_set.iter().map(Vec::as_slice).collect();
    if let Some(pos) = refs.iter().position(|r| *r == positive) {
        refs.remove(pos);
    }
    if refs.is_empty() {
        return Err(Error::invalid(
            "adaptive margins need at least one reference besides the positive caption",
        ));
    }
    Ok(refs)
}

/// Margins for an anchor image with ground-truth captions `gt_set`.
///
/// The positive caption is scored against `gt_set` without itself; the two
/// negatives are scored against the full set.
pub fn adaptive_margins<S: AsRef<str> + PartialEq>(
    gt_set: &[Vec<S>],
    positive: &[S],
    neg_caption: &[S],
    neg_partner_caption: &[S],
    idf: &IdfTable,
    beta: f64,
    delta_max: f64,
) -> Result<AdaptiveMargins> {
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    let loo = leave_one_out(gt_set, positive)?;
    let phi_pos = cider_score(positive, &loo, idf)?.value;
    let phi_neg = cider_score(neg_caption, gt_set, idf)?.value;
    let phi_partner = cider_score(neg_partner_caption, gt_set, idf)?.value;
    Ok(AdaptiveMargins {
        delta_v: margin_from_scores(phi_pos, phi_neg, beta, delta_max),
        delta_t: margin_from_scores(phi_pos, phi_partner, beta, delta_max),
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn corpus(images: &[&[&str]]) -> Vec<Vec<Vec<String>>> {
        images
            .iter()
            .map(|refs| refs.iter().map(|r| toks(r)).collect())
            .collect()
    }

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("A dog, running!  On-grass."), ["a", "dog", "running", "on", "grass"]);
    }

    #[test]
    fn single_image_corpus_has_zero_idf() {
        let idf = build_idf(&corpus(&[&["a dog runs", "the dog"]])).unwrap();
        assert_eq!(idf.idf(1, "dog"), 0.0);
        assert_eq!(idf.idf(2, "a dog"), 0.0);
        assert_eq!(idf.idf(1, "cat"), 0.0);
        assert!(build_idf::<String>(&[]).is_err());
    }

    #[test]
    fn toy_corpus_idf_by_hand() {
        let c = corpus(&[
            &["a dog runs on grass", "dog on grass"],
            &["a cat sleeps"],
            &["a dog sleeps", "grass field"],
            &["red car"],
        ]);
        let idf = build_idf(&c).unwrap();
        assert_eq!(idf.corpus_size(), 4);
        let ln = |x: f64| x.ln();
        assert!((idf.idf(1, "a") - ln(4.0 / 3.0)).abs() < 1e-12);
        assert!((idf.idf(1, "dog") - ln(2.0)).abs() < 1e-12);
        assert!((idf.idf(1, "grass") - ln(2.0)).abs() < 1e-12);
        assert!((idf.idf(1, "car") - ln(4.0)).abs() < 1e-12);
        assert!((idf.idf(2, "on grass") - ln(4.0)).abs() < 1e-12);
        assert!((idf.idf(2, "a dog") - ln(2.0)).abs() < 1e-12);
        assert!((idf.idf(3, "unseen tri gram") - ln(4.0)).abs() < 1e-12);
        // n-gram present in every image
        let everywhere = build_idf(&corpus(&[&["x y"], &["x z"]])).unwrap();
        assert_eq!(everywhere.idf(1, "x"), 0.0);
    }

    #[test]
    fn identity_and_disjoint() {
        let c = corpus(&[
            &["a small dog runs on the grass"],
            &["two cats sleep"],
            &["a red car parked"],
        ]);
        let idf = build_idf(&c).unwrap();
        let cand = toks("small dog runs fast");
        let s = cider_score(&cand, std::slice::from_ref(&cand), &idf).unwrap();
        assert_eq!(s.value, 10.0);
        assert!(s.per_n.iter().all(|&p| p == 1.0));

        let s = cider_score(&toks("blue boat sails"), &[toks("a small dog runs on the grass")], &idf).unwrap();
        assert_eq!(s.value, 0.0);
        assert!(cider_score::<String, Vec<String>>(&cand, &[], &idf).is_err());
        assert!(cider_score::<String, Vec<String>>(&[], std::slice::from_ref(&cand), &idf).is_err());
    }

    #[test]
    fn short_candidate_contributes_zero_for_long_orders() {
        let c = corpus(&[&["dog runs"], &["cat sleeps"]]);
        let idf = build_idf(&c).unwrap();
        let s = cider_score(&toks("dog runs"), &[toks("dog runs")], &idf).unwrap();
        assert_eq!(s.per_n[2], 0.0);
        assert_eq!(s.per_n[3], 0.0);
        assert!((s.value - 10.0 * 2.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn value_is_ten_times_mean_of_orders() {
        let c = corpus(&[
            &["a man rides a horse on the beach", "a person riding a horse"],
            &["a woman rides a bike", "cyclist on the road"],
            &["horses on a beach at sunset"],
        ]);
        let idf = build_idf(&c).unwrap();
        let s = cider_score(&toks("a man riding a horse on a beach"), &c[0], &idf).unwrap();
        let mean = s.per_n.iter().sum::<f64>() / 4.0;
        assert!((s.value - 10.0 * mean).abs() < 1e-12);
        assert!(s.per_n.iter().all(|&p| (0.0..=1.0).contains(&p)));
        // reference order does not matter
        let mut rev = c[0].clone();
        rev.reverse();
        let r = cider_score(&toks("a man riding a horse on a beach"), &rev, &idf).unwrap();
        assert!((r.value - s.value).abs() < 1e-12);
    }

    #[test]
    fn margin_scalar_cases() {
        assert_eq!(margin_from_scores(0.8, 0.8, 1.0, 1.0), 0.0);
        assert!((margin_from_scores(0.8, 0.3, 1.0, 1.0) - 0.5).abs() < 1e-12);
        assert_eq!(margin_from_scores(0.3, 0.8, 1.0, 1.0), 0.0);
        assert_eq!(margin_from_scores(9.0, 0.0, 1.0, 1.0), 1.0);
    }

    #[test]
    fn adaptive_margins_use_leave_one_out() {
        let c = corpus(&[
            &["a man rides a horse on the beach", "a person riding a horse on sand", "horse and rider at the sea"],
            &["a woman rides a bike", "cyclist on the road"],
            &["a plate of food"],
        ]);
        let idf = build_idf(&c).unwrap();
        let gt = &c[0];
        let positive = &gt[0];
        let m = adaptive_margins(gt, positive, &c[1][0], &c[2][0], &idf, 10.0, 1.0).unwrap();
        let loo: Vec<&[String]> = gt[1..].iter().map(Vec::as_slice).collect();
        let phi_pos = cider_score(positive, &loo, &idf).unwrap().value;
        let phi_neg = cider_score(&c[1][0], gt, &idf).unwrap().value;
        assert!((m.delta_v - ((phi_pos - phi_neg) / 10.0).clamp(0.0, 1.0)).abs() < 1e-12);
        assert!(m.delta_v > 0.0 && m.delta_t > 0.0);
        // a negative identical to the positive is as relevant as it
        let same = adaptive_margins(gt, positive, positive, positive, &idf, 10.0, 1.0).unwrap();
        assert!(same.delta_v <= 1e-12 && same.delta_t <= 1e-12);

        let lone = corpus(&[&["only one caption here"]]);
        assert!(adaptive_margins(&lone[0], &lone[0][0], &c[1][0], &c[1][1], &idf, 10.0, 1.0).is_err());
        assert!(adaptive_margins(gt, positive, &c[1][0], &c[1][1], &idf, 0.0, 1.0).is_err());
    }

    #[test]
    fn leave_one_out_never_keeps_the_positive() {
        let c = corpus(&[&["a b c", "d e f", "g h i"]]);
        for p in &c[0] {
            let refs = leave_one_out(&c[0], p).unwrap();
            assert_eq!(refs.len(), 2);
            assert!(refs.iter().all(|r| *r != p.as_slice()));
        }
    }
}
