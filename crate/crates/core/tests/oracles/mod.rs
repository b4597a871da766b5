//! Brute-force reference implementations. Nothing here calls into the
//! library code it is used to check.

#![allow(dead_code)]

pub const CIDER_MAX_N: usize = 4;

fn grams(tokens: &[String], n: usize) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + n <= tokens.len() {
        let mut g = tokens[start].clone();
        for t in &tokens[start + 1..start + n] {
            g.push(' ');
            g.push_str(t);
        }
        out.push(g);
        start += 1;
    }
    out
}

/// Number of images with at least one reference containing `gram`.
fn doc_freq(gram: &str, n: usize, corpus: &[Vec<Vec<String>>]) -> usize {
    corpus
        .iter()
        .filter(|refs| refs.iter().any(|r| grams(r, n).iter().any(|g| g == gram)))
        .count()
}

/// Sparse tf-idf vector as an unsorted list of `(gram, weight)`.
fn tfidf(tokens: &[String], n: usize, corpus: &[Vec<Vec<String>>]) -> Vec<(String, f64)> {
    let all = grams(tokens, n);
    let mut out: Vec<(String, f64)> = Vec::new();
    for g in &all {
        if out.iter().any(|(h, _)| h == g) {
            continue;
        }
        let tf = all.iter().filter(|h| *h == g).count() as f64;
        let df = doc_freq(g, n, corpus).max(1) as f64;
        out.push((g.clone(), tf * (corpus.len() as f64 / df).ln()));
    }
    out
}

fn cosine(a: &[(String, f64)], b: &[(String, f64)]) -> f64 {
    let na = a.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    let nb = b.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if na * nb == 0.0 {
        return 0.0;
    }
    let mut num = 0.0;
    for (g, w) in a {
        for (h, v) in b {
            if g == h {
                num += w * v;
            }
        }
    }
    num / (na * nb)
}

/// `corpus[i]` holds the references of image `i`.
pub fn oracle_cider(candidate: &[String], references: &[Vec<String>], corpus: &[Vec<Vec<String>>]) -> f64 {
    let mut total = 0.0;
    for n in 1..=CIDER_MAX_N {
        let c = tfidf(candidate, n, corpus);
        let mut acc = 0.0;
        for r in references {
            acc += cosine(&c, &tfidf(r, n, corpus));
        }
        total += acc / references.len() as f64;
    }
    10.0 * total / CIDER_MAX_N as f64
}

/// Per row: sort every column by descending score (ascending index on
/// ties), drop excluded columns, keep the first `k`.
pub fn oracle_topk(matrix: &[Vec<f64>], k: usize, excluded: &dyn Fn(usize, usize) -> bool) -> Vec<Vec<usize>> {
    matrix
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            // insertion sort keeps this path free of library sorting
            for i in 1..order.len() {
                let mut j = i;
                while j > 0 && row[order[j]] > row[order[j - 1]] {
                    order.swap(j, j - 1);
                    j -= 1;
                }
            }
            order.into_iter().filter(|&c| !excluded(r, c)).take(k).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRecall {
    pub i2t: Vec<f64>,
    pub t2i: Vec<f64>,
}

/// Position of `item` when `row` is ranked descending with index tie-break.
fn position(row: &[f64], item: usize) -> usize {
    (0..row.len())
        .filter(|&o| row[o] > row[item] || (row[o] == row[item] && o < item))
        .count()
}

/// `scores[c][i]` is caption `c` against image `i`; `owner[c]` is the image
/// of caption `c`.
pub fn oracle_recall(scores: &[Vec<f64>], owner: &[usize], ks: &[usize]) -> OracleRecall {
    let n_img = scores[0].len();
    let n_cap = scores.len();
    let mut i2t_hits = vec![0usize; ks.len()];
    for i in 0..n_img {
        let row: Vec<f64> = scores.iter().map(|s| s[i]).collect();
        let best = (0..n_cap).filter(|&c| owner[c] == i).map(|c| position(&row, c)).min();
        for (h, &k) in i2t_hits.iter_mut().zip(ks) {
            if best.is_some_and(|p| p < k) {
                *h += 1;
            }
        }
    }
    let mut t2i_hits = vec![0usize; ks.len()];
    for c in 0..n_cap {
        let p = position(&scores[c], owner[c]);
        for (h, &k) in t2i_hits.iter_mut().zip(ks) {
            if p < k {
                *h += 1;
            }
        }
    }
    let pct = |hits: Vec<usize>, n: usize| hits.into_iter().map(|h| 100.0 * h as f64 / n as f64).collect();
    OracleRecall {
        i2t: pct(i2t_hits, n_img),
        t2i: pct(t2i_hits, n_cap),
    }
}

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every `i`.
pub fn central_differences(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a − n| / max(|a|, |n|, floor)` with the index where it occurs.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (usize, f64) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best })
}
