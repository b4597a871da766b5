//! Browser bindings. Each exported function takes plain text from the page
//! and returns a JSON string; the `*_json` functions are the same operations
//! without the wasm-bindgen layer so they can be tested natively.

use itm_core::cider::{build_idf, cider_score, tokenize};
use itm_core::consensus::pool_forward;
use itm_core::losses::{hardest_negatives, triplet_loss, BatchSimilarities};
use itm_core::DenseMatrix;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn parse_matrix(text: &str) -> Result<DenseMatrix, String> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t}")))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    DenseMatrix::from_rows(&rows).map_err(|e| e.to_string())
}

/// Scores `candidate` against the first block of `references`. Blocks are
/// separated by blank lines, one reference caption per line; every block is
/// one image of the document-frequency corpus.
pub fn cider_json(candidate: &str, references: &str) -> Result<String, String> {
    let mut corpus: Vec<Vec<Vec<String>>> = vec![Vec::new()];
    for line in references.lines().map(str::trim) {
        if line.is_empty() {
            if !corpus.last().is_some_and(Vec::is_empty) {
                corpus.push(Vec::new());
            }
        } else {
            corpus.last_mut().expect("corpus starts non-empty").push(tokenize(line));
        }
    }
    corpus.retain(|b| !b.is_empty());
    let refs = corpus.first().ok_or("no reference captions")?;
    let idf = build_idf(&corpus).map_err(|e| e.to_string())?;
    let s = cider_score(&tokenize(candidate), refs, &idf).map_err(|e| e.to_string())?;
    Ok(json!({ "score": s.value, "per_n": s.per_n, "images": corpus.len() }).to_string())
}

/// Attention weights of mean-query pooling over region rows, and the pooled
/// unit vector.
pub fn attention_json(features: &str, lambda: f64) -> Result<String, String> {
    let f = parse_matrix(features)?;
    let p = pool_forward(&f, lambda).map_err(|e| e.to_string())?;
    Ok(json!({ "weights": p.weights(), "pooled": p.output() }).to_string())
}

/// Hinge terms of the bidirectional triplet loss with hardest in-batch
/// negatives, for a square matrix whose diagonal holds the positives.
pub fn loss_json(scores: &str, margin: f64) -> Result<String, String> {
    let s = parse_matrix(scores)?;
    if s.rows() != s.cols() {
        return Err(format!("score matrix must be square, got {}x{}", s.rows(), s.cols()));
    }
    let negatives = hardest_negatives(&s).map_err(|e| e.to_string())?;
    let batch = BatchSimilarities::new(s, None).map_err(|e| e.to_string())?;
    let loss = triplet_loss(&batch, margin).map_err(|e| e.to_string())?;
    let anchors: Vec<_> = loss
        .terms
        .iter()
        .enumerate()
        .map(|(i, t)| {
            json!({
                "image_side": t.fv[0],
                "caption_side": t.ft[0],
                "hardest_caption": negatives.caption_for_image[i],
                "hardest_image": negatives.image_for_caption[i],
            })
        })
        .collect();
    Ok(json!({ "total": loss.total, "anchors": anchors }).to_string())
}

#[wasm_bindgen]
pub fn cider(candidate: &str, references: &str) -> Result<String, JsError> {
    cider_json(candidate, references).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn attention(features: &str, lambda: f64) -> Result<String, JsError> {
    attention_json(features, lambda).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn triplet(scores: &str, margin: f64) -> Result<String, JsError> {
    loss_json(scores, margin).map_err(|e| JsError::new(&e))
}
