//! Dense 64-bit linear algebra with hand-written gradient rules.
//!
//! Every differentiable piece of the model is assembled from the functions
//! here. Each forward function that participates in training has a matching
//! `*_backward` that maps an upstream gradient to input gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "DenseMatrix::new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        check_finite("matrix", &data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "DenseMatrix::from_rows",
                    left: (i, r.len()),
                    right: (0, cols),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// A single-row matrix holding `v`.
    pub fn row_vector(v: &[f64]) -> Result<Self> {
        Self::new(1, v.len(), v.to_vec())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers must keep entries finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact on a zero-column matrix would panic
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        matmul(self, other)
    }

    /// `self += scale * other`, shapes must agree.
    pub fn add_scaled(&mut self, other: &DenseMatrix, scale: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "add_scaled",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `A · x` for a column vector `x`.
    pub fn mat_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.row_iter().map(|row| dot(row, x)).collect()
    }

    /// `Aᵀ · y` for a column vector `y`.
    pub fn mat_t_vec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &yi) in self.row_iter().zip(y) {
            axpy(&mut out, yi, row);
        }
        out
    }

    /// `self += scale · a bᵀ`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        debug_assert_eq!((a.len(), b.len()), self.shape());
        for (i, &ai) in a.iter().enumerate() {
            let s = scale * ai;
            if s == 0.0 {
                continue;
            }
            axpy(self.row_mut(i), s, b);
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Analytic-vs-numeric comparison for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    /// `(flat index, analytic, numeric, relative error)`
    pub per_parameter_errors: Vec<(usize, f64, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }

    pub fn worst(&self) -> Option<(usize, f64, f64, f64)> {
        self.per_parameter_errors
            .iter()
            .copied()
            .max_by(|a, b| a.3.total_cmp(&b.3))
    }
}

/// Magnitudes below this are compared absolutely. A central difference with
/// step `1e-5` on an O(1) objective carries round-off near `1e-11`, so
/// smaller gradient entries cannot be resolved relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik != 0.0 {
                axpy(out_row, aik, b.row(k));
            }
        }
    }
    check_finite("matmul output", &out.data)?;
    Ok(out)
}

/// Gradients of `C = A·B`: returns `(dL/dA, dL/dB)` given `dL/dC`.
pub fn matmul_backward(
    a: &DenseMatrix,
    b: &DenseMatrix,
    grad_c: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if grad_c.shape() != (a.rows, b.cols) {
        return Err(Error::Shape {
            op: "matmul_backward",
            left: (a.rows, b.cols),
            right: grad_c.shape(),
        });
    }
    let grad_a = matmul(grad_c, &b.transpose())?;
    let grad_b = matmul(&a.transpose(), grad_c)?;
    Ok((grad_a, grad_b))
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// `y += alpha · x`
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `softmax(lambda · scores)`, computed with max subtraction.
pub fn softmax_scaled(scores: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Empty("softmax_scaled"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "softmax inverse temperature must be positive, got {lambda}"
        )));
    }
    check_finite("softmax scores", scores)?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (lambda * (s - max)).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Gradient of `p = softmax(lambda · s)` w.r.t. `s`, given `dL/dp`.
pub fn softmax_scaled_backward(probs: &[f64], grad_out: &[f64], lambda: f64) -> Vec<f64> {
    let inner = dot(probs, grad_out);
    probs
        .iter()
        .zip(grad_out)
        .map(|(p, g)| lambda * p * (g - inner))
        .collect()
}

/// Output of [`l2_normalize_with_norm`]: the unit vector plus the input norm
/// needed for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub unit: Vec<f64>,
    pub norm: f64,
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    l2_normalize_with_norm(v).map(|n| n.unit)
}

pub fn l2_normalize_with_norm(v: &[f64]) -> Result<Normalized> {
    if v.is_empty() {
        return Err(Error::Empty("l2_normalize"));
    }
    check_finite("l2_normalize input", v)?;
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(Normalized {
        unit: v.iter().map(|x| x / n).collect(),
        norm: n,
    })
}

/// `dL/dv = (I − v̂v̂ᵀ) g / ‖v‖`.
pub fn l2_normalize_backward(normalized: &Normalized, grad_out: &[f64]) -> Vec<f64> {
    let proj = dot(&normalized.unit, grad_out);
    normalized
        .unit
        .iter()
        .zip(grad_out)
        .map(|(u, g)| (g - proj * u) / normalized.norm)
        .collect()
}

/// Inner product of two unit vectors.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            op: "cosine_sim",
            left: (1, u.len()),
            right: (1, v.len()),
        });
    }
    Ok(dot(u, v))
}

/// Central-difference gradient check of `f` at `params`.
///
/// `eps` must lie in `[1e-6, 1e-4]`; below that the differences are noise
/// even in 64-bit arithmetic.
pub fn finite_diff_check<F>(
    op_name: &str,
    mut f: F,
    params: &DenseMatrix,
    analytic_grad: &DenseMatrix,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&DenseMatrix) -> f64,
{
    if params.shape() != analytic_grad.shape() {
        return Err(Error::Shape {
            op: "finite_diff_check",
            left: params.shape(),
            right: analytic_grad.shape(),
        });
    }
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::invalid(format!(
            "finite-difference step {eps} outside [1e-6, 1e-4]"
        )));
    }
    let mut probe = params.clone();
    let mut per_parameter_errors = Vec::with_capacity(params.len());
    let mut max_rel_error: f64 = 0.0;
    for i in 0..params.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let plus = f(&probe);
        probe.data[i] = orig - eps;
        let minus = f(&probe);
        probe.data[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                what: format!("{op_name} objective"),
                index: i,
            });
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = analytic_grad.data[i];
        let rel = relative_error(analytic, numeric);
        max_rel_error = max_rel_error.max(rel);
        per_parameter_errors.push((i, analytic, numeric, rel));
    }
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error,
        per_parameter_errors,
    })
}

pub(crate) fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            what: what.to_string(),
            index,
        }),
        None => Ok(()),
    }
}
