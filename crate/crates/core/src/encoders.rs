//! Region-feature projection and the bidirectional GRU caption encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    axpy, l2_normalize_backward, l2_normalize_with_norm, sigmoid, DenseMatrix, Normalized,
};

/// Detector regions of one image, one row per region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatures {
    pub image_id: String,
    pub regions: DenseMatrix,
}

/// A tokenized caption; `tokens` index into the model vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub caption_id: String,
    pub image_id: String,
    pub tokens: Vec<usize>,
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn uniform_init<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> DenseMatrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    DenseMatrix::new(rows, cols, data).expect("finite init")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderParams {
    /// `D_in × d`
    pub w_f: DenseMatrix,
    /// `1 × d`
    pub b_f: DenseMatrix,
}

impl ImageEncoderParams {
    pub fn init<R: Rng>(rng: &mut R, input_dim: usize, embed_dim: usize) -> Self {
        Self {
            w_f: uniform_init(rng, input_dim, embed_dim, input_dim),
            b_f: uniform_init(rng, 1, embed_dim, input_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_f: self.w_f.zeros_like(),
            b_f: self.b_f.zeros_like(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_f.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w_f.cols()
    }
}

/// Weights of one GRU direction. `W_*` act on the input, `U_*` on the state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_z: DenseMatrix,
    pub w_r: DenseMatrix,
    pub w_h: DenseMatrix,
    pub u_z: DenseMatrix,
    pub u_r: DenseMatrix,
    pub u_h: DenseMatrix,
    pub b_z: DenseMatrix,
    pub b_r: DenseMatrix,
    pub b_h: DenseMatrix,
}

impl GruParams {
    pub fn init<R: Rng>(rng: &mut R, input_dim: usize, hidden: usize) -> Self {
        Self {
            w_z: uniform_init(rng, hidden, input_dim, input_dim),
            w_r: uniform_init(rng, hidden, input_dim, input_dim),
            w_h: uniform_init(rng, hidden, input_dim, input_dim),
            u_z: uniform_init(rng, hidden, hidden, hidden),
            u_r: uniform_init(rng, hidden, hidden, hidden),
            u_h: uniform_init(rng, hidden, hidden, hidden),
            b_z: uniform_init(rng, 1, hidden, hidden),
            b_r: uniform_init(rng, 1, hidden, hidden),
            b_h: uniform_init(rng, 1, hidden, hidden),
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w_z: DenseMatrix::zeros(hidden, input_dim),
            w_r: DenseMatrix::zeros(hidden, input_dim),
            w_h: DenseMatrix::zeros(hidden, input_dim),
            u_z: DenseMatrix::zeros(hidden, hidden),
            u_r: DenseMatrix::zeros(hidden, hidden),
            u_h: DenseMatrix::zeros(hidden, hidden),
            b_z: DenseMatrix::zeros(1, hidden),
            b_r: DenseMatrix::zeros(1, hidden),
            b_h: DenseMatrix::zeros(1, hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden())
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w_z.rows()
    }

    fn check(&self) -> Result<()> {
        let (h, e) = (self.hidden(), self.input_dim());
        let expect = [
            (&self.w_r, (h, e)),
            (&self.w_h, (h, e)),
            (&self.u_z, (h, h)),
            (&self.u_r, (h, h)),
            (&self.u_h, (h, h)),
            (&self.b_z, (1, h)),
            (&self.b_r, (1, h)),
            (&self.b_h, (1, h)),
        ];
        for (m, shape) in expect {
            if m.shape() != shape {
                return Err(Error::Shape {
                    op: "GruParams",
                    left: m.shape(),
                    right: shape,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderParams {
    /// `vocab × word_dim`
    pub embed: DenseMatrix,
    pub forward: GruParams,
    pub backward: GruParams,
}

impl TextEncoderParams {
    pub fn init<R: Rng>(rng: &mut R, vocab: usize, word_dim: usize, hidden: usize) -> Self {
        Self {
            embed: uniform_init(rng, vocab, word_dim, word_dim),
            forward: GruParams::init(rng, word_dim, hidden),
            backward: GruParams::init(rng, word_dim, hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            embed: self.embed.zeros_like(),
            forward: self.forward.zeros_like(),
            backward: self.backward.zeros_like(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.rows()
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }

    pub fn check(&self) -> Result<()> {
        self.forward.check()?;
        self.backward.check()?;
        let e = self.embed.cols();
        for g in [&self.forward, &self.backward] {
            if g.input_dim() != e || g.hidden() != self.forward.hidden() {
                return Err(Error::Shape {
                    op: "TextEncoderParams",
                    left: (g.hidden(), g.input_dim()),
                    right: (self.forward.hidden(), e),
                });
            }
        }
        Ok(())
    }
}

/// Cached forward pass of [`encode_image`].
#[derive(Debug, Clone)]
pub struct ImageForward {
    rows: Vec<Normalized>,
}

impl ImageForward {
    pub fn output(&self) -> DenseMatrix {
        rows_to_matrix(&self.rows)
    }
}

pub fn encode_image(regions: &RegionFeatures, params: &ImageEncoderParams) -> Result<DenseMatrix> {
    Ok(encode_image_forward(&regions.regions, params)?.output())
}

/// `v_o = normalize(f_o · W_f + b_f)` for every region row.
pub fn encode_image_forward(regions: &DenseMatrix, params: &ImageEncoderParams) -> Result<ImageForward> {
    if regions.rows() == 0 {
        return Err(Error::Empty("encode_image"));
    }
    if params.b_f.shape() != (1, params.embed_dim()) {
        return Err(Error::Shape {
            op: "encode_image bias",
            left: params.b_f.shape(),
            right: (1, params.embed_dim()),
        });
    }
    let mut projected = regions.matmul(&params.w_f)?;
    let rows = (0..projected.rows())
        .map(|i| {
            let row = projected.row_mut(i);
            axpy(row, 1.0, params.b_f.data());
            l2_normalize_with_norm(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageForward { rows })
}

/// Accumulates `dL/dW_f`, `dL/db_f` into `grads` given `dL/dV`.
pub fn encode_image_backward(
    regions: &DenseMatrix,
    cache: &ImageForward,
    grad_out: &DenseMatrix,
    grads: &mut ImageEncoderParams,
) {
    for (o, nz) in cache.rows.iter().enumerate() {
        let g_pre = l2_normalize_backward(nz, grad_out.row(o));
        grads.w_f.add_outer(regions.row(o), &g_pre, 1.0);
        axpy(grads.b_f.data_mut(), 1.0, &g_pre);
    }
}

/// Intermediate values of one GRU step, kept for backprop.
#[derive(Debug, Clone, PartialEq)]
pub struct GruStep {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub candidate: Vec<f64>,
    pub h: Vec<f64>,
}

fn affine(w: &DenseMatrix, x: &[f64], u: &DenseMatrix, h: &[f64], b: &DenseMatrix) -> Vec<f64> {
    let mut out = w.mat_vec(x);
    axpy(&mut out, 1.0, &u.mat_vec(h));
    axpy(&mut out, 1.0, b.data());
    out
}

/// One GRU step:
///
/// ```text
/// z = σ(W_z x + U_z h + b_z)
/// r = σ(W_r x + U_r h + b_r)
/// h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
pub fn gru_step(x: &[f64], h_prev: &[f64], gates: &GruParams) -> Result<Vec<f64>> {
    gates.check()?;
    if x.len() != gates.input_dim() || h_prev.len() != gates.hidden() {
        return Err(Error::Shape {
            op: "gru_step",
            left: (x.len(), h_prev.len()),
            right: (gates.input_dim(), gates.hidden()),
        });
    }
    Ok(gru_step_cached(x, h_prev, gates).h)
}

pub(crate) fn gru_step_cached(x: &[f64], h_prev: &[f64], g: &GruParams) -> GruStep {
    let z: Vec<f64> = affine(&g.w_z, x, &g.u_z, h_prev, &g.b_z)
        .into_iter()
        .map(sigmoid)
        .collect();
    let r: Vec<f64> = affine(&g.w_r, x, &g.u_r, h_prev, &g.b_r)
        .into_iter()
        .map(sigmoid)
        .collect();
    let gated: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    let candidate: Vec<f64> = affine(&g.w_h, x, &g.u_h, &gated, &g.b_h)
        .into_iter()
        .map(f64::tanh)
        .collect();
    let h = (0..h_prev.len())
        .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * candidate[i])
        .collect();
    GruStep {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        z,
        r,
        candidate,
        h,
    }
}

/// Backprop through one step. Accumulates weight gradients into `grads` and
/// returns `(dL/dx, dL/dh_prev)`.
pub fn gru_step_backward(
    step: &GruStep,
    gates: &GruParams,
    grad_h: &[f64],
    grads: &mut GruParams,
) -> (Vec<f64>, Vec<f64>) {
    let n = step.h.len();
    let mut g_x = vec![0.0; step.x.len()];
    let mut g_hprev: Vec<f64> = (0..n).map(|i| grad_h[i] * (1.0 - step.z[i])).collect();

    // candidate branch
    let g_ah: Vec<f64> = (0..n)
        .map(|i| grad_h[i] * step.z[i] * (1.0 - step.candidate[i] * step.candidate[i]))
        .collect();
    let gated: Vec<f64> = step.r.iter().zip(&step.h_prev).map(|(a, b)| a * b).collect();
    grads.w_h.add_outer(&g_ah, &step.x, 1.0);
    grads.u_h.add_outer(&g_ah, &gated, 1.0);
    axpy(grads.b_h.data_mut(), 1.0, &g_ah);
    axpy(&mut g_x, 1.0, &gates.w_h.mat_t_vec(&g_ah));
    let g_gated = gates.u_h.mat_t_vec(&g_ah);
    let g_r: Vec<f64> = (0..n).map(|i| g_gated[i] * step.h_prev[i]).collect();
    for i in 0..n {
        g_hprev[i] += g_gated[i] * step.r[i];
    }

    // update gate
    let g_az: Vec<f64> = (0..n)
        .map(|i| grad_h[i] * (step.candidate[i] - step.h_prev[i]) * step.z[i] * (1.0 - step.z[i]))
        .collect();
    // reset gate
    let g_ar: Vec<f64> = (0..n)
        .map(|i| g_r[i] * step.r[i] * (1.0 - step.r[i]))
        .collect();

    grads.w_z.add_outer(&g_az, &step.x, 1.0);
    grads.u_z.add_outer(&g_az, &step.h_prev, 1.0);
    axpy(grads.b_z.data_mut(), 1.0, &g_az);
    grads.w_r.add_outer(&g_ar, &step.x, 1.0);
    grads.u_r.add_outer(&g_ar, &step.h_prev, 1.0);
    axpy(grads.b_r.data_mut(), 1.0, &g_ar);

    axpy(&mut g_x, 1.0, &gates.w_z.mat_t_vec(&g_az));
    axpy(&mut g_x, 1.0, &gates.w_r.mat_t_vec(&g_ar));
    axpy(&mut g_hprev, 1.0, &gates.u_z.mat_t_vec(&g_az));
    axpy(&mut g_hprev, 1.0, &gates.u_r.mat_t_vec(&g_ar));
    (g_x, g_hprev)
}

/// Cached forward pass of [`encode_text`].
#[derive(Debug, Clone)]
pub struct TextForward {
    tokens: Vec<usize>,
    forward_steps: Vec<GruStep>,
    /// indexed by sequence position, not by scan order
    backward_steps: Vec<GruStep>,
    rows: Vec<Normalized>,
}

impl TextForward {
    pub fn output(&self) -> DenseMatrix {
        rows_to_matrix(&self.rows)
    }
}

pub fn encode_text(tokens: &TokenSequence, params: &TextEncoderParams) -> Result<DenseMatrix> {
    Ok(encode_text_forward(&tokens.tokens, params)?.output())
}

/// Runs both GRU directions and emits `normalize((h_fwd_j + h_bwd_j) / 2)`
/// for every position `j`.
pub fn encode_text_forward(tokens: &[usize], params: &TextEncoderParams) -> Result<TextForward> {
    if tokens.is_empty() {
        return Err(Error::Empty("encode_text"));
    }
    params.check()?;
    let vocab = params.vocab_size();
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::invalid(format!(
            "token index {bad} outside vocabulary of {vocab}"
        )));
    }
    let hidden = params.hidden();
    let s = tokens.len();

    let mut forward_steps = Vec::with_capacity(s);
    let mut h = vec![0.0; hidden];
    for &tok in tokens {
        let step = gru_step_cached(params.embed.row(tok), &h, &params.forward);
        h.clone_from(&step.h);
        forward_steps.push(step);
    }

    let mut backward_steps = Vec::with_capacity(s);
    let mut h = vec![0.0; hidden];
    for &tok in tokens.iter().rev() {
        let step = gru_step_cached(params.embed.row(tok), &h, &params.backward);
        h.clone_from(&step.h);
        backward_steps.push(step);
    }
    backward_steps.reverse();

    let rows = forward_steps
        .iter()
        .zip(&backward_steps)
        .map(|(f, b)| {
            let avg: Vec<f64> = f.h.iter().zip(&b.h).map(|(x, y)| 0.5 * (x + y)).collect();
            l2_normalize_with_norm(&avg)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(TextForward {
        tokens: tokens.to_vec(),
        forward_steps,
        backward_steps,
        rows,
    })
}

/// Backprop through time for both directions and the embedding lookup.
pub fn encode_text_backward(
    cache: &TextForward,
    params: &TextEncoderParams,
    grad_out: &DenseMatrix,
    grads: &mut TextEncoderParams,
) {
    let s = cache.tokens.len();
    let hidden = params.hidden();
    let g_avg: Vec<Vec<f64>> = cache
        .rows
        .iter()
        .enumerate()
        .map(|(j, nz)| {
            l2_normalize_backward(nz, grad_out.row(j))
                .into_iter()
                .map(|g| 0.5 * g)
                .collect()
        })
        .collect();

    let mut carry = vec![0.0; hidden];
    for j in (0..s).rev() {
        let mut g = g_avg[j].clone();
        axpy(&mut g, 1.0, &carry);
        let (g_x, g_h) =
            gru_step_backward(&cache.forward_steps[j], &params.forward, &g, &mut grads.forward);
        axpy(grads.embed.row_mut(cache.tokens[j]), 1.0, &g_x);
        carry = g_h;
    }

    let mut carry = vec![0.0; hidden];
    for (j, g_j) in g_avg.iter().enumerate() {
        let mut g = g_j.clone();
        axpy(&mut g, 1.0, &carry);
        let (g_x, g_h) =
            gru_step_backward(&cache.backward_steps[j], &params.backward, &g, &mut grads.backward);
        axpy(grads.embed.row_mut(cache.tokens[j]), 1.0, &g_x);
        carry = g_h;
    }
}

fn rows_to_matrix(rows: &[Normalized]) -> DenseMatrix {
    let cols = rows.first().map_or(0, |r| r.unit.len());
    let data = rows.iter().flat_map(|r| r.unit.iter().copied()).collect();
    DenseMatrix::new(rows.len(), cols, data).expect("normalized rows are finite")
}
