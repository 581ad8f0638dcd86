//! Dense reference implementations for tests.
//!
//! Everything here materializes full matrices with `nalgebra` and shares no
//! numerical kernels with `moe-laplace`; only the model's parameter storage
//! is read from it. Sizes are capped so these never end up on a hot path.

use moe_laplace::model::{Activation, MoEModel};
use nalgebra::{DMatrix, DVector};

/// Largest `d_in · d_out` block the oracle will assemble.
pub const MAX_BLOCK: usize = 64;
/// Largest class count the oracle will handle.
pub const MAX_CLASSES: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("{what} is {size}, oracle limit is {limit}")]
    TooLarge {
        what: &'static str,
        size: usize,
        limit: usize,
    },
    #[error("{0}")]
    Shape(String),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
}

pub type Result<T> = std::result::Result<T, OracleError>;

fn guard(what: &'static str, size: usize, limit: usize) -> Result<()> {
    if size > limit {
        Err(OracleError::TooLarge { what, size, limit })
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Sum,
    Mean,
}

/// Row-major `rows × cols` data into a dense matrix.
pub fn dense(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

pub fn from_matrix(m: &moe_laplace::linalg::Matrix) -> DMatrix<f64> {
    dense(m.rows(), m.cols(), m.data())
}

/// Column-major vectorization.
pub fn vec_col_major(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// `Σ_n (aₙaₙᵀ) ⊗ (gₙgₙᵀ)`, divided by `N` under [`Normalization::Mean`].
pub fn dense_fisher(a_stream: &[Vec<f64>], g_stream: &[Vec<f64>], norm: Normalization) -> Result<DMatrix<f64>> {
    if a_stream.len() != g_stream.len() {
        return Err(OracleError::Shape("a and g streams differ in length".into()));
    }
    let (Some(a0), Some(g0)) = (a_stream.first(), g_stream.first()) else {
        return Ok(DMatrix::zeros(0, 0));
    };
    let (din, dout) = (a0.len(), g0.len());
    guard("d_in·d_out", din * dout, MAX_BLOCK)?;
    let d = din * dout;
    let mut f = DMatrix::zeros(d, d);
    for (a, g) in a_stream.iter().zip(g_stream) {
        if a.len() != din || g.len() != dout {
            return Err(OracleError::Shape("ragged stream".into()));
        }
        let a = DVector::from_column_slice(a);
        let g = DVector::from_column_slice(g);
        f += (&a * a.transpose()).kronecker(&(&g * g.transpose()));
    }
    if norm == Normalization::Mean {
        f /= a_stream.len() as f64;
    }
    Ok(f)
}

/// Empty-stream variant of [`dense_fisher`] with explicit dimensions.
pub fn dense_fisher_zeros(d_in: usize, d_out: usize) -> Result<DMatrix<f64>> {
    guard("d_in·d_out", d_in * d_out, MAX_BLOCK)?;
    Ok(DMatrix::zeros(d_in * d_out, d_in * d_out))
}

/// `(L_a L_aᵀ) ⊗ (L_g L_gᵀ)`.
pub fn dense_kfac(la: &DMatrix<f64>, lg: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    guard("d_in·d_out", la.nrows() * lg.nrows(), MAX_BLOCK)?;
    Ok((la * la.transpose()).kronecker(&(lg * lg.transpose())))
}

/// `F + λI`.
pub fn dense_precision(f: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    guard("precision dimension", f.nrows(), MAX_BLOCK)?;
    Ok(f + DMatrix::identity(f.nrows(), f.ncols()) * lambda)
}

/// `(F + λI)⁻¹` by direct inversion.
pub fn dense_posterior_covariance(f: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    dense_precision(f, lambda)?
        .try_inverse()
        .ok_or(OracleError::NotPositiveDefinite)
}

/// `log det A` of a symmetric positive definite matrix.
pub fn dense_logdet(a: &DMatrix<f64>) -> Result<f64> {
    guard("matrix dimension", a.nrows(), MAX_BLOCK)?;
    let c = a.clone().cholesky().ok_or(OracleError::NotPositiveDefinite)?;
    Ok(2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Log evidence `fit + ½ s Σ log det(F_e + λI) − ½ λ Σ ‖W_e‖²` where `s` is
/// `+1` for the Hessian sign and `-1` for the covariance sign.
pub fn dense_evidence(map_fit: f64, blocks: &[(DMatrix<f64>, DMatrix<f64>)], lambda: f64, sign: f64) -> Result<f64> {
    let mut total = map_fit;
    for (f, w) in blocks {
        total += 0.5 * sign * dense_logdet(&dense_precision(f, lambda)?)?;
        total -= 0.5 * lambda * w.norm_squared();
    }
    Ok(total)
}

/// `Σ_e J_e Σ_e J_eᵀ`, where row `i` of `J_e` is `vec(∂ logitᵢ / ∂W_e)`.
pub fn dense_predictive_covariance(blocks: &[(DMatrix<f64>, DMatrix<f64>)]) -> Result<DMatrix<f64>> {
    let Some((j0, _)) = blocks.first() else {
        return Err(OracleError::Shape("no blocks".into()));
    };
    let k = j0.nrows();
    guard("class count", k, MAX_CLASSES)?;
    let mut out = DMatrix::zeros(k, k);
    for (j, sigma) in blocks {
        if j.nrows() != k || j.ncols() != sigma.nrows() {
            return Err(OracleError::Shape("jacobian and covariance do not conform".into()));
        }
        out += j * sigma * j.transpose();
    }
    Ok(out)
}

/// Stacks per-class gradient matrices into a Jacobian with rows `vec(Gᵢ)`.
pub fn jacobian_rows(per_class: &[DMatrix<f64>]) -> DMatrix<f64> {
    let d = per_class.first().map_or(0, |g| g.len());
    let mut j = DMatrix::zeros(per_class.len(), d);
    for (i, g) in per_class.iter().enumerate() {
        j.row_mut(i).copy_from(&vec_col_major(g).transpose());
    }
    j
}

fn act(kind: Activation, z: f64) -> f64 {
    match kind {
        Activation::Relu => {
            if z > 0.0 {
                z
            } else {
                0.0
            }
        }
        Activation::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * z * (1.0 + (c * (z + 0.044715 * z.powi(3))).tanh())
        }
        Activation::Silu => z / (1.0 + (-z).exp()),
        Activation::Identity => z,
    }
}

/// Independent forward pass: dense matrix products, a full sort for top-k
/// routing (ties to the lower expert id) and a renormalized softmax.
pub fn straight_line_forward(model: &MoEModel, x: &[f64]) -> Result<Vec<f64>> {
    let c = model.config();
    guard("class count", c.num_classes, MAX_CLASSES)?;
    if x.len() != c.d_input {
        return Err(OracleError::Shape(format!(
            "input has length {}, expected {}",
            x.len(),
            c.d_input
        )));
    }
    let mut h = from_matrix(model.encoder()) * DVector::from_column_slice(x);
    for layer in model.layers() {
        let scores = from_matrix(&layer.gate.w_gate) * &h;
        let mut ranked: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
        ranked.sort_by(|p, q| q.1.partial_cmp(&p.1).unwrap().then(p.0.cmp(&q.0)));
        ranked.truncate(c.top_k.min(c.num_experts));
        let top = ranked.first().map_or(0.0, |r| r.1);
        let z: f64 = ranked.iter().map(|r| (r.1 - top).exp()).sum();
        let mut out = if c.residual {
            h.clone()
        } else {
            DVector::zeros(c.d_model)
        };
        for (e, s) in ranked {
            let weight = (s - top).exp() / z;
            let ex = &layer.experts[e];
            let hidden = (from_matrix(&ex.w1) * &h).map(|v| act(c.activation, v));
            out += (from_matrix(&ex.w2) * hidden) * weight;
        }
        h = out;
    }
    Ok((from_matrix(model.head()) * h).as_slice().to_vec())
}
