//! Low-rank plus sparse decomposition `D = L + S` minimising
//! `‖L‖_* + λ‖S‖₁`, solved with the inexact augmented Lagrangian method.
//!
//! This is the baseline the PCA model is compared against: it needs the
//! whole population in one matrix and a full SVD per iteration.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::memory::{matrix_bytes, MemoryLedger};

/// Sparse weights tried during cross-validation of 2D cases.
pub const LAMBDA_GRID_2D: [f64; 7] = [0.005, 0.0067, 0.0084, 0.01, 0.0117, 0.0133, 0.015];

/// Column-per-image data matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix(DMatrix<f64>);

impl DataMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.ncols() == 0 || entries.nrows() == 0 {
            return Err(Error::Invalid(
                "data matrix needs at least one column".into(),
            ));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("data matrix has non-finite entries".into()));
        }
        Ok(Self(entries))
    }

    /// Stacks vectorised images as columns.
    pub fn from_images(images: &[Grid]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Invalid("no images".into()))?;
        for (j, img) in images.iter().enumerate() {
            first
                .geometry()
                .ensure_same(img.geometry(), &format!("column {j}"))?;
        }
        let m = first.len();
        Self::new(DMatrix::from_fn(m, images.len(), |i, j| {
            images[j].data()[i]
        }))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn m(&self) -> usize {
        self.0.nrows()
    }

    pub fn n(&self) -> usize {
        self.0.ncols()
    }
}

/// Inexact ALM settings.
#[derive(Debug, Clone, PartialEq)]
pub struct AlmParams {
    /// Initial penalty. `None` uses `1.25 / σ₁(D)`.
    pub mu0: Option<f64>,
    pub rho: f64,
    /// Stop when `‖D - L - S‖_F / ‖D‖_F` drops below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for AlmParams {
    fn default() -> Self {
        Self {
            mu0: None,
            rho: 1.5,
            tol: 1e-7,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpcaResult {
    pub low_rank: DMatrix<f64>,
    pub sparse: DMatrix<f64>,
    pub rank_est: usize,
    pub iterations: usize,
    /// Final `‖D - L - S‖_F / ‖D‖_F`.
    pub residual: f64,
    pub residual_trace: Vec<f64>,
    pub converged: bool,
    /// Peak bytes of the matrices held by the solver.
    pub peak_bytes: usize,
}

/// Default sparse weight `1 / sqrt(max(m, n))`.
pub fn default_lambda(m: usize, n: usize) -> f64 {
    1.0 / (m.max(n) as f64).sqrt()
}

/// Elementwise soft thresholding, the proximal map of `tau ‖·‖₁`.
pub fn shrink(x: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    x.map(|v| soft(v, tau))
}

fn soft(v: f64, tau: f64) -> f64 {
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        0.0
    }
}

/// Singular value thresholding, the proximal map of `tau ‖·‖_*`.
pub fn svt(x: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    svt_with_rank(x, tau).map(|(y, _)| y)
}

fn svt_with_rank(x: &DMatrix<f64>, tau: f64) -> Result<(DMatrix<f64>, usize)> {
    let svd = crate::svd::thin_svd(x)?;
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    let mut rank = 0;
    for (j, &s) in svd.sigma.iter().enumerate() {
        let t = s - tau;
        if t <= 0.0 {
            continue;
        }
        rank += 1;
        out.ger(t, &svd.u.column(j), &svd.v.column(j), 1.0);
    }
    Ok((out, rank))
}

/// Spectral norm via the singular values of `x`.
fn spectral_norm(x: &DMatrix<f64>) -> Result<f64> {
    Ok(crate::svd::thin_svd(x)?
        .sigma
        .first()
        .copied()
        .unwrap_or(0.0))
}

/// Robust PCA by inexact ALM.
///
/// Iterates `S ← shrink(D - L + Y/μ, λ/μ)`, `L ← svt(D - S + Y/μ, 1/μ)`,
/// `Y ← Y + μ(D - L - S)`, `μ ← ρμ` until the relative residual is below
/// `params.tol` or `params.max_iter` is reached. Running out of iterations
/// is reported through `converged`, not as an error.
pub fn rpca(d: &DataMatrix, lambda: f64, params: &AlmParams) -> Result<RpcaResult> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Invalid(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    if !(params.rho >= 1.0 && params.tol > 0.0 && params.max_iter > 0) {
        return Err(Error::Invalid(
            "rho >= 1, tol > 0 and max_iter > 0 required".into(),
        ));
    }
    let dm = d.matrix();
    let (m, n) = dm.shape();
    let full = matrix_bytes(m, n);
    let mut ledger = MemoryLedger::new();
    ledger.alloc(full); // D
    ledger.alloc(3 * full); // L, S, Y

    let d_norm = dm.norm();
    if d_norm == 0.0 {
        return Ok(RpcaResult {
            low_rank: DMatrix::zeros(m, n),
            sparse: DMatrix::zeros(m, n),
            rank_est: 0,
            iterations: 1,
            residual: 0.0,
            residual_trace: vec![0.0],
            converged: true,
            peak_bytes: ledger.peak(),
        });
    }

    let spectral = spectral_norm(dm)?;
    let inf_norm = dm.amax();
    let dual_scale = spectral.max(inf_norm / lambda);
    let mut y = dm / dual_scale;
    let mut mu = params.mu0.unwrap_or(1.25 / spectral);
    let mu_max = mu * 1e7;
    let mut low = DMatrix::zeros(m, n);
    let mut sparse = DMatrix::zeros(m, n);
    let mut trace = Vec::new();
    let mut rank_est = 0;
    let mut converged = false;
    let mut iterations = 0;
    let r = m.min(n);
    // SVD workspace: QR copy of the input, Q, U, the two r x r Jacobi factors and V.
    let svd_bytes =
        full + 2 * matrix_bytes(m.max(n), r) + 2 * matrix_bytes(r, r) + matrix_bytes(m.min(n), r);

    for it in 0..params.max_iter {
        iterations = it + 1;
        ledger.alloc(full); // shared temporary
        let inv_mu = 1.0 / mu;
        let temp = dm - &low + &y * inv_mu;
        sparse = shrink(&temp, lambda * inv_mu);
        let temp = dm - &sparse + &y * inv_mu;
        ledger.transient(svd_bytes);
        let (l_new, rank) = svt_with_rank(&temp, inv_mu)?;
        low = l_new;
        rank_est = rank;
        let z = dm - &low - &sparse;
        y += &z * mu;
        ledger.free(full);
        mu = (mu * params.rho).min(mu_max);

        let residual = z.norm() / d_norm;
        if !residual.is_finite() {
            return Err(Error::NonFinite(iterations));
        }
        trace.push(residual);
        if residual < params.tol {
            converged = true;
            break;
        }
    }

    Ok(RpcaResult {
        low_rank: low,
        sparse,
        rank_est,
        iterations,
        residual: *trace.last().unwrap_or(&0.0),
        residual_trace: trace,
        converged,
        peak_bytes: ledger.peak(),
    })
}
