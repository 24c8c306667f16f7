//! PCA + total-variation decomposition of a pathological image.
//!
//! With `Î = I - M` the mean-subtracted image, the ROF-type model solves
//!
//! ```text
//! min_{S, α}  γ/2 ‖Î - S - Bα‖² + ‖∇S‖_{2,1}
//! ```
//!
//! Because `B` is orthonormal the inner minimum over `α` is attained at
//! `α = Bᵀ(Î - S)`, leaving a TV problem in `S` whose data term uses the
//! projector `P = Id - BBᵀ`. The proximal map of that term is available in
//! closed form, `(Id + τγP)⁻¹ = Id - τγ/(1+τγ) P`, so each primal-dual
//! iteration costs one gradient, one divergence and one projection.
//!
//! The quasi-normal image is `L = I - S`, so `L + S = I` holds exactly.

use nalgebra::{DMatrix, DVector};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{divergence_into, forward_gradient_into, Geometry, Grid};
use crate::memory::matrix_bytes;
use crate::pca::{Coefficients, PcaBasis};

/// Fidelity weights tried during cross-validation of 2D cases.
pub const GAMMA_GRID_2D: [f64; 6] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
/// Fidelity weights tried during cross-validation of 3D cases.
pub const GAMMA_GRID_3D: [f64; 5] = [1.0, 1.5, 2.0, 2.5, 3.0];
/// Fidelity weight for real-data runs without iterative regularization.
pub const GAMMA_UNREGULARIZED: f64 = 5.0;
/// Fidelity weight for real-data runs with iterative regularization.
pub const GAMMA_REGULARIZED: f64 = 2.0;

/// Ratio of the default dual to primal step. The dual variable lives on
/// the unit ball at every voxel while `S` is small, so a larger dual step
/// converges several times faster than `tau = sigma`.
const STEP_BALANCE: f64 = 4.0;
const TVL1_IRLS_ITERS: usize = 20;
const TVL1_IRLS_EPS: f64 = 1e-6;
const TVL1_ALPHA_EVERY: usize = 10;

/// Data-fidelity model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Quadratic fidelity, solved exactly by primal-dual iterations.
    #[default]
    Rof,
    /// L1 fidelity, solved by alternating primal-dual steps with IRLS updates of α.
    Tvl1,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rof" => Ok(Self::Rof),
            "tvl1" => Ok(Self::Tvl1),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

/// Primal-dual solver settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverParams {
    pub max_iter: usize,
    /// Threshold on the relative change of the primal iterate and the objective.
    pub tol: f64,
    /// Primal step. `None` picks `1/(4L)` with `L² = 4d/h²`.
    pub tau: Option<f64>,
    /// Dual step. `None` picks `4/L`.
    pub sigma: Option<f64>,
    pub theta: f64,
    /// Start each regularization step from the previous abnormal part instead of zero.
    pub warm_start: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            tol: 1e-6,
            tau: None,
            sigma: None,
            theta: 1.0,
            warm_start: false,
        }
    }
}

impl SolverParams {
    /// Resolved `(tau, sigma)` for a grid, checking `tau * sigma * L² <= 1`.
    pub fn steps(&self, geom: &Geometry) -> Result<(f64, f64)> {
        let l2 = geom.gradient_norm_bound();
        let l = l2.sqrt();
        let tau = self.tau.unwrap_or(1.0 / (STEP_BALANCE * l));
        let sigma = self.sigma.unwrap_or(STEP_BALANCE / l);
        if !(tau > 0.0 && sigma > 0.0) {
            return Err(Error::Invalid("step sizes must be positive".into()));
        }
        if tau * sigma * l2 > 1.0 + 1e-12 {
            return Err(Error::Invalid(format!(
                "tau * sigma * L^2 = {} exceeds 1",
                tau * sigma * l2
            )));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Invalid(format!(
                "theta {} outside [0, 1]",
                self.theta
            )));
        }
        if self.max_iter == 0 || !(self.tol >= 0.0) {
            return Err(Error::Invalid(
                "max_iter must be positive and tol nonnegative".into(),
            ));
        }
        Ok((tau, sigma))
    }
}

/// One decomposition problem.
#[derive(Debug, Clone)]
pub struct DecompProblem<'a> {
    pub basis: &'a PcaBasis,
    /// Image in original intensities (the mean is subtracted internally).
    pub image: &'a Grid,
    pub gamma: f64,
    pub variant: Variant,
    pub solver: SolverParams,
}

impl<'a> DecompProblem<'a> {
    pub fn new(basis: &'a PcaBasis, image: &'a Grid, gamma: f64) -> Self {
        Self {
            basis,
            image,
            gamma,
            variant: Variant::Rof,
            solver: SolverParams::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        self.basis
            .geometry()
            .ensure_same(self.image.geometry(), "image vs basis")?;
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Invalid(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        self.solver.steps(self.image.geometry())?;
        Ok(())
    }

    fn centered(&self) -> Vec<f64> {
        self.image
            .data()
            .iter()
            .zip(self.basis.mean().data())
            .map(|(a, b)| a - b)
            .collect()
    }
}

/// Convergence record of a single inner solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub energy_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompResult {
    /// `L = I - S`.
    pub quasi_normal: Grid,
    /// `S`.
    pub abnormal: Grid,
    pub alpha: Coefficients,
    /// Objective per iteration of the last inner solve.
    pub energy_trace: Vec<f64>,
    /// Iterations summed over all inner solves.
    pub iterations: usize,
    /// True when every inner solve met the tolerance.
    pub converged: bool,
    /// One entry per inner solve (one for plain decomposition, `N + 1` with regularization).
    pub solves: Vec<SolveReport>,
}

impl DecompResult {
    pub fn objective(&self) -> f64 {
        self.solves.last().map_or(0.0, |s| s.objective)
    }

    fn assemble(
        image: &Grid,
        abnormal: Vec<f64>,
        alpha: Vec<f64>,
        solves: Vec<SolveReport>,
    ) -> Self {
        let quasi = image
            .data()
            .iter()
            .zip(&abnormal)
            .map(|(i, s)| i - s)
            .collect();
        let last = solves.last().expect("at least one solve");
        DecompResult {
            quasi_normal: image.with_data(quasi),
            abnormal: image.with_data(abnormal),
            alpha: Coefficients(alpha),
            energy_trace: last.energy_trace.clone(),
            iterations: solves.iter().map(|s| s.iterations).sum(),
            converged: solves.iter().all(|s| s.converged),
            solves,
        }
    }
}

/// ROF-type objective `γ/2 ‖P(Î - S)‖² + TV(S)` evaluated directly.
pub fn rof_objective(basis: &PcaBasis, centered: &[f64], abnormal: &Grid, gamma: f64) -> f64 {
    let mut r: Vec<f64> = centered
        .iter()
        .zip(abnormal.data())
        .map(|(a, s)| a - s)
        .collect();
    basis.remove_span(&mut r);
    0.5 * gamma * r.iter().map(|v| v * v).sum::<f64>() + crate::grid::isotropic_tv(abnormal)
}

/// Decomposes with the quadratic-fidelity model.
pub fn decompose_rof(problem: &DecompProblem) -> Result<DecompResult> {
    problem.validate()?;
    let centered = problem.centered();
    let sol = solve_rof(problem, &centered, None)?;
    let alpha = alpha_for(problem.basis, &centered, &sol.abnormal);
    Ok(DecompResult::assemble(
        problem.image,
        sol.abnormal,
        alpha,
        vec![sol.report],
    ))
}

/// Dispatches on `problem.variant`.
pub fn decompose(problem: &DecompProblem) -> Result<DecompResult> {
    match problem.variant {
        Variant::Rof => decompose_rof(problem),
        Variant::Tvl1 => decompose_tvl1(problem),
    }
}

fn alpha_for(basis: &PcaBasis, centered: &[f64], abnormal: &[f64]) -> Vec<f64> {
    let l: Vec<f64> = centered.iter().zip(abnormal).map(|(a, s)| a - s).collect();
    basis.coefficients_of(&l)
}

struct RofSolution {
    abnormal: Vec<f64>,
    report: SolveReport,
}

/// Scratch buffers shared by the primal-dual loops.
struct PrimalDual {
    geom: Geometry,
    tau: f64,
    sigma: f64,
    theta: f64,
    s: Vec<f64>,
    s_bar: Vec<f64>,
    dual: Vec<Vec<f64>>,
    grad: Vec<Vec<f64>>,
    div: Vec<f64>,
    dual_change2: f64,
    dual_norm2: f64,
}

impl PrimalDual {
    fn new(geom: &Geometry, params: &SolverParams, init: Option<&[f64]>) -> Result<Self> {
        let (tau, sigma) = params.steps(geom)?;
        let m = geom.len();
        let d = geom.ndim();
        let s = init.map_or_else(|| vec![0.0; m], <[f64]>::to_vec);
        Ok(Self {
            geom: geom.clone(),
            tau,
            sigma,
            theta: params.theta,
            s_bar: s.clone(),
            s,
            dual: vec![vec![0.0; m]; d],
            grad: vec![vec![0.0; m]; d],
            div: vec![0.0; m],
            dual_change2: 0.0,
            dual_norm2: 0.0,
        })
    }

    /// Dual ascent with projection onto the unit ball, then writes
    /// `S + τ div p` into `self.div`.
    fn dual_step(&mut self) {
        forward_gradient_into(&self.geom, &self.s_bar, &mut self.grad);
        let m = self.s.len();
        let d = self.dual.len();
        let mut change2 = 0.0;
        let mut total2 = 0.0;
        let mut old = [0.0; 3];
        for i in 0..m {
            let mut norm2 = 0.0;
            for (a, (p, g)) in self.dual.iter_mut().zip(&self.grad).enumerate() {
                old[a] = p[i];
                p[i] += self.sigma * g[i];
                norm2 += p[i] * p[i];
            }
            let inv = if norm2 > 1.0 { 1.0 / norm2.sqrt() } else { 1.0 };
            for a in 0..d {
                let p = &mut self.dual[a][i];
                *p *= inv;
                let delta = *p - old[a];
                change2 += delta * delta;
            }
            total2 += norm2 * inv * inv;
        }
        self.dual_change2 = change2;
        self.dual_norm2 = total2;
        divergence_into(&self.geom, &self.dual, &mut self.div);
        for (v, s) in self.div.iter_mut().zip(&self.s) {
            *v = s + self.tau * *v;
        }
    }

    /// Installs a new primal iterate and returns `‖S_new - S_old‖`.
    fn accept(&mut self, new_s: &[f64]) -> f64 {
        let mut change = 0.0;
        for ((s, sb), &n) in self.s.iter_mut().zip(self.s_bar.iter_mut()).zip(new_s) {
            let delta = n - *s;
            change += delta * delta;
            *sb = n + self.theta * delta;
            *s = n;
        }
        change.sqrt()
    }

    /// Change of the last step and the scale it is compared with, both in
    /// the metric `‖S‖²/τ + ‖p‖²/σ`.
    fn metric(&self, primal_change: f64, primal_scale: f64) -> (f64, f64) {
        let change =
            (primal_change * primal_change / self.tau + self.dual_change2 / self.sigma).sqrt();
        let scale = (primal_scale * primal_scale / self.tau + self.dual_norm2 / self.sigma).sqrt();
        (change, scale)
    }

    fn tv(&mut self) -> f64 {
        forward_gradient_into(&self.geom, &self.s, &mut self.grad);
        (0..self.s.len())
            .map(|i| self.grad.iter().map(|g| g[i] * g[i]).sum::<f64>().sqrt())
            .sum()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Stopping test on the estimated distance to the limit.
///
/// The iterates contract roughly geometrically, so the per-iteration change
/// is scaled by `r / (1 - r)` where `r` is the contraction rate measured
/// over the last [`RATE_WINDOW`] iterations.
struct Stopping {
    tol: f64,
    changes: std::collections::VecDeque<f64>,
    previous_objective: f64,
}

const RATE_WINDOW: usize = 10;

impl Stopping {
    fn new(tol: f64) -> Self {
        Self {
            tol,
            changes: std::collections::VecDeque::with_capacity(RATE_WINDOW + 1),
            previous_objective: f64::INFINITY,
        }
    }

    fn update(&mut self, change: f64, scale: f64, objective: f64) -> bool {
        let objective_change = (objective - self.previous_objective).abs();
        self.previous_objective = objective;
        self.changes.push_back(change);
        if self.changes.len() > RATE_WINDOW + 1 {
            self.changes.pop_front();
        }
        if change == 0.0 && objective_change == 0.0 {
            return true;
        }
        if self.changes.len() <= RATE_WINDOW {
            return false;
        }
        let oldest = self.changes[0];
        if oldest <= 0.0 {
            return false;
        }
        let rate = (change / oldest).powf(1.0 / RATE_WINDOW as f64);
        if rate >= 1.0 {
            return false;
        }
        let tail = rate / (1.0 - rate);
        change * tail <= self.tol * scale
            && objective_change * tail <= self.tol * (1.0 + objective.abs())
    }
}

fn solve_rof(
    problem: &DecompProblem,
    centered: &[f64],
    init: Option<&[f64]>,
) -> Result<RofSolution> {
    let basis = problem.basis;
    let gamma = problem.gamma;
    let params = &problem.solver;
    let mut pd = PrimalDual::new(problem.image.geometry(), params, init)?;
    let shrink = pd.tau * gamma / (1.0 + pd.tau * gamma);
    let centered_norm = norm(centered);
    let m = centered.len();
    let mut offset = vec![0.0; m];
    let mut projected = vec![0.0; m];
    let mut new_s = vec![0.0; m];
    let mut trace = Vec::new();
    let mut stopping = Stopping::new(params.tol);
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..params.max_iter {
        iterations = it + 1;
        pd.dual_step();
        // prox: S = Î + w,  w = v' - c P v',  v' = v - Î.
        for ((o, &v), &c) in offset.iter_mut().zip(&pd.div).zip(centered) {
            *o = v - c;
        }
        projected.copy_from_slice(&offset);
        basis.remove_span(&mut projected);
        let mut fidelity = 0.0;
        for i in 0..m {
            new_s[i] = centered[i] + offset[i] - shrink * projected[i];
            // P(Î - S_new) = -(1 - c) P v'
            let r = (1.0 - shrink) * projected[i];
            fidelity += r * r;
        }
        let change = pd.accept(&new_s);
        let objective = 0.5 * gamma * fidelity + pd.tv();
        if !objective.is_finite() || !change.is_finite() {
            return Err(Error::NonFinite(iterations));
        }
        trace.push(objective);
        let (change, scale) = pd.metric(change, norm(&pd.s).max(centered_norm));
        if stopping.update(change, scale, objective) {
            converged = true;
            break;
        }
    }

    let objective = *trace.last().unwrap_or(&0.0);
    Ok(RofSolution {
        abnormal: pd.s,
        report: SolveReport {
            iterations,
            converged,
            objective,
            energy_trace: trace,
        },
    })
}

/// Decomposes with the L1-fidelity model.
///
/// The joint problem is solved by alternation: primal-dual steps in `S`
/// with `α` fixed, and every few steps an IRLS refit of `α` on `Î - S`.
/// This is a heuristic for the nonsmooth joint problem and carries no
/// global-optimality guarantee.
pub fn decompose_tvl1(problem: &DecompProblem) -> Result<DecompResult> {
    problem.validate()?;
    let basis = problem.basis;
    let gamma = problem.gamma;
    let params = &problem.solver;
    let centered = problem.centered();
    let centered_norm = norm(&centered);
    let m = centered.len();
    let mut pd = PrimalDual::new(problem.image.geometry(), params, None)?;
    let mut alpha = basis.coefficients_of(&centered);
    let mut target = sub(&centered, &basis.combine(&alpha));
    let mut new_s = vec![0.0; m];
    let mut trace = Vec::new();
    let mut stopping = Stopping::new(params.tol);
    let mut converged = false;
    let mut iterations = 0;
    let thresh = pd.tau * gamma;

    for it in 0..params.max_iter {
        iterations = it + 1;
        pd.dual_step();
        for i in 0..m {
            let f = target[i];
            new_s[i] = f + soft(pd.div[i] - f, thresh);
        }
        let change = pd.accept(&new_s);
        if basis.k() > 0 && iterations % TVL1_ALPHA_EVERY == 0 {
            alpha = irls_l1_fit(basis, &sub(&centered, &pd.s), &alpha)?;
            target = sub(&centered, &basis.combine(&alpha));
        }
        let fidelity: f64 = target.iter().zip(&pd.s).map(|(f, s)| (f - s).abs()).sum();
        let objective = gamma * fidelity + pd.tv();
        if !objective.is_finite() || !change.is_finite() {
            return Err(Error::NonFinite(iterations));
        }
        trace.push(objective);
        let (change, scale) = pd.metric(change, norm(&pd.s).max(centered_norm));
        if stopping.update(change, scale, objective) {
            converged = true;
            break;
        }
    }

    let objective = *trace.last().unwrap_or(&0.0);
    let report = SolveReport {
        iterations,
        converged,
        objective,
        energy_trace: trace,
    };
    Ok(DecompResult::assemble(
        problem.image,
        pd.s,
        alpha,
        vec![report],
    ))
}

/// TV-L1 objective `γ‖Î - S - Bα‖₁ + TV(S)`.
pub fn tvl1_objective(
    basis: &PcaBasis,
    centered: &[f64],
    abnormal: &Grid,
    alpha: &[f64],
    gamma: f64,
) -> f64 {
    let fit = basis.combine(alpha);
    let fidelity: f64 = centered
        .iter()
        .zip(abnormal.data())
        .zip(&fit)
        .map(|((c, s), b)| (c - s - b).abs())
        .sum();
    gamma * fidelity + crate::grid::isotropic_tv(abnormal)
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn soft(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

/// Approximately minimises `‖x - Bα‖₁` by iteratively reweighted least squares.
fn irls_l1_fit(basis: &PcaBasis, x: &[f64], start: &[f64]) -> Result<Vec<f64>> {
    let b = basis.modes();
    let (m, k) = b.shape();
    let xv = DVector::from_column_slice(x);
    let mut alpha = DVector::from_column_slice(start);
    for _ in 0..TVL1_IRLS_ITERS {
        let r = &xv - b * &alpha;
        let w: Vec<f64> = r
            .iter()
            .map(|ri| 1.0 / (ri * ri + TVL1_IRLS_EPS * TVL1_IRLS_EPS).sqrt())
            .collect();
        let wb = DMatrix::from_fn(m, k, |i, j| w[i] * b[(i, j)]);
        let normal = b.transpose() * &wb;
        let rhs = wb.transpose() * &xv;
        alpha = normal
            .cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or(Error::NonFinite(0))?;
    }
    Ok(alpha.iter().copied().collect())
}

/// ROF decomposition followed by `steps` rounds of iterative regularization.
///
/// Round `k` re-solves on `Î_k = Î + L̃_{k-1} - Bα_{k-1}`, that is the
/// input plus the off-span part of the previous quasi-normal estimate.
/// The returned quasi-normal image is `I - S_N` and `alpha` is `α_N`.
pub fn iterative_regularize(problem: &DecompProblem, steps: usize) -> Result<DecompResult> {
    if problem.variant != Variant::Rof {
        return Err(Error::Invalid(
            "iterative regularization is defined for the ROF model only".into(),
        ));
    }
    problem.validate()?;
    let basis = problem.basis;
    let centered = problem.centered();
    let first = solve_rof(problem, &centered, None)?;
    let mut alpha = alpha_for(basis, &centered, &first.abnormal);
    let mut abnormal = first.abnormal;
    let mut current = centered.clone();
    let mut solves = vec![first.report];

    for step in 1..=steps {
        // L̃ - Bα = P(Î_{k-1} - S_{k-1}).
        let mut residual = sub(&current, &abnormal);
        basis.remove_span(&mut residual);
        current = centered.iter().zip(&residual).map(|(c, r)| c + r).collect();
        let init = problem.solver.warm_start.then_some(abnormal.as_slice());
        let sol = solve_rof(problem, &current, init)
            .map_err(|e| e.context(format!("regularization step {step}")))?;
        alpha = alpha_for(basis, &current, &sol.abnormal);
        abnormal = sol.abnormal;
        solves.push(sol.report);
    }
    Ok(DecompResult::assemble(
        problem.image,
        abnormal,
        alpha,
        solves,
    ))
}

/// Bytes one ROF solve holds on `geom` besides the basis: the primal,
/// dual and scratch vectors plus `k` coefficients.
pub fn working_set_bytes(geom: &Geometry, k: usize) -> usize {
    let m = geom.len();
    // S, S̄, div, offset, projection, new S, Î, regularized input, output.
    matrix_bytes(m, 9 + 2 * geom.ndim()) + matrix_bytes(k, 1)
}

/// Voxels where `|S| > threshold`, as a 0/1 grid.
pub fn abnormality_mask(result: &DecompResult, threshold: f64) -> Grid {
    result
        .abnormal
        .map(|s| if s.abs() > threshold { 1.0 } else { 0.0 })
}
