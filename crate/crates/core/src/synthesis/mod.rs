//! Data-driven gain synthesis.
//!
//! The robust program minimizes `tr P + tr L + alpha tr V` over
//! `(Q, P, L, V)` subject to
//!
//! ```text
//! X+ Q P^-1 Q' X+' - P + I <= 0,   P >= I,   X- Q = P,
//! L >= U Q P^-1 Q' U',             V >= Q P^-1 Q'.
//! ```
//!
//! It is solved in convex form: every `Q P^-1 Q'` product becomes a Schur
//! complement block, and the coupling `X- Q = P` is eliminated by writing
//! `Q = G P + N Z` with `G` a right inverse of `X-` and `N` a basis of its
//! null space. `P` is a symmetric decision variable, so the coupling and
//! the symmetry of `X- Q` hold exactly.
//!
//! The ideal program replaces `X+` by `X+ - D` and drops the `V` term.

pub mod conic;
pub mod ipm;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use conic::{ConicProblem, ConicSolution, ConicStatus, SolverBackend, SolverStats, SymEntry};
pub use ipm::{InteriorPoint, IpmSettings};

use crate::data_window::{rank_check, DataTriple};
use crate::error::{Error, Result};
use crate::numerics::{
    max_eigenvalue, min_eigenvalue, null_space, pseudo_inverse, spectral_radius, to_rows, Matrix,
};
use conic::{Affine, LmiBuilder};

#[derive(Debug, Clone, PartialEq)]
pub struct SdpProblemData {
    pub u_minus: Matrix,
    pub x_minus: Matrix,
    pub x_plus: Matrix,
    pub alpha: f64,
}

impl SdpProblemData {
    pub fn new(u_minus: Matrix, x_minus: Matrix, x_plus: Matrix, alpha: f64) -> Result<Self> {
        let t = DataTriple::new(u_minus, x_minus, x_plus)?;
        Self::from_triple(&t, alpha)
    }

    pub fn from_triple(t: &DataTriple, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
        }
        for (m, what) in [(&t.u_minus, "U"), (&t.x_minus, "X-"), (&t.x_plus, "X+")] {
            crate::numerics::ensure_finite(m, what)?;
        }
        Ok(Self {
            u_minus: t.u_minus.clone(),
            x_minus: t.x_minus.clone(),
            x_plus: t.x_plus.clone(),
            alpha,
        })
    }

    pub fn n_x(&self) -> usize {
        self.x_minus.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.u_minus.nrows()
    }

    pub fn len(&self) -> usize {
        self.x_minus.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn w(&self) -> Matrix {
        DataTriple {
            u_minus: self.u_minus.clone(),
            x_minus: self.x_minus.clone(),
            x_plus: self.x_plus.clone(),
        }
        .w()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfeasibilityReason {
    /// `W = [U; X-]` fails the rank test.
    RankCondition,
    /// `X-` lacks full row rank, so no `P > 0` satisfies `X- Q = P`.
    StateDataRank,
    /// Certified by the backend.
    Certificate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SdpStats {
    pub backend: String,
    pub iterations: usize,
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
    pub relative_gap: f64,
    /// `sigma_min(W)`.
    pub rank_margin: f64,
    /// Largest violation of the original (non-convexified) constraints.
    pub constraint_violation: f64,
    pub retried_scaled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub reason: Option<InfeasibilityReason>,
    pub gamma: f64,
    pub q: Matrix,
    pub p: Matrix,
    pub l: Matrix,
    pub v: Matrix,
    pub stats: SdpStats,
}

impl SdpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SdpStatus::Optimal
    }

    fn unsolved(status: SdpStatus, reason: Option<InfeasibilityReason>, d: &SdpProblemData) -> Self {
        let (nx, nu, t) = (d.n_x(), d.n_u(), d.len());
        Self {
            status,
            reason,
            gamma: f64::INFINITY,
            q: Matrix::zeros(t, nx),
            p: Matrix::zeros(nx, nx),
            l: Matrix::zeros(nu, nu),
            v: Matrix::zeros(t, t),
            stats: SdpStats::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSettings {
    /// Report `Infeasible` without solving when `W` fails the rank test.
    pub require_rank_condition: bool,
    /// Retry once on rescaled data after a numerical failure.
    pub retry_scaled: bool,
    /// Relative tolerance for the post-hoc check of the original constraints.
    pub check_tol: f64,
}

impl Default for SynthesisSettings {
    fn default() -> Self {
        Self {
            require_rank_condition: true,
            retry_scaled: true,
            check_tol: 1e-5,
        }
    }
}

pub fn solve_robust_sdp(d: &SdpProblemData, backend: &dyn SolverBackend) -> Result<SdpSolution> {
    solve_robust_sdp_with(d, backend, &SynthesisSettings::default())
}

pub fn solve_robust_sdp_with(
    d: &SdpProblemData,
    backend: &dyn SolverBackend,
    settings: &SynthesisSettings,
) -> Result<SdpSolution> {
    solve_program(d, &d.x_plus, Some(d.alpha), backend, settings)
}

/// Disturbance-free program on `X+ - D-`.
pub fn solve_ideal_sdp(d: &SdpProblemData, d_minus: &Matrix, backend: &dyn SolverBackend) -> Result<SdpSolution> {
    solve_ideal_sdp_with(d, d_minus, backend, &SynthesisSettings::default())
}

pub fn solve_ideal_sdp_with(
    d: &SdpProblemData,
    d_minus: &Matrix,
    backend: &dyn SolverBackend,
    settings: &SynthesisSettings,
) -> Result<SdpSolution> {
    if d_minus.shape() != d.x_plus.shape() {
        return Err(Error::dim("D- must have the shape of X+"));
    }
    solve_program(d, &(&d.x_plus - d_minus), None, backend, settings)
}

fn solve_program(
    d: &SdpProblemData,
    x_next: &Matrix,
    alpha: Option<f64>,
    backend: &dyn SolverBackend,
    settings: &SynthesisSettings,
) -> Result<SdpSolution> {
    let n_x = d.n_x();
    if x_next.shape() != d.x_minus.shape() || d.u_minus.ncols() != d.len() {
        return Err(Error::dim("synthesis data matrices disagree in shape"));
    }
    let (w_ok, margin) = rank_check(&d.w());
    if settings.require_rank_condition && !w_ok {
        let mut sol = SdpSolution::unsolved(SdpStatus::Infeasible, Some(InfeasibilityReason::RankCondition), d);
        sol.stats.rank_margin = margin;
        sol.stats.backend = backend.name().to_string();
        return Ok(sol);
    }
    let (x_ok, _) = rank_check(&d.x_minus);
    if !x_ok || d.len() < n_x {
        let mut sol = SdpSolution::unsolved(SdpStatus::Infeasible, Some(InfeasibilityReason::StateDataRank), d);
        sol.stats.rank_margin = margin;
        sol.stats.backend = backend.name().to_string();
        return Ok(sol);
    }

    let mut sol = solve_once(&d.u_minus, &d.x_minus, x_next, alpha, backend, settings.check_tol)?;
    if sol.status == SdpStatus::NumericalFailure && settings.retry_scaled {
        let s = d
            .u_minus
            .amax()
            .max(d.x_minus.amax())
            .max(x_next.amax());
        if s > 0.0 && s != 1.0 {
            // Dividing the data by s maps (Q, V) to (s Q, s^2 V) with alpha / s^2.
            let scaled = solve_once(
                &(&d.u_minus / s),
                &(&d.x_minus / s),
                &(x_next / s),
                alpha.map(|a| a / (s * s)),
                backend,
                settings.check_tol,
            )?;
            let mut back = scaled;
            back.q /= s;
            back.v /= s * s;
            back.stats.iterations += sol.stats.iterations;
            back.stats.retried_scaled = true;
            if back.status == SdpStatus::Optimal {
                back.stats.constraint_violation =
                    constraint_report(&d.u_minus, &d.x_minus, x_next, alpha, &back).max_violation();
            }
            sol = back;
        }
    }
    sol.stats.rank_margin = margin;
    Ok(sol)
}

/// Variable layout for one program instance.
struct Vars {
    n_x: usize,
    n_u: usize,
    t: usize,
    p0: usize,
    z0: usize,
    l0: usize,
    v0: Option<usize>,
    gamma: usize,
}

fn sym_count(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Index of entry `(i, j)`, `i >= j`, within a packed symmetric block.
fn sym_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i >= j { (i, j) } else { (j, i) };
    // Column-major lower triangle.
    j * n - j * (j + 1) / 2 + i
}

fn sym_unit(n: usize, i: usize, j: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    m[(i, j)] = 1.0;
    m[(j, i)] = 1.0;
    m
}

impl Vars {
    fn new(n_x: usize, n_u: usize, t: usize, with_v: bool) -> Self {
        let p0 = 0;
        let z0 = p0 + sym_count(n_x);
        let l0 = z0 + (t - n_x) * n_x;
        let v_start = l0 + sym_count(n_u);
        let (v0, gamma) = if with_v {
            (Some(v_start), v_start + sym_count(t))
        } else {
            (None, v_start)
        };
        Self { n_x, n_u, t, p0, z0, l0, v0, gamma }
    }

    fn count(&self) -> usize {
        self.gamma + 1
    }

    fn sym_affine(&self, start: usize, n: usize) -> Affine {
        let mut a = Affine::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                a.add_term(start + sym_index(n, i, j), sym_unit(n, i, j));
            }
        }
        a
    }

    fn read_sym(&self, y: &[f64], start: usize, n: usize) -> Matrix {
        Matrix::from_fn(n, n, |i, j| y[start + sym_index(n, i, j)])
    }
}

fn build_problem(
    u: &Matrix,
    x_minus: &Matrix,
    x_next: &Matrix,
    alpha: Option<f64>,
) -> Result<(ConicProblem, Vars, Matrix, Matrix)> {
    let (n_x, n_u, t) = (x_minus.nrows(), u.nrows(), x_minus.ncols());
    let g = pseudo_inverse(&x_minus.transpose())?.transpose();
    let null = null_space(x_minus);
    let vars = Vars::new(n_x, n_u, t, alpha.is_some());

    let p = vars.sym_affine(vars.p0, n_x);
    let mut q = p.lmul(&g);
    for m in 0..t - n_x {
        for c in 0..n_x {
            let mut unit = Matrix::zeros(t, n_x);
            unit.set_column(c, &null.column(m));
            q.add_term(vars.z0 + m * n_x + c, unit);
        }
    }
    let eye = Matrix::identity(n_x, n_x);
    let l = vars.sym_affine(vars.l0, n_u);

    let mut c = vec![0.0; vars.count()];
    c[vars.gamma] = 1.0;
    let mut b = LmiBuilder::new(c);
    let p_minus_i = p.clone().plus_constant(&(-&eye));
    b.add_lmi(&Affine::sym_block(&p_minus_i, &q.lmul(x_next).transpose(), &p));
    b.add_lmi(&Affine::sym_block(&l, &q.lmul(u).transpose(), &p));
    if let Some(v0) = vars.v0 {
        let v = vars.sym_affine(v0, t);
        b.add_lmi(&Affine::sym_block(&v, &q.transpose(), &p));
    }
    b.add_lmi(&p_minus_i);

    let mut budget = Affine::zeros(1, 1);
    budget.add_term(vars.gamma, Matrix::from_element(1, 1, 1.0));
    for i in 0..n_x {
        budget.add_term(vars.p0 + sym_index(n_x, i, i), Matrix::from_element(1, 1, -1.0));
    }
    for i in 0..n_u {
        budget.add_term(vars.l0 + sym_index(n_u, i, i), Matrix::from_element(1, 1, -1.0));
    }
    if let (Some(v0), Some(a)) = (vars.v0, alpha) {
        for i in 0..t {
            budget.add_term(v0 + sym_index(t, i, i), Matrix::from_element(1, 1, -a));
        }
    }
    b.add_lmi(&budget);
    Ok((b.finish(), vars, g, null))
}

fn solve_once(
    u: &Matrix,
    x_minus: &Matrix,
    x_next: &Matrix,
    alpha: Option<f64>,
    backend: &dyn SolverBackend,
    check_tol: f64,
) -> Result<SdpSolution> {
    let (problem, vars, g, null) = build_problem(u, x_minus, x_next, alpha)?;
    let raw = backend.solve(&problem);
    let mut stats = SdpStats {
        backend: backend.name().to_string(),
        iterations: raw.stats.iterations,
        primal_infeasibility: raw.stats.primal_infeasibility,
        dual_infeasibility: raw.stats.dual_infeasibility,
        relative_gap: raw.stats.relative_gap,
        ..SdpStats::default()
    };
    let (n_x, n_u, t) = (vars.n_x, vars.n_u, vars.t);
    let blank = |status, reason, stats| SdpSolution {
        status,
        reason,
        gamma: f64::INFINITY,
        q: Matrix::zeros(t, n_x),
        p: Matrix::zeros(n_x, n_x),
        l: Matrix::zeros(n_u, n_u),
        v: Matrix::zeros(t, t),
        stats,
    };
    match raw.status {
        ConicStatus::Infeasible => {
            return Ok(blank(SdpStatus::Infeasible, Some(InfeasibilityReason::Certificate), stats));
        }
        ConicStatus::NumericalFailure => return Ok(blank(SdpStatus::NumericalFailure, None, stats)),
        ConicStatus::Optimal => {}
    }
    let y = &raw.y;
    let p = vars.read_sym(y, vars.p0, n_x);
    let z = Matrix::from_fn(t - n_x, n_x, |m, c| y[vars.z0 + m * n_x + c]);
    let q = &g * &p + &null * z;
    let l = vars.read_sym(y, vars.l0, n_u);
    let v = match vars.v0 {
        Some(v0) => vars.read_sym(y, v0, t),
        None => {
            let pinv = p.clone().try_inverse().ok_or_else(|| Error::NotOptimal("singular P".into()))?;
            &q * pinv * q.transpose()
        }
    };
    let mut sol = SdpSolution {
        status: SdpStatus::Optimal,
        reason: None,
        gamma: y[vars.gamma],
        q,
        p,
        l,
        v,
        stats: SdpStats::default(),
    };
    let report = constraint_report(u, x_minus, x_next, alpha, &sol);
    stats.constraint_violation = report.max_violation();
    if stats.constraint_violation > check_tol * (1.0 + sol.gamma.abs()) {
        log::warn!(
            "post-hoc constraint check failed by {:.3e}",
            stats.constraint_violation
        );
        sol.status = SdpStatus::NumericalFailure;
    }
    sol.stats = stats;
    Ok(sol)
}

/// Violations of the original constraints at a solution (positive = violated).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    /// `lambda_max(X+ Q P^-1 Q' X+' - P + I)`.
    pub contraction: f64,
    /// `-lambda_min(P - I)`.
    pub p_lower: f64,
    /// `-lambda_min(L - U Q P^-1 Q' U')`.
    pub l_bound: f64,
    /// `-lambda_min(V - Q P^-1 Q')`; zero for the ideal program.
    pub v_bound: f64,
    /// `max |X- Q - P|`.
    pub coupling: f64,
    /// `tr P + tr L + alpha tr V - gamma`.
    pub budget: f64,
}

impl ConstraintReport {
    pub fn max_violation(&self) -> f64 {
        [self.contraction, self.p_lower, self.l_bound, self.v_bound, self.coupling, self.budget]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn constraint_report(
    u: &Matrix,
    x_minus: &Matrix,
    x_next: &Matrix,
    alpha: Option<f64>,
    sol: &SdpSolution,
) -> ConstraintReport {
    let n_x = sol.p.nrows();
    let eye = Matrix::identity(n_x, n_x);
    let Some(pinv) = sol.p.clone().try_inverse() else {
        return ConstraintReport {
            contraction: f64::INFINITY,
            p_lower: f64::INFINITY,
            l_bound: f64::INFINITY,
            v_bound: f64::INFINITY,
            coupling: f64::INFINITY,
            budget: f64::INFINITY,
        };
    };
    let qpq = &sol.q * &pinv * sol.q.transpose();
    let contraction = max_eigenvalue(&(x_next * &qpq * x_next.transpose() - &sol.p + &eye));
    let p_lower = -min_eigenvalue(&(&sol.p - &eye));
    let l_bound = -min_eigenvalue(&(&sol.l - u * &qpq * u.transpose()));
    let (v_bound, v_cost) = match alpha {
        Some(a) => (-min_eigenvalue(&(&sol.v - &qpq)), a * sol.v.trace()),
        None => (0.0, 0.0),
    };
    let coupling = (x_minus * &sol.q - &sol.p).amax();
    let budget = sol.p.trace() + sol.l.trace() + v_cost - sol.gamma;
    ConstraintReport {
        contraction,
        p_lower,
        l_bound,
        v_bound,
        coupling,
        budget,
    }
}

/// Checks a candidate against the robust program's original constraints.
pub fn check_robust_constraints(d: &SdpProblemData, sol: &SdpSolution) -> ConstraintReport {
    constraint_report(&d.u_minus, &d.x_minus, &d.x_plus, Some(d.alpha), sol)
}

/// Checks a candidate against the ideal program's original constraints.
pub fn check_ideal_constraints(d: &SdpProblemData, d_minus: &Matrix, sol: &SdpSolution) -> ConstraintReport {
    constraint_report(&d.u_minus, &d.x_minus, &(&d.x_plus - d_minus), None, sol)
}

/// `K = U Q P^-1`.
pub fn extract_gain(u_minus: &Matrix, sol: &SdpSolution) -> Result<Matrix> {
    if sol.status != SdpStatus::Optimal {
        return Err(Error::NotOptimal(format!("solution status is {:?}", sol.status)));
    }
    gain_from_parts(u_minus, &sol.q, &sol.p)
}

pub fn gain_from_parts(u_minus: &Matrix, q: &Matrix, p: &Matrix) -> Result<Matrix> {
    if u_minus.ncols() != q.nrows() || q.ncols() != p.nrows() || !p.is_square() {
        return Err(Error::dim("gain extraction with inconsistent U, Q, P"));
    }
    let pinv = p
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotOptimal("P is singular".into()))?;
    Ok(u_minus * q * pinv)
}

/// `rho(A + B K)`.
pub fn verify_closed_loop(a: &Matrix, b: &Matrix, k: &Matrix) -> Result<f64> {
    if b.nrows() != a.nrows() || k.nrows() != b.ncols() || k.ncols() != a.ncols() {
        return Err(Error::dim(format!(
            "closed loop with A {:?}, B {:?}, K {:?}",
            a.shape(),
            b.shape(),
            k.shape()
        )));
    }
    spectral_radius(&(a + b * k))
}

/// Self-describing record of one synthesis instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpDump {
    pub program: String,
    pub n_x: usize,
    pub n_u: usize,
    pub window: usize,
    pub alpha: Option<f64>,
    pub u_minus: Vec<Vec<f64>>,
    pub x_minus: Vec<Vec<f64>>,
    pub x_plus: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_minus: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time: Option<i64>,
}

impl SdpDump {
    pub fn robust(d: &SdpProblemData, time: Option<i64>) -> Self {
        Self {
            program: "robust".into(),
            n_x: d.n_x(),
            n_u: d.n_u(),
            window: d.len(),
            alpha: Some(d.alpha),
            u_minus: to_rows(&d.u_minus),
            x_minus: to_rows(&d.x_minus),
            x_plus: to_rows(&d.x_plus),
            d_minus: None,
            time,
        }
    }

    pub fn ideal(d: &SdpProblemData, d_minus: &Matrix, time: Option<i64>) -> Self {
        Self {
            program: "ideal".into(),
            alpha: None,
            d_minus: Some(to_rows(d_minus)),
            ..Self::robust(d, time)
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn to_problem(&self) -> Result<SdpProblemData> {
        use crate::numerics::from_rows;
        SdpProblemData::new(
            from_rows(&self.u_minus)?,
            from_rows(&self.x_minus)?,
            from_rows(&self.x_plus)?,
            self.alpha.unwrap_or(1.0),
        )
    }
}

#[cfg(test)]
mod tests;
