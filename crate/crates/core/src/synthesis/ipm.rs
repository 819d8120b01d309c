//! Reference backend: infeasible-start primal-dual interior-point method
//! with the HKM search direction and Mehrotra predictor-corrector steps.
//!
//! The LMI problem `min c'y, S = F0 + F(y) >= 0` is solved together with its
//! dual `max -<F0, X>, <F_i, X> = c_i, X >= 0`. Linearly dependent `F_i`
//! are removed in a presolve step so the Schur complement stays definite.

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use super::conic::{scatter, ConicProblem, ConicSolution, ConicStatus, SolverBackend, SolverStats, SymEntry};
use crate::numerics::{singular_values, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpmSettings {
    /// Target for primal/dual infeasibility and relative gap.
    pub tol: f64,
    /// Accepted when the method stalls before reaching `tol`.
    pub relaxed_tol: f64,
    pub max_iterations: usize,
    /// Iterations without meaningful progress before giving up.
    pub stall_iterations: usize,
}

impl Default for IpmSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            relaxed_tol: 1e-6,
            max_iterations: 50_000,
            stall_iterations: 40,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct InteriorPoint {
    pub settings: IpmSettings,
}

impl InteriorPoint {
    pub fn new(settings: IpmSettings) -> Self {
        Self { settings }
    }
}

impl SolverBackend for InteriorPoint {
    fn name(&self) -> &str {
        "hkm-interior-point"
    }

    fn solve(&self, problem: &ConicProblem) -> ConicSolution {
        solve(problem, &self.settings)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Converged,
    Infeasible,
    Unbounded,
    Stalled,
}

struct Core {
    outcome: Outcome,
    y: Vec<f64>,
    merit: f64,
    stats: SolverStats,
}

/// Per-variable entries grouped by block.
struct Layout {
    sizes: Vec<usize>,
    block_vars: Vec<Vec<(usize, Vec<(usize, usize, f64)>)>>,
    c: Vec<f64>,
    f0: Vec<Matrix>,
}

impl Layout {
    fn new(p: &ConicProblem) -> Self {
        let nb = p.block_sizes.len();
        let mut block_vars: Vec<Vec<(usize, Vec<(usize, usize, f64)>)>> = vec![Vec::new(); nb];
        for (i, terms) in p.terms.iter().enumerate() {
            let mut per_block: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); nb];
            for e in terms {
                per_block[e.block].push((e.row, e.col, e.coef));
            }
            for (b, entries) in per_block.into_iter().enumerate() {
                if !entries.is_empty() {
                    block_vars[b].push((i, entries));
                }
            }
        }
        let mut f0: Vec<Matrix> = p.block_sizes.iter().map(|&n| Matrix::zeros(n, n)).collect();
        scatter(&mut f0, &p.f0, 1.0);
        Self {
            sizes: p.block_sizes.clone(),
            block_vars,
            c: p.c.clone(),
            f0,
        }
    }

    fn n_vars(&self) -> usize {
        self.c.len()
    }

    /// `F(y)` without `F0`.
    fn apply(&self, y: &[f64]) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = self.sizes.iter().map(|&n| Matrix::zeros(n, n)).collect();
        for (b, vars) in self.block_vars.iter().enumerate() {
            let m = &mut out[b];
            for (i, entries) in vars {
                let yi = y[*i];
                if yi == 0.0 {
                    continue;
                }
                for &(r, c, v) in entries {
                    m[(r, c)] += yi * v;
                    if r != c {
                        m[(c, r)] += yi * v;
                    }
                }
            }
        }
        out
    }

    /// Adjoint: `<F_i, A>` for each `i`. `A` need not be symmetric.
    fn adjoint(&self, a: &[Matrix]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_vars()];
        for (b, vars) in self.block_vars.iter().enumerate() {
            let m = &a[b];
            for (i, entries) in vars {
                let mut s = 0.0;
                for &(r, c, v) in entries {
                    s += if r == c { v * m[(r, r)] } else { v * (m[(r, c)] + m[(c, r)]) };
                }
                out[*i] += s;
            }
        }
        out
    }

    /// Schur complement `M_ij = tr(F_i X F_j S^-1)`.
    fn schur(&self, x: &[Matrix], sinv: &[Matrix]) -> Matrix {
        let n = self.n_vars();
        let mut m = Matrix::zeros(n, n);
        for (b, vars) in self.block_vars.iter().enumerate() {
            let nb = self.sizes[b];
            let (xb, sb) = (&x[b], &sinv[b]);
            let mut g = Matrix::zeros(nb, nb);
            for (j, ej) in vars {
                // G = X F_j S^-1 as a sum of rank-one updates.
                g.fill(0.0);
                for &(r, c, v) in ej {
                    g.ger(v, &xb.column(r), &sb.row(c).transpose(), 1.0);
                    if r != c {
                        g.ger(v, &xb.column(c), &sb.row(r).transpose(), 1.0);
                    }
                }
                for (i, ei) in vars {
                    if i > j {
                        continue;
                    }
                    let mut s = 0.0;
                    for &(r, c, v) in ei {
                        s += if r == c { v * g[(r, r)] } else { v * (g[(r, c)] + g[(c, r)]) };
                    }
                    m[(*i, *j)] += s;
                }
            }
        }
        for j in 0..n {
            for i in 0..j {
                m[(j, i)] = m[(i, j)];
            }
        }
        m
    }
}

fn inner(a: &[Matrix], b: &[Matrix]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn frob(a: &[Matrix]) -> f64 {
    a.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt()
}

fn sym(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest `a` with `m + a dm >= 0`, infinite when unconstrained.
fn max_step(m: &[Matrix], dm: &[Matrix]) -> f64 {
    let mut best = f64::INFINITY;
    for (mb, db) in m.iter().zip(dm) {
        let Some(ch) = Cholesky::new(mb.clone()) else {
            return 0.0;
        };
        let l = ch.l();
        let Some(t) = l.solve_lower_triangular(db) else {
            return 0.0;
        };
        let Some(b) = l.solve_lower_triangular(&t.transpose()) else {
            return 0.0;
        };
        let lam = sym(&b).symmetric_eigenvalues().min();
        if lam < 0.0 {
            best = best.min(-1.0 / lam);
        }
    }
    best
}

fn inverse_pd(m: &Matrix) -> Option<Matrix> {
    Cholesky::new(m.clone()).map(|c| c.inverse())
}

struct SchurFactor {
    chol: Option<Cholesky<f64, nalgebra::Dyn>>,
    lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl SchurFactor {
    fn new(m: Matrix) -> Self {
        if let Some(c) = Cholesky::new(m.clone()) {
            return Self { chol: Some(c), lu: None };
        }
        let reg = 1e-14 * m.diagonal().amax().max(1e-300);
        let shifted = &m + Matrix::identity(m.nrows(), m.ncols()) * reg;
        if let Some(c) = Cholesky::new(shifted) {
            return Self { chol: Some(c), lu: None };
        }
        Self {
            chol: None,
            lu: Some(m.lu()),
        }
    }

    fn solve(&self, rhs: &[f64]) -> Option<Vec<f64>> {
        let b = Vector::from_column_slice(rhs);
        let x = match (&self.chol, &self.lu) {
            (Some(c), _) => Some(c.solve(&b)),
            (None, Some(lu)) => lu.solve(&b),
            _ => None,
        }?;
        x.iter().all(|v| v.is_finite()).then(|| x.iter().copied().collect())
    }
}

fn initial_point(lay: &Layout) -> (Vec<Matrix>, Vec<Matrix>) {
    let mut xs = Vec::with_capacity(lay.sizes.len());
    let mut ss = Vec::with_capacity(lay.sizes.len());
    for (b, &n) in lay.sizes.iter().enumerate() {
        let nf = n as f64;
        let mut xi: f64 = 10.0f64.max(nf.sqrt());
        let mut eta: f64 = 10.0f64.max(nf.sqrt()).max(lay.f0[b].norm());
        for (i, entries) in &lay.block_vars[b] {
            let fnorm = entries
                .iter()
                .map(|&(r, c, v)| if r == c { v * v } else { 2.0 * v * v })
                .sum::<f64>()
                .sqrt();
            xi = xi.max(nf.sqrt() * (1.0 + lay.c[*i].abs()) / (1.0 + fnorm));
            eta = eta.max(fnorm);
        }
        xs.push(Matrix::identity(n, n) * xi);
        ss.push(Matrix::identity(n, n) * eta);
    }
    (xs, ss)
}

fn run_core(lay: &Layout, settings: &IpmSettings) -> Core {
    let n_vars = lay.n_vars();
    let order: f64 = lay.sizes.iter().sum::<usize>() as f64;
    let (mut x, mut s) = initial_point(lay);
    let mut y = vec![0.0; n_vars];
    let c_norm = norm(&lay.c);
    let f0_norm = frob(&lay.f0);

    let mut best_merit = f64::INFINITY;
    let mut best_y = y.clone();
    let mut best_stats = SolverStats::default();
    let mut last_improvement = 0usize;
    let mut tiny_steps = 0usize;

    let finish = |outcome, y: Vec<f64>, merit, mut stats: SolverStats, it| {
        stats.iterations = it;
        Core { outcome, y, merit, stats }
    };

    for it in 0..settings.max_iterations {
        let fy = lay.apply(&y);
        let rd: Vec<Matrix> = (0..s.len()).map(|b| &lay.f0[b] + &fy[b] - &s[b]).collect();
        let fx = lay.adjoint(&x);
        let rp: Vec<f64> = lay.c.iter().zip(&fx).map(|(c, f)| c - f).collect();
        let pobj: f64 = lay.c.iter().zip(&y).map(|(c, v)| c * v).sum();
        let dobj = -inner(&lay.f0, &x);
        let gap = inner(&x, &s);
        let pinf = norm(&rp) / (1.0 + c_norm);
        let dinf = frob(&rd) / (1.0 + f0_norm);
        let relgap = (pobj - dobj).abs().max(gap) / (1.0 + pobj.abs() + dobj.abs());
        let stats = SolverStats {
            iterations: it,
            primal_infeasibility: dinf,
            dual_infeasibility: pinf,
            relative_gap: relgap,
            phase_one_shift: None,
        };
        if !(pinf.is_finite() && dinf.is_finite() && relgap.is_finite()) {
            return finish(Outcome::Stalled, best_y, best_merit, best_stats, it);
        }
        let merit = pinf.max(dinf).max(relgap);
        if merit < 0.9 * best_merit {
            last_improvement = it;
        }
        if merit < best_merit {
            best_merit = merit;
            best_y.clone_from(&y);
            best_stats = stats.clone();
        }
        if merit <= settings.tol {
            return finish(Outcome::Converged, y, merit, stats, it);
        }
        // Farkas certificate: X >= 0 with F*(X) ~ 0 and <F0, X> < 0.
        if dobj > 0.0 && norm(&fx) <= settings.tol * dobj && dobj > 1.0 / settings.tol {
            return finish(Outcome::Infeasible, y, merit, stats, it);
        }
        if pobj < -1e12 * (1.0 + f0_norm) && dinf <= settings.relaxed_tol {
            return finish(Outcome::Unbounded, y, merit, stats, it);
        }
        if it - last_improvement > settings.stall_iterations || tiny_steps > 5 {
            return finish(Outcome::Stalled, best_y, best_merit, best_stats, it);
        }

        let Some(sinv) = s.iter().map(inverse_pd).collect::<Option<Vec<_>>>() else {
            return finish(Outcome::Stalled, best_y, best_merit, best_stats, it);
        };
        let factor = SchurFactor::new(lay.schur(&x, &sinv));
        let x_rd_sinv: Vec<Matrix> = (0..s.len()).map(|b| &x[b] * &rd[b] * &sinv[b]).collect();
        let base_rhs: Vec<f64> = {
            let t = lay.adjoint(&x_rd_sinv);
            lay.c.iter().zip(&t).map(|(c, v)| -c - v).collect()
        };

        let direction = |z: Option<&[Matrix]>| -> Option<(Vec<f64>, Vec<Matrix>, Vec<Matrix>)> {
            let zs: Option<Vec<Matrix>> = z.map(|z| z.iter().zip(&sinv).map(|(zb, sb)| zb * sb).collect());
            let mut rhs = base_rhs.clone();
            if let Some(zs) = &zs {
                for (r, v) in rhs.iter_mut().zip(lay.adjoint(zs)) {
                    *r += v;
                }
            }
            let dy = factor.solve(&rhs)?;
            let fdy = lay.apply(&dy);
            let ds: Vec<Matrix> = fdy.iter().zip(&rd).map(|(f, r)| f + r).collect();
            let dx: Vec<Matrix> = (0..x.len())
                .map(|b| {
                    let mut d = -&x[b] - &x[b] * &ds[b] * &sinv[b];
                    if let Some(zs) = &zs {
                        d += &zs[b];
                    }
                    sym(&d)
                })
                .collect();
            Some((dy, ds, dx))
        };

        let mu = gap / order;
        let Some((_, ds_a, dx_a)) = direction(None) else {
            return finish(Outcome::Stalled, best_y, best_merit, best_stats, it);
        };
        let ap = max_step(&x, &dx_a).min(1.0);
        let ad = max_step(&s, &ds_a).min(1.0);
        let x_aff: Vec<Matrix> = x.iter().zip(&dx_a).map(|(a, d)| a + d * ap).collect();
        let s_aff: Vec<Matrix> = s.iter().zip(&ds_a).map(|(a, d)| a + d * ad).collect();
        let mu_aff = inner(&x_aff, &s_aff) / order;
        let expon = (3.0 * ap.min(ad).powi(2)).max(1.0);
        let sigma = (mu_aff / mu).max(0.0).powf(expon).min(1.0);

        let z: Vec<Matrix> = (0..x.len())
            .map(|b| Matrix::identity(lay.sizes[b], lay.sizes[b]) * (sigma * mu) - &dx_a[b] * &ds_a[b])
            .collect();
        let Some((dy, ds, dx)) = direction(Some(&z)) else {
            return finish(Outcome::Stalled, best_y, best_merit, best_stats, it);
        };
        let tau = 0.9 + 0.09 * ap.min(ad);
        let ap = (tau * max_step(&x, &dx)).min(1.0);
        let ad = (tau * max_step(&s, &ds)).min(1.0);
        if ap < 1e-10 && ad < 1e-10 {
            tiny_steps += 1;
        } else {
            tiny_steps = 0;
        }
        for b in 0..x.len() {
            x[b] = sym(&(&x[b] + &dx[b] * ap));
            s[b] = sym(&(&s[b] + &ds[b] * ad));
        }
        for (v, d) in y.iter_mut().zip(&dy) {
            *v += ad * d;
        }
    }
    finish(Outcome::Stalled, best_y, best_merit, best_stats, settings.max_iterations)
}

/// Basis of the span of the `F_i` when they are linearly dependent.
fn degeneracy_basis(p: &ConicProblem) -> Option<Matrix> {
    let n = p.n_vars();
    if n == 0 {
        return None;
    }
    let mut positions = std::collections::BTreeMap::new();
    for terms in &p.terms {
        for e in terms {
            let next = positions.len();
            positions.entry((e.block, e.row, e.col)).or_insert(next);
        }
    }
    if positions.is_empty() {
        return Some(Matrix::zeros(n, 0));
    }
    let mut design = Matrix::zeros(positions.len().max(n), n);
    for (i, terms) in p.terms.iter().enumerate() {
        for e in terms {
            let w = if e.row == e.col { 1.0 } else { std::f64::consts::SQRT_2 };
            design[(positions[&(e.block, e.row, e.col)], i)] += w * e.coef;
        }
    }
    let sv = singular_values(&design).ok()?;
    let tol = 1e-10 * sv[0].max(1e-300);
    if sv[n - 1] > tol {
        return None;
    }
    let svd = design.svd(false, true);
    let vt = svd.v_t?;
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] > tol)
        .collect();
    let mut basis = Matrix::zeros(n, keep.len());
    for (j, &k) in keep.iter().enumerate() {
        basis.set_column(j, &vt.row(k).transpose());
    }
    Some(basis)
}

fn reduce(p: &ConicProblem, basis: &Matrix) -> ConicProblem {
    let r = basis.ncols();
    let mut terms = vec![std::collections::BTreeMap::<(usize, usize, usize), f64>::new(); r];
    for (i, ti) in p.terms.iter().enumerate() {
        for k in 0..r {
            let w = basis[(i, k)];
            if w == 0.0 {
                continue;
            }
            for e in ti {
                *terms[k].entry((e.block, e.row, e.col)).or_insert(0.0) += w * e.coef;
            }
        }
    }
    let c = (0..r)
        .map(|k| (0..p.n_vars()).map(|i| basis[(i, k)] * p.c[i]).sum())
        .collect();
    ConicProblem {
        block_sizes: p.block_sizes.clone(),
        c,
        f0: p.f0.clone(),
        terms: terms
            .into_iter()
            .map(|m| {
                m.into_iter()
                    .filter(|(_, v)| *v != 0.0)
                    .map(|((block, row, col), coef)| SymEntry { block, row, col, coef })
                    .collect()
            })
            .collect(),
    }
}

/// `min t  s.t.  F0 + F(y) + t I >= 0, t >= -1`.
fn phase_one(p: &ConicProblem) -> ConicProblem {
    let n = p.n_vars();
    let mut terms = p.terms.clone();
    let mut shift = Vec::new();
    for (b, &size) in p.block_sizes.iter().enumerate() {
        for i in 0..size {
            shift.push(SymEntry { block: b, row: i, col: i, coef: 1.0 });
        }
    }
    let extra = p.block_sizes.len();
    shift.push(SymEntry { block: extra, row: 0, col: 0, coef: 1.0 });
    terms.push(shift);
    let mut f0 = p.f0.clone();
    f0.push(SymEntry { block: extra, row: 0, col: 0, coef: 1.0 });
    let mut block_sizes = p.block_sizes.clone();
    block_sizes.push(1);
    let mut c = vec![0.0; n + 1];
    c[n] = 1.0;
    ConicProblem { block_sizes, c, f0, terms }
}

fn failure(n: usize, stats: SolverStats) -> ConicSolution {
    ConicSolution {
        status: ConicStatus::NumericalFailure,
        y: vec![f64::NAN; n],
        objective: f64::NAN,
        stats,
    }
}

pub fn solve(problem: &ConicProblem, settings: &IpmSettings) -> ConicSolution {
    let n = problem.n_vars();
    let basis = degeneracy_basis(problem);
    let reduced;
    let work = match &basis {
        Some(b) => {
            let c = Vector::from_column_slice(&problem.c);
            let leak = (&c - b * (b.transpose() * &c)).norm();
            if leak > 1e-9 * (1.0 + c.norm()) {
                // Objective moves along directions the constraints never see.
                return failure(n, SolverStats::default());
            }
            reduced = reduce(problem, b);
            &reduced
        }
        None => problem,
    };
    let lay = Layout::new(work);
    let core = run_core(&lay, settings);
    let lift = |y: &[f64]| -> Vec<f64> {
        match &basis {
            Some(b) => (b * Vector::from_column_slice(y)).iter().copied().collect(),
            None => y.to_vec(),
        }
    };
    let accepted = core.outcome == Outcome::Converged
        || (core.outcome == Outcome::Stalled && core.merit <= settings.relaxed_tol);
    if accepted {
        let y = lift(&core.y);
        let objective = problem.c.iter().zip(&y).map(|(c, v)| c * v).sum();
        return ConicSolution {
            status: ConicStatus::Optimal,
            y,
            objective,
            stats: core.stats,
        };
    }
    if core.outcome == Outcome::Infeasible {
        return ConicSolution {
            status: ConicStatus::Infeasible,
            y: lift(&core.y),
            objective: f64::INFINITY,
            stats: core.stats,
        };
    }
    if core.outcome == Outcome::Unbounded {
        return failure(n, core.stats);
    }
    // Stalled: decide between infeasibility and numerical trouble.
    let p1 = phase_one(work);
    let p1_core = run_core(&Layout::new(&p1), settings);
    let mut stats = core.stats;
    stats.iterations += p1_core.stats.iterations;
    let p1_ok = p1_core.outcome == Outcome::Converged || p1_core.merit <= settings.relaxed_tol;
    if p1_ok {
        let shift = p1_core.y[work.n_vars()];
        stats.phase_one_shift = Some(shift);
        let scale = 1.0 + frob(&Layout::new(work).f0);
        if shift > settings.relaxed_tol * scale {
            return ConicSolution {
                status: ConicStatus::Infeasible,
                y: lift(&p1_core.y[..work.n_vars()]),
                objective: f64::INFINITY,
                stats,
            };
        }
    }
    failure(n, stats)
}
