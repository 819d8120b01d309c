//! Linear matrix inequality problems in standard form and the backend
//! interface used to solve them.
//!
//! A problem reads `min c'y  s.t.  F0 + sum_i y_i F_i >= 0` where every `F`
//! is block diagonal and symmetric. Entries are stored once, for `row >= col`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;

/// One lower-triangle entry of a symmetric block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymEntry {
    pub block: usize,
    pub row: usize,
    pub col: usize,
    pub coef: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConicProblem {
    pub block_sizes: Vec<usize>,
    pub c: Vec<f64>,
    pub f0: Vec<SymEntry>,
    /// `terms[i]` holds the entries of `F_i`.
    pub terms: Vec<Vec<SymEntry>>,
}

impl ConicProblem {
    pub fn n_vars(&self) -> usize {
        self.c.len()
    }

    /// Total order of the block-diagonal cone.
    pub fn cone_order(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    /// `F0 + sum_i y_i F_i`, one dense matrix per block.
    pub fn evaluate(&self, y: &[f64]) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = self.block_sizes.iter().map(|&n| Matrix::zeros(n, n)).collect();
        scatter(&mut out, &self.f0, 1.0);
        for (terms, &yi) in self.terms.iter().zip(y) {
            if yi != 0.0 {
                scatter(&mut out, terms, yi);
            }
        }
        out
    }
}

pub(crate) fn scatter(out: &mut [Matrix], entries: &[SymEntry], scale: f64) {
    for e in entries {
        let m = &mut out[e.block];
        m[(e.row, e.col)] += scale * e.coef;
        if e.row != e.col {
            m[(e.col, e.row)] += scale * e.coef;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConicStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub iterations: usize,
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
    pub relative_gap: f64,
    /// Optimal shift of the feasibility problem when it was consulted.
    pub phase_one_shift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicSolution {
    pub status: ConicStatus,
    pub y: Vec<f64>,
    pub objective: f64,
    pub stats: SolverStats,
}

/// A solver for [`ConicProblem`]s. Implementations must be deterministic.
pub trait SolverBackend {
    fn name(&self) -> &str;
    fn solve(&self, problem: &ConicProblem) -> ConicSolution;
}

/// Matrix-valued affine expression `M0 + sum_v y_v M_v`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Affine {
    pub constant: Matrix,
    pub terms: BTreeMap<usize, Matrix>,
}

impl Affine {
    pub fn constant(m: Matrix) -> Self {
        Self {
            constant: m,
            terms: BTreeMap::new(),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(Matrix::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.constant.shape()
    }

    pub fn add_term(&mut self, var: usize, m: Matrix) {
        match self.terms.get_mut(&var) {
            Some(t) => *t += m,
            None => {
                self.terms.insert(var, m);
            }
        }
    }

    pub fn lmul(&self, a: &Matrix) -> Self {
        Self {
            constant: a * &self.constant,
            terms: self.terms.iter().map(|(&v, m)| (v, a * m)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self {
            constant: self.constant.transpose(),
            terms: self.terms.iter().map(|(&v, m)| (v, m.transpose())).collect(),
        }
    }

    pub fn plus_constant(mut self, m: &Matrix) -> Self {
        self.constant += m;
        self
    }

    /// Symmetric `[a11, a21'; a21, a22]`.
    pub fn sym_block(a11: &Affine, a21: &Affine, a22: &Affine) -> Self {
        let (n1, _) = a11.shape();
        let (n2, _) = a22.shape();
        let embed = |m11: Option<&Matrix>, m21: Option<&Matrix>, m22: Option<&Matrix>| {
            let mut out = Matrix::zeros(n1 + n2, n1 + n2);
            if let Some(m) = m11 {
                out.view_mut((0, 0), (n1, n1)).copy_from(m);
            }
            if let Some(m) = m21 {
                out.view_mut((n1, 0), (n2, n1)).copy_from(m);
                out.view_mut((0, n1), (n1, n2)).copy_from(&m.transpose());
            }
            if let Some(m) = m22 {
                out.view_mut((n1, n1), (n2, n2)).copy_from(m);
            }
            out
        };
        let mut vars: Vec<usize> = a11
            .terms
            .keys()
            .chain(a21.terms.keys())
            .chain(a22.terms.keys())
            .copied()
            .collect();
        vars.sort_unstable();
        vars.dedup();
        Self {
            constant: embed(Some(&a11.constant), Some(&a21.constant), Some(&a22.constant)),
            terms: vars
                .into_iter()
                .map(|v| (v, embed(a11.terms.get(&v), a21.terms.get(&v), a22.terms.get(&v))))
                .collect(),
        }
    }
}

/// Accumulates symmetric affine blocks into a [`ConicProblem`].
#[derive(Debug, Clone)]
pub(crate) struct LmiBuilder {
    problem: ConicProblem,
}

impl LmiBuilder {
    pub fn new(c: Vec<f64>) -> Self {
        let n = c.len();
        Self {
            problem: ConicProblem {
                block_sizes: Vec::new(),
                c,
                f0: Vec::new(),
                terms: vec![Vec::new(); n],
            },
        }
    }

    /// Adds the constraint `expr >= 0`; `expr` must be symmetric.
    pub fn add_lmi(&mut self, expr: &Affine) {
        let block = self.problem.block_sizes.len();
        let (n, _) = expr.shape();
        self.problem.block_sizes.push(n);
        push_lower(&mut self.problem.f0, block, &expr.constant);
        for (&v, m) in &expr.terms {
            push_lower(&mut self.problem.terms[v], block, m);
        }
    }

    pub fn finish(self) -> ConicProblem {
        self.problem
    }
}

fn push_lower(out: &mut Vec<SymEntry>, block: usize, m: &Matrix) {
    for c in 0..m.ncols() {
        for r in c..m.nrows() {
            let v = 0.5 * (m[(r, c)] + m[(c, r)]);
            if v != 0.0 {
                out.push(SymEntry {
                    block,
                    row: r,
                    col: c,
                    coef: v,
                });
            }
        }
    }
}
