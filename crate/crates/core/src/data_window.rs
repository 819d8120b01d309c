//! Rolling buffer of the latest `T` input-state samples, Hankel matrices,
//! persistency-of-excitation levels and the rank condition on `W = [U; X]`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{min_singular_value, rank_threshold, singular_values, Matrix, Vector};
use crate::plant::Sample;

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    k: i64,
    u: Vector,
    x: Vector,
}

/// FIFO of `(u(i), x(i))` pairs plus the most recent state `x(k)`.
///
/// Time indices may be negative (offline samples); only contiguity is
/// enforced.
#[derive(Debug, Clone, PartialEq)]
pub struct DataWindow {
    capacity: usize,
    n_x: usize,
    n_u: usize,
    entries: VecDeque<Entry>,
    latest_k: i64,
    latest_state: Vector,
}

impl DataWindow {
    /// Empty window whose current state is `x` at time `k`.
    pub fn new(capacity: usize, n_u: usize, k: i64, x: Vector) -> Result<Self> {
        if capacity == 0 || n_u == 0 || x.is_empty() {
            return Err(Error::dim("window capacity and dimensions must be positive"));
        }
        Ok(Self {
            capacity,
            n_x: x.len(),
            n_u,
            entries: VecDeque::with_capacity(capacity + 1),
            latest_k: k,
            latest_state: x,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn latest_state(&self) -> &Vector {
        &self.latest_state
    }

    /// Time index of [`Self::latest_state`].
    pub fn latest_time(&self) -> i64 {
        self.latest_k
    }

    /// Time index of the oldest stored input, if any.
    pub fn oldest_time(&self) -> Option<i64> {
        self.entries.front().map(|e| e.k)
    }

    /// Records that `u` was applied at the current state and the plant
    /// moved to `x_next`.
    pub fn push(&mut self, u: Vector, x_next: Vector) -> Result<()> {
        if u.len() != self.n_u || x_next.len() != self.n_x {
            return Err(Error::dim(format!(
                "push expects u in R^{} and x in R^{}, got {} and {}",
                self.n_u,
                self.n_x,
                u.len(),
                x_next.len()
            )));
        }
        let x = std::mem::replace(&mut self.latest_state, x_next);
        self.entries.push_back(Entry { k: self.latest_k, u, x });
        self.latest_k += 1;
        if self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Stored inputs, oldest first.
    pub fn inputs(&self) -> Vec<Vector> {
        self.entries.iter().map(|e| e.u.clone()).collect()
    }

    pub fn snapshot(&self) -> Result<DataTriple> {
        if !self.is_full() {
            return Err(Error::InsufficientData(format!(
                "window holds {} of {} samples",
                self.len(),
                self.capacity
            )));
        }
        let t = self.capacity;
        let mut u_minus = Matrix::zeros(self.n_u, t);
        let mut x_minus = Matrix::zeros(self.n_x, t);
        let mut x_plus = Matrix::zeros(self.n_x, t);
        for (p, e) in self.entries.iter().enumerate() {
            u_minus.set_column(p, &e.u);
            x_minus.set_column(p, &e.x);
            let next = self.entries.get(p + 1).map_or(&self.latest_state, |n| &n.x);
            x_plus.set_column(p, next);
        }
        Ok(DataTriple {
            u_minus,
            x_minus,
            x_plus,
        })
    }
}

/// `U_{k-1}`, `X_{k-1}`, `X_k` for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTriple {
    pub u_minus: Matrix,
    pub x_minus: Matrix,
    pub x_plus: Matrix,
}

impl DataTriple {
    pub fn new(u_minus: Matrix, x_minus: Matrix, x_plus: Matrix) -> Result<Self> {
        let t = u_minus.ncols();
        if t == 0 || x_minus.ncols() != t || x_plus.ncols() != t {
            return Err(Error::dim("data matrices must share a positive column count"));
        }
        if x_minus.nrows() != x_plus.nrows() {
            return Err(Error::dim("X_minus and X_plus must have equal row counts"));
        }
        Ok(Self {
            u_minus,
            x_minus,
            x_plus,
        })
    }

    pub fn len(&self) -> usize {
        self.u_minus.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_x(&self) -> usize {
        self.x_minus.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.u_minus.nrows()
    }

    /// Stacks recorded samples and the state that follows the last one.
    /// Returns the triple and the disturbance record `D`.
    pub fn from_samples(samples: &[Sample], x_end: &Vector) -> Result<(Self, Matrix)> {
        let Some(first) = samples.first() else {
            return Err(Error::InsufficientData("no samples".into()));
        };
        let (nx, nu, t) = (first.x.len(), first.u.len(), samples.len());
        if x_end.len() != nx {
            return Err(Error::dim("final state length differs from the samples"));
        }
        let mut u = Matrix::zeros(nu, t);
        let mut xm = Matrix::zeros(nx, t);
        let mut xp = Matrix::zeros(nx, t);
        let mut d = Matrix::zeros(nx, t);
        for (c, s) in samples.iter().enumerate() {
            if s.x.len() != nx || s.u.len() != nu || s.d.len() != nx {
                return Err(Error::dim(format!("sample at k = {} has inconsistent lengths", s.k)));
            }
            u.set_column(c, &s.u);
            xm.set_column(c, &s.x);
            d.set_column(c, &s.d);
            let next = samples.get(c + 1).map_or(x_end, |n| &n.x);
            xp.set_column(c, next);
        }
        Ok((Self::new(u, xm, xp)?, d))
    }

    /// `W = [U_minus; X_minus]`.
    pub fn w(&self) -> Matrix {
        let (nu, nx, t) = (self.n_u(), self.n_x(), self.len());
        let mut w = Matrix::zeros(nu + nx, t);
        w.rows_mut(0, nu).copy_from(&self.u_minus);
        w.rows_mut(nu, nx).copy_from(&self.x_minus);
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeCertificate {
    pub order: usize,
    pub level: f64,
    pub sample_count: usize,
}

impl PeCertificate {
    /// Whether the sequence was long enough for a full-order certificate.
    pub fn is_full_order(&self, dim: usize) -> bool {
        self.sample_count >= (dim + 1) * self.order + 1
    }
}

/// Block-Hankel matrix of depth `order`; block `(r, c)` is `seq[r + c]`.
pub fn build_hankel(seq: &[Vector], order: usize) -> Result<Matrix> {
    let n_samples = seq.len();
    if order == 0 || order > n_samples {
        return Err(Error::InsufficientData(format!(
            "Hankel of order {order} from {n_samples} samples"
        )));
    }
    let n = seq[0].len();
    if n == 0 || seq.iter().any(|v| v.len() != n) {
        return Err(Error::dim("Hankel sequence entries must share a positive length"));
    }
    let cols = n_samples - order + 1;
    let mut h = Matrix::zeros(n * order, cols);
    for r in 0..order {
        for c in 0..cols {
            h.view_mut((r * n, c), (n, 1)).copy_from(&seq[r + c]);
        }
    }
    Ok(h)
}

/// `sigma_min` of the order-`order` Hankel matrix of `seq`.
pub fn pe_level(seq: &[Vector], order: usize) -> Result<PeCertificate> {
    let h = build_hankel(seq, order)?;
    Ok(PeCertificate {
        order,
        level: min_singular_value(&h)?,
        sample_count: seq.len(),
    })
}

/// Like [`pe_level`] but insists on `N >= (n + 1) L + 1` samples.
pub fn certify_pe(seq: &[Vector], order: usize) -> Result<PeCertificate> {
    let dim = seq.first().map_or(0, Vector::len);
    let needed = (dim + 1) * order + 1;
    if seq.len() < needed {
        return Err(Error::InsufficientData(format!(
            "order-{order} certificate needs {needed} samples, got {}",
            seq.len()
        )));
    }
    pe_level(seq, order)
}

/// Rank test on `W`; returns the verdict and `sigma_min(W)`.
pub fn rank_condition(t: &DataTriple) -> (bool, f64) {
    rank_check(&t.w())
}

/// Full-row-rank test shared with the synthesis gate.
pub fn rank_check(w: &Matrix) -> (bool, f64) {
    if w.nrows() > w.ncols() {
        return (false, 0.0);
    }
    match singular_values(w) {
        Ok(sv) => {
            let smin = sv[sv.len() - 1].max(0.0);
            (smin > rank_threshold(sv[0]), smin)
        }
        Err(_) => (false, 0.0),
    }
}

/// `N = (n_x + 1) n_u + n_x` and the minimal window `T_min = 2N - 1`.
pub fn compute_n(n_x: usize, n_u: usize) -> (usize, usize) {
    let n = (n_x + 1) * n_u + n_x;
    (n, 2 * n - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{from_rows, pseudo_inverse};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sc(v: f64) -> Vector {
        Vector::from_element(1, v)
    }

    fn replay(x0: f64, samples: &[(f64, f64)]) -> DataWindow {
        let mut w = DataWindow::new(samples.len(), 1, 0, sc(x0)).unwrap();
        for &(u, x_next) in samples {
            w.push(sc(u), sc(x_next)).unwrap();
        }
        w
    }

    /// Printed noise-free samples, with x(5) from the dynamics.
    fn remark_clean() -> DataWindow {
        replay(
            1.0,
            &[
                (-1.5, 0.25),
                (-0.75, -0.125),
                (1.0 / 16.0, -3.0 / 32.0),
                (-3.0 / 64.0, -9.0 / 128.0),
                (-9.0 / 256.0, -27.0 / 512.0),
            ],
        )
    }

    fn remark_noisy() -> DataWindow {
        replay(
            1.0,
            &[
                (-1.5, 0.5),
                (-0.75, 0.25),
                (-0.375, 1.0 / 6.0),
                (-0.25, 0.125),
                (-3.0 / 16.0, 1.0 / 32.0),
            ],
        )
    }

    #[test]
    fn push_and_fifo() {
        let mut w = DataWindow::new(3, 1, -3, sc(0.0)).unwrap();
        w.push(sc(1.0), sc(1.0)).unwrap();
        assert_eq!(w.len(), 1);
        for i in 2..=4 {
            w.push(sc(i as f64), sc(i as f64)).unwrap();
        }
        assert_eq!(w.len(), 3);
        assert_eq!(w.inputs(), vec![sc(2.0), sc(3.0), sc(4.0)]);
        assert_eq!(w.oldest_time(), Some(-2));
        assert_eq!(w.latest_time(), 1);
        assert!(w.push(Vector::zeros(2), sc(0.0)).is_err());
    }

    #[test]
    fn snapshot_requires_full_window() {
        let mut w = DataWindow::new(2, 1, 0, sc(0.0)).unwrap();
        w.push(sc(1.0), sc(1.0)).unwrap();
        assert!(matches!(w.snapshot(), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn constant_trajectory_snapshot() {
        let c = Vector::from_vec(vec![2.0, -1.0]);
        let mut w = DataWindow::new(4, 1, 0, c.clone()).unwrap();
        for _ in 0..4 {
            w.push(sc(0.0), c.clone()).unwrap();
        }
        let t = w.snapshot().unwrap();
        assert_eq!(t.x_minus, t.x_plus);
        assert!(t.x_minus.column_iter().all(|col| col == c));
    }

    #[test]
    fn remark_noise_free_w5() {
        let t = remark_clean().snapshot().unwrap();
        let expected = from_rows(&[
            vec![-1.5, -0.75, 1.0 / 16.0, -3.0 / 64.0, -9.0 / 256.0],
            vec![1.0, 0.25, -0.125, -3.0 / 32.0, -9.0 / 128.0],
        ])
        .unwrap();
        assert_eq!(t.w(), expected);
        let (ok, margin) = rank_condition(&t);
        assert!(ok);
        assert!(margin > 1e-6);
    }

    #[test]
    fn remark_noisy_w5() {
        let t = remark_noisy().snapshot().unwrap();
        let expected = from_rows(&[
            vec![-1.5, -0.75, -0.375, -0.25, -3.0 / 16.0],
            vec![1.0, 0.5, 0.25, 1.0 / 6.0, 0.125],
        ])
        .unwrap();
        assert_eq!(t.w(), expected);
        let (ok, margin) = rank_condition(&t);
        assert!(!ok);
        assert!(margin < 1e-12);
    }

    #[test]
    fn identity_padded_passes() {
        let mut w = Matrix::zeros(3, 5);
        for i in 0..3 {
            w[(i, i)] = 1.0;
        }
        let (ok, margin) = rank_check(&w);
        assert!(ok);
        assert!((margin - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hankel_examples() {
        let h = build_hankel(&[sc(1.0), sc(2.0), sc(3.0)], 2).unwrap();
        assert_eq!(h, from_rows(&[vec![1.0, 2.0], vec![2.0, 3.0]]).unwrap());
        let v = Vector::from_vec(vec![1.0, 2.0]);
        let h = build_hankel(&vec![v; 6], 1).unwrap();
        assert_eq!(crate::numerics::numerical_rank(&h), 1);
        assert!(build_hankel(&[sc(1.0)], 2).is_err());
    }

    #[test]
    fn hankel_index_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq: Vec<Vector> = (0..7).map(|_| sc(rng.random_range(-1.0..1.0))).collect();
        let h = build_hankel(&seq, 3).unwrap();
        assert_eq!(h.shape(), (3, 5));
        for r in 0..3 {
            for c in 0..5 {
                assert_eq!(h[(r, c)], seq[r + c][0]);
            }
        }
    }

    #[test]
    fn pe_level_examples() {
        assert_eq!(pe_level(&vec![sc(0.0); 5], 2).unwrap().level, 0.0);
        let u = [-1.5, -0.75, -0.375, -0.25, -3.0 / 16.0];
        let seq: Vec<Vector> = u.iter().map(|&v| sc(v)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((pe_level(&seq, 1).unwrap().level - norm).abs() < 1e-12);
        assert!(certify_pe(&seq, 2).is_ok());
        assert!(matches!(certify_pe(&seq, 3), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn compute_n_examples() {
        assert_eq!(compute_n(2, 2), (8, 15));
        assert_eq!(compute_n(3, 2), (11, 21));
        assert_eq!(compute_n(1, 1), (3, 5));
    }

    #[test]
    fn column_append_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let dim = rng.random_range(1..=2);
            let order = rng.random_range(1..=3);
            let len = rng.random_range(order * dim + order..order * dim + order + 6);
            let seq: Vec<Vector> = (0..len)
                .map(|_| Vector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            // Only meaningful once the Hankel is wide.
            let start = (dim * order + order - 1).max(order);
            let mut prev = pe_level(&seq[..start], order).unwrap().level;
            for j in start + 1..=len {
                let cur = pe_level(&seq[..j], order).unwrap().level;
                assert!(cur >= prev - 1e-12, "level dropped from {prev} to {cur}");
                prev = cur;
            }
        }
    }

    proptest! {
        #[test]
        fn hankel_shape_law(dim in 1usize..4, len in 1usize..12, order in 1usize..6) {
            prop_assume!(order <= len);
            let seq: Vec<Vector> = (0..len).map(|i| Vector::from_element(dim, i as f64)).collect();
            let h = build_hankel(&seq, order).unwrap();
            prop_assert_eq!(h.shape(), (dim * order, len - order + 1));
        }

        #[test]
        fn snapshot_shifts(values in proptest::collection::vec(-5.0f64..5.0, 12)) {
            let mut w = DataWindow::new(5, 1, -5, Vector::from_vec(vec![values[0], values[1]])).unwrap();
            for i in 0..5 {
                w.push(sc(values[2 + i]), Vector::from_vec(vec![values[7 + i], values[i]])).unwrap();
            }
            let t = w.snapshot().unwrap();
            for p in 0..4 {
                prop_assert_eq!(t.x_plus.column(p), t.x_minus.column(p + 1));
            }
        }

        #[test]
        fn rank_ok_implies_pinv(values in proptest::collection::vec(-1.0f64..1.0, 18)) {
            let w = Matrix::from_vec(3, 6, values);
            let (ok, _) = rank_check(&w);
            if ok {
                prop_assert!(pseudo_inverse(&w.transpose()).is_ok());
            }
        }
    }
}
