use super::*;
use crate::data_window::compute_n;
use crate::numerics::{from_rows, numerical_rank, controllability_matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn backend() -> InteriorPoint {
    InteriorPoint::default()
}

/// Noise-free open-loop data of length `t`.
fn simulate(a: &Matrix, b: &Matrix, t: usize, amp: f64, seed: u64) -> SdpProblemData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_x, n_u) = (a.nrows(), b.ncols());
    let mut x = Matrix::from_fn(n_x, 1, |_, _| rng.random_range(-1.0..1.0));
    let mut um = Matrix::zeros(n_u, t);
    let mut xm = Matrix::zeros(n_x, t);
    let mut xp = Matrix::zeros(n_x, t);
    for k in 0..t {
        let u = Matrix::from_fn(n_u, 1, |_, _| rng.random_range(-amp..amp));
        let next = a * &x + b * &u;
        um.set_column(k, &u.column(0));
        xm.set_column(k, &x.column(0));
        xp.set_column(k, &next.column(0));
        x = next;
    }
    SdpProblemData::new(um, xm, xp, 1.0).unwrap()
}

/// Unit-weight LQR gain by Riccati fixed-point iteration.
fn lqr_gain(a: &Matrix, b: &Matrix) -> Matrix {
    let (n, m) = (a.nrows(), b.ncols());
    let mut x = Matrix::identity(n, n);
    for _ in 0..100_000 {
        let r = Matrix::identity(m, m) + b.transpose() * &x * b;
        let rinv = r.try_inverse().unwrap();
        let next = a.transpose() * &x * a - a.transpose() * &x * b * &rinv * b.transpose() * &x * a
            + Matrix::identity(n, n);
        let done = (&next - &x).amax() < 1e-13 * (1.0 + next.amax());
        x = next;
        if done {
            break;
        }
    }
    let r = Matrix::identity(m, m) + b.transpose() * &x * b;
    -(r.try_inverse().unwrap() * b.transpose() * &x * a)
}

fn flight_mode1() -> (Matrix, Matrix) {
    (
        from_rows(&[vec![0.977, 0.097], vec![0.002, 0.981]]).unwrap(),
        from_rows(&[vec![-0.013, -0.004], vec![-0.171, -0.051]]).unwrap(),
    )
}

fn flight_mode2() -> (Matrix, Matrix) {
    (
        from_rows(&[vec![0.852, 0.088], vec![-0.753, 0.87]]).unwrap(),
        from_rows(&[vec![-0.106, -0.021], vec![-1.8143, -0.358]]).unwrap(),
    )
}

#[test]
fn scalar_noise_free_is_stabilized() {
    let a = Matrix::from_element(1, 1, 0.5);
    let b = Matrix::from_element(1, 1, 1.0);
    let d = simulate(&a, &b, 5, 1.0, 1);
    let sol = solve_robust_sdp(&d, &backend()).unwrap();
    assert_eq!(sol.status, SdpStatus::Optimal);
    let k = extract_gain(&d.u_minus, &sol).unwrap();
    assert!((0.5 + k[(0, 0)]).abs() < 1.0);
    assert!(sol.stats.constraint_violation < 1e-6);
}

#[test]
fn remark_noisy_window_is_infeasible() {
    let u = from_rows(&[vec![-1.5, -0.75, -0.375, -0.25, -3.0 / 16.0]]).unwrap();
    let xm = from_rows(&[vec![1.0, 0.5, 0.25, 1.0 / 6.0, 0.125]]).unwrap();
    let xp = from_rows(&[vec![0.5, 0.25, 1.0 / 6.0, 0.125, 1.0 / 32.0]]).unwrap();
    let d = SdpProblemData::new(u, xm, xp, 1.0).unwrap();
    let sol = solve_robust_sdp(&d, &backend()).unwrap();
    assert_eq!(sol.status, SdpStatus::Infeasible);
    assert_eq!(sol.reason, Some(InfeasibilityReason::RankCondition));
    assert!(sol.stats.rank_margin < 1e-12);
}

#[test]
fn rank_deficient_ideal_is_infeasible() {
    let u = from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
    let xm = from_rows(&[vec![2.0, 4.0, 6.0, 8.0]]).unwrap();
    let xp = from_rows(&[vec![1.0, 1.0, 1.0, 1.0]]).unwrap();
    let d = SdpProblemData::new(u, xm, xp, 1.0).unwrap();
    let sol = solve_ideal_sdp(&d, &Matrix::zeros(1, 4), &backend()).unwrap();
    assert_eq!(sol.status, SdpStatus::Infeasible);
}

#[test]
fn ideal_program_recovers_lqr_on_flight_mode1() {
    let (a, b) = flight_mode1();
    let (_, t) = compute_n(2, 2);
    let d = simulate(&a, &b, t, 0.3, 7);
    let sol = solve_ideal_sdp(&d, &Matrix::zeros(2, t), &backend()).unwrap();
    assert_eq!(sol.status, SdpStatus::Optimal);
    let k = extract_gain(&d.u_minus, &sol).unwrap();
    let k_lqr = lqr_gain(&a, &b);
    assert!((&k - &k_lqr).amax() < 1e-4, "K = {k}, LQR = {k_lqr}");
}

#[test]
fn flight_mode1_robust_is_stabilizing() {
    let (a, b) = flight_mode1();
    let d = simulate(&a, &b, 15, 0.3, 3);
    let sol = solve_robust_sdp(&d, &backend()).unwrap();
    assert_eq!(sol.status, SdpStatus::Optimal);
    let k = extract_gain(&d.u_minus, &sol).unwrap();
    assert!(verify_closed_loop(&a, &b, &k).unwrap() < 1.0);
    // A mode-1 gain on mode 2 is only recorded.
    let (a2, b2) = flight_mode2();
    let rho2 = verify_closed_loop(&a2, &b2, &k).unwrap();
    assert!(rho2.is_finite());
}

#[test]
fn zero_disturbance_programs_share_constraints() {
    let (a, b) = flight_mode1();
    let d = simulate(&a, &b, 15, 0.3, 5);
    let robust = solve_robust_sdp(&d, &backend()).unwrap();
    let ideal = solve_ideal_sdp(&d, &Matrix::zeros(2, 15), &backend()).unwrap();
    assert!(robust.is_optimal() && ideal.is_optimal());
    // The robust optimum is feasible for the ideal program and vice versa.
    let mut as_ideal = robust.clone();
    as_ideal.gamma = robust.p.trace() + robust.l.trace();
    assert!(check_ideal_constraints(&d, &Matrix::zeros(2, 15), &as_ideal).max_violation() < 1e-6);
    let mut as_robust = ideal.clone();
    as_robust.gamma = ideal.gamma + d.alpha * ideal.v.trace();
    assert!(check_robust_constraints(&d, &as_robust).max_violation() < 1e-6);
    assert!(ideal.gamma <= as_ideal.gamma + 1e-6);
    assert!(robust.gamma <= as_robust.gamma + 1e-6);
}

#[test]
fn scaled_ideal_optimum_is_robust_feasible() {
    let (a, b) = flight_mode1();
    let d = simulate(&a, &b, 15, 0.3, 9);
    let ideal = solve_ideal_sdp(&d, &Matrix::zeros(2, 15), &backend()).unwrap();
    assert!(ideal.is_optimal());
    let eta2 = 2.0;
    let pinv = ideal.p.clone().try_inverse().unwrap();
    let v = &ideal.q * pinv * ideal.q.transpose() * eta2;
    let candidate = SdpSolution {
        status: SdpStatus::Optimal,
        reason: None,
        gamma: eta2 * ideal.gamma + d.alpha * v.trace(),
        q: &ideal.q * eta2,
        p: &ideal.p * eta2,
        l: &ideal.l * eta2,
        v,
        stats: SdpStats::default(),
    };
    let report = check_robust_constraints(&d, &candidate);
    assert!(report.max_violation() < 1e-6, "{report:?}");
    // Strict margin in the contraction constraint: (1 - eta2) I.
    assert!(report.contraction < -0.5);
}

#[test]
fn extract_gain_examples() {
    let sol = SdpSolution {
        status: SdpStatus::Optimal,
        reason: None,
        gamma: 0.0,
        q: Matrix::zeros(3, 2),
        p: Matrix::identity(2, 2),
        l: Matrix::zeros(1, 1),
        v: Matrix::zeros(3, 3),
        stats: SdpStats::default(),
    };
    let u = from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
    assert_eq!(extract_gain(&u, &sol).unwrap(), Matrix::zeros(1, 2));
    let mut bad = sol.clone();
    bad.status = SdpStatus::Infeasible;
    assert!(matches!(extract_gain(&u, &bad), Err(Error::NotOptimal(_))));
}

#[test]
fn verify_closed_loop_examples() {
    let a = from_rows(&[vec![0.5, 0.1], vec![0.0, 0.3]]).unwrap();
    let b = from_rows(&[vec![1.0], vec![0.0]]).unwrap();
    let rho = verify_closed_loop(&a, &b, &Matrix::zeros(1, 2)).unwrap();
    assert!((rho - 0.5).abs() < 1e-12);
    let one = Matrix::from_element(1, 1, 1.0);
    assert!(verify_closed_loop(&one, &one, &(-&one)).unwrap().abs() < 1e-15);
    assert!(verify_closed_loop(&a, &b, &Matrix::zeros(2, 2)).is_err());
}

#[test]
fn random_noise_free_systems_are_stabilized() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut optimal = 0;
    let mut tried = 0;
    while tried < 100 {
        let n_x = rng.random_range(1..=4);
        let n_u = rng.random_range(1..=2);
        let a = Matrix::from_fn(n_x, n_x, |_, _| rng.random_range(-1.2..1.2));
        let b = Matrix::from_fn(n_x, n_u, |_, _| rng.random_range(-1.0..1.0));
        if numerical_rank(&controllability_matrix(&a, &b)) < n_x {
            continue;
        }
        tried += 1;
        let (_, t) = compute_n(n_x, n_u);
        let d = simulate(&a, &b, t, 1.0, rng.random());
        let sol = solve_robust_sdp(&d, &backend()).unwrap();
        if sol.is_optimal() {
            optimal += 1;
            let k = extract_gain(&d.u_minus, &sol).unwrap();
            let rho = verify_closed_loop(&a, &b, &k).unwrap();
            assert!(rho < 1.0, "rho = {rho} for n_x = {n_x}, n_u = {n_u}");
            assert!(sol.stats.constraint_violation <= 1e-5 * (1.0 + sol.gamma));
        }
    }
    assert!(optimal >= 95, "only {optimal} of 100 solved");
}

#[test]
fn solves_are_deterministic() {
    let (a, b) = flight_mode1();
    let d = simulate(&a, &b, 15, 0.3, 11);
    let s1 = solve_robust_sdp(&d, &backend()).unwrap();
    let s2 = solve_robust_sdp(&d, &backend()).unwrap();
    assert_eq!(s1.status, s2.status);
    assert!((s1.gamma - s2.gamma).abs() <= 1e-9);
}

/// Fails its first call, then delegates.
struct FlakyOnce {
    inner: InteriorPoint,
    calls: std::cell::Cell<usize>,
}

impl SolverBackend for FlakyOnce {
    fn name(&self) -> &str {
        "flaky"
    }

    fn solve(&self, problem: &ConicProblem) -> ConicSolution {
        let n = self.calls.get();
        self.calls.set(n + 1);
        if n == 0 {
            return ConicSolution {
                status: ConicStatus::NumericalFailure,
                y: vec![],
                objective: f64::NAN,
                stats: SolverStats::default(),
            };
        }
        self.inner.solve(problem)
    }
}

#[test]
fn numerical_failure_retries_on_scaled_data() {
    let (a, b) = flight_mode1();
    let mut d = simulate(&a, &b, 15, 3.0, 13);
    d.alpha = 0.5;
    let direct = solve_robust_sdp(&d, &backend()).unwrap();
    let flaky = FlakyOnce { inner: backend(), calls: std::cell::Cell::new(0) };
    let retried = solve_robust_sdp(&d, &flaky).unwrap();
    assert_eq!(flaky.calls.get(), 2);
    assert_eq!(retried.status, SdpStatus::Optimal);
    assert!(retried.stats.retried_scaled);
    assert!(check_robust_constraints(&d, &retried).max_violation() < 1e-6);
    assert!((retried.gamma - direct.gamma).abs() < 1e-5 * (1.0 + direct.gamma));
}

#[test]
fn dump_round_trips() {
    let (a, b) = flight_mode1();
    let d = simulate(&a, &b, 15, 0.3, 17);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sdp.json");
    SdpDump::robust(&d, Some(4)).write(&path).unwrap();
    let back: SdpDump = serde_json::from_reader(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back.to_problem().unwrap(), d);
    assert_eq!(back.time, Some(4));
}
