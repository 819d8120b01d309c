//! Quantities that need the true model: Lyapunov families, disturbance
//! thresholds, convergence constants, event-timing checks and an empirical
//! practical-stability test on recorded trajectories.

use serde::{Deserialize, Serialize};

use crate::data_window::{pe_level, DataTriple};
use crate::error::{Error, Result};
use crate::numerics::{
    max_eigenvalue, min_eigenvalue, singular_values, solve_discrete_lyapunov, spectral_norm, spectral_radius,
    Matrix, Vector,
};
use crate::plant::{open_loop_trajectory, DisturbanceModel, SwitchedSystem};
use crate::supervisor::{Event, LogEntry, SupervisorConfig};
use crate::synthesis::{extract_gain, solve_ideal_sdp, SdpProblemData, SdpStatus, SolverBackend};

/// Knobs for [`ModelSideInfo::from_model`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSideOptions {
    pub eta2: f64,
    /// Decay parameter `beta_i`, shared by all modes.
    pub beta: f64,
    pub rho_internal: f64,
    /// Overrides the default `2 max_i ||[K_i; I]||^2 ||P_i||`.
    pub phi_const: Option<f64>,
}

impl Default for ModelSideOptions {
    fn default() -> Self {
        Self {
            eta2: 2.0,
            beta: 1.0,
            rho_internal: 1.0,
            phi_const: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSideInfo {
    pub sys: SwitchedSystem,
    pub gains: Vec<Matrix>,
    pub betas: Vec<f64>,
    pub window: usize,
    pub eta2: f64,
    pub w_hat: f64,
    pub rho_internal: f64,
    pub phi_const: f64,
    /// Optimal ideal-program cost per mode.
    pub gamma_bar: Vec<f64>,
    /// Condition number of the disturbance-free offline `W`.
    pub window_condition: f64,
}

impl ModelSideInfo {
    /// Replays the offline inputs on every mode without disturbance and
    /// takes gains, costs and `phi` from the ideal program on that data.
    pub fn from_model(
        sys: &SwitchedSystem,
        offline_inputs: &[Vector],
        x_start: &Vector,
        offline_mode: usize,
        opts: &ModelSideOptions,
        backend: &dyn SolverBackend,
    ) -> Result<Self> {
        if offline_mode >= sys.mode_count() {
            return Err(Error::InvalidArgument(format!("offline mode {offline_mode} does not exist")));
        }
        if !(opts.eta2 >= 1.0) || !(opts.beta > 0.0) || !(opts.rho_internal > 0.0) {
            return Err(Error::InvalidArgument("eta2 >= 1, beta > 0 and rho > 0 are required".into()));
        }
        let t = offline_inputs.len();
        let n_x = sys.n_x();
        let clean = DisturbanceModel::zero(n_x);
        let mut gains = Vec::new();
        let mut gamma_bar = Vec::new();
        let mut phi_default: f64 = 0.0;
        let mut window_condition = f64::NAN;
        for (i, mode) in sys.modes().iter().enumerate() {
            let (samples, end) = open_loop_trajectory(&mode.a, &mode.b, &clean, -(t as i64), x_start, offline_inputs)?;
            let (triple, d) = DataTriple::from_samples(&samples, &end.x)?;
            if i == offline_mode {
                window_condition = condition_number(&triple.w())?;
            }
            let data = SdpProblemData::from_triple(&triple, 1.0)?;
            let sol = solve_ideal_sdp(&data, &d, backend)?;
            if sol.status != SdpStatus::Optimal {
                return Err(Error::NotOptimal(format!("ideal program for mode {} returned {:?}", i + 1, sol.status)));
            }
            let k = extract_gain(&data.u_minus, &sol)?;
            let mut phi_mat = Matrix::zeros(k.nrows() + n_x, n_x);
            phi_mat.rows_mut(0, k.nrows()).copy_from(&k);
            phi_mat.rows_mut(k.nrows(), n_x).fill_with_identity();
            phi_default = phi_default.max(spectral_norm(&phi_mat).powi(2) * spectral_norm(&sol.p));
            gamma_bar.push(sol.gamma);
            gains.push(k);
        }
        let w_bar = pe_level(offline_inputs, n_x + 1)?.level;
        Ok(Self {
            sys: sys.clone(),
            betas: vec![opts.beta; sys.mode_count()],
            gains,
            window: t,
            eta2: opts.eta2,
            w_hat: w_bar * opts.rho_internal / ((n_x + 1) as f64).sqrt(),
            rho_internal: opts.rho_internal,
            phi_const: opts.phi_const.unwrap_or(2.0 * phi_default),
            gamma_bar,
            window_condition,
        })
    }

    pub fn n_x(&self) -> usize {
        self.sys.n_x()
    }

    pub fn n_u(&self) -> usize {
        self.sys.n_u()
    }

    fn closed_loop(&self, i: usize) -> Matrix {
        let m = self.sys.mode(i);
        &m.a + &m.b * &self.gains[i]
    }
}

fn condition_number(m: &Matrix) -> Result<f64> {
    let s = singular_values(m)?;
    let lo = s[s.len() - 1];
    Ok(if lo > 0.0 { s[0] / lo } else { f64::INFINITY })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovFamily {
    pub p: Vec<Matrix>,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl LyapunovFamily {
    /// `W_i(x) = x' P_i x`.
    pub fn value(&self, i: usize, x: &Vector) -> f64 {
        (x.transpose() * &self.p[i] * x)[(0, 0)]
    }
}

pub fn compute_lyapunov_family(info: &ModelSideInfo) -> Result<LyapunovFamily> {
    let m = info.sys.mode_count();
    if info.gains.len() != m || info.betas.len() != m {
        return Err(Error::dim("one gain and one beta per mode are required"));
    }
    let mut p = Vec::with_capacity(m);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for i in 0..m {
        let a_cl = info.closed_loop(i);
        let rho = spectral_radius(&a_cl)?;
        if rho >= 1.0 {
            return Err(Error::Unstable(rho));
        }
        let pi = solve_discrete_lyapunov(&a_cl, info.betas[i])?;
        lo = lo.min(min_eigenvalue(&pi));
        hi = hi.max(max_eigenvalue(&pi));
        p.push(pi);
    }
    Ok(LyapunovFamily {
        p,
        lambda_min: lo,
        lambda_max: hi,
    })
}

/// Norm bound for the `T x T` block lower-triangular map from disturbances
/// to the state window, with every block replaced by its worst-case norm.
pub fn omega_bound(a_norm_max: f64, window: usize) -> f64 {
    let m = Matrix::from_fn(window, window, |r, c| {
        if r > c {
            a_norm_max.powi((r - c - 1) as i32)
        } else {
            0.0
        }
    });
    spectral_norm(&m)
}

pub fn compute_omega_bound(info: &ModelSideInfo) -> f64 {
    omega_bound(max_a_norm(&info.sys), info.window)
}

fn max_a_norm(sys: &SwitchedSystem) -> f64 {
    sys.modes().iter().map(|m| spectral_norm(&m.a)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub omega_bar: f64,
    pub xi_bar: f64,
    pub delta_d1: f64,
    pub delta_d2: f64,
    pub lambda_check: f64,
    pub delta_k: f64,
    pub c: f64,
    pub c0: f64,
    pub c1: f64,
    pub phi0: f64,
    pub tau_bar: f64,
    pub mu_rate: f64,
    pub lambda_p_min: f64,
    pub lambda_p_max: f64,
    pub gamma_bar: Vec<f64>,
}

pub fn compute_bounds(info: &ModelSideInfo, fam: &LyapunovFamily, cfg: &SupervisorConfig) -> Result<BoundReport> {
    let m = info.sys.mode_count();
    if info.gamma_bar.len() != m {
        return Err(Error::InvalidArgument(format!(
            "{} ideal costs for {m} modes",
            info.gamma_bar.len()
        )));
    }
    let delta_x = cfg
        .delta_x
        .ok_or_else(|| Error::config("supervisor.delta_x", "required for the disturbance bound"))?;
    if !(delta_x > 0.0) {
        return Err(Error::config("supervisor.delta_x", "must be positive"));
    }
    let t = info.window as f64;
    let n_x = info.n_x() as f64;
    let eta2 = info.eta2;
    let phi = info.phi_const;
    let slack = 1.0 - 1.0 / eta2;

    let omega_bar = compute_omega_bound(info);
    let xi_bar = info
        .sys
        .modes()
        .iter()
        .map(|md| {
            let mut ab = Matrix::zeros(md.a.nrows(), md.a.ncols() + md.b.ncols());
            ab.columns_mut(0, md.a.ncols()).copy_from(&md.a);
            ab.columns_mut(md.a.ncols(), md.b.ncols()).copy_from(&md.b);
            spectral_norm(&ab)
        })
        .fold(0.0, f64::max);
    let cw = info.window_condition;

    let delta_d1 = info.w_hat
        * [
            1.0 / (2.0 * (t * n_x).sqrt() * omega_bar),
            slack / (24.0 * t.sqrt() * phi * xi_bar * cw),
            slack / (24.0 * t * n_x.sqrt() * phi * xi_bar * omega_bar).sqrt(),
            slack / (24.0 * t * phi).sqrt(),
        ]
        .into_iter()
        .fold(f64::INFINITY, f64::min);

    let lp = fam.lambda_max;
    let beta_bar = info.betas.iter().copied().fold(0.0, f64::max);
    let a_cl_bar = (0..m).map(|i| spectral_norm(&info.closed_loop(i))).fold(0.0, f64::max);
    let quad = delta_x * (-2.0 * lp * a_cl_bar + (4.0 * lp * lp * a_cl_bar * a_cl_bar + 2.0 * lp * beta_bar).sqrt())
        / (2.0 * lp);
    let delta_d2 = delta_d1.min(quad);

    let cost_max = info.gamma_bar.iter().map(|g| eta2 * g).fold(0.0, f64::max);
    let lambda_check = 1.0 - beta_bar / (2.0 * cost_max);
    let delta_k = info
        .gamma_bar
        .iter()
        .map(|g| (eta2 * g - n_x).max(0.0).sqrt())
        .fold(0.0, f64::max);

    let norms: Vec<(f64, f64)> = info
        .sys
        .modes()
        .iter()
        .map(|md| (spectral_norm(&md.a), spectral_norm(&md.b)))
        .collect();
    let c0 = norms.iter().map(|(a, b)| a + b * delta_k).fold(0.0, f64::max);
    let c1 = norms
        .iter()
        .map(|(a, b)| a + b * cfg.delta_eps / delta_x)
        .fold(0.0, f64::max);
    let c = c0.max(c1).max(1.0);

    let phi0 = (cost_max / fam.lambda_min).sqrt();
    let lt = cfg.lambda0.sqrt();
    let mu_rate = 0.5 * (lt + 1.0);
    let tau_bar = (c / lt).ln() / (phi0 * (mu_rate / lt).powf(t)).ln();

    Ok(BoundReport {
        omega_bar,
        xi_bar,
        delta_d1,
        delta_d2,
        lambda_check,
        delta_k,
        c,
        c0,
        c1,
        phi0,
        tau_bar,
        mu_rate,
        lambda_p_min: fam.lambda_min,
        lambda_p_max: fam.lambda_max,
        gamma_bar: info.gamma_bar.clone(),
    })
}

impl BoundReport {
    /// Two-column text table.
    pub fn table(&self) -> String {
        let rows: [(&str, f64); 14] = [
            ("Omega_bar", self.omega_bar),
            ("Xi_bar", self.xi_bar),
            ("delta_d1", self.delta_d1),
            ("delta_d2", self.delta_d2),
            ("lambda0_check", self.lambda_check),
            ("delta_K", self.delta_k),
            ("C0", self.c0),
            ("C1", self.c1),
            ("C", self.c),
            ("phi0", self.phi0),
            ("mu", self.mu_rate),
            ("tau_bar", self.tau_bar),
            ("lambda_P_min", self.lambda_p_min),
            ("lambda_P_max", self.lambda_p_max),
        ];
        let mut out = String::new();
        for (name, v) in rows {
            out.push_str(&format!("{name:<14} {v:>14.6e}\n"));
        }
        for (i, g) in self.gamma_bar.iter().enumerate() {
            out.push_str(&format!("{:<14} {g:>14.6e}\n", format!("gamma_bar_{}", i + 1)));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchTiming {
    pub switch: usize,
    /// Closest start event within tolerance, else the first one after the switch.
    pub start: Option<i64>,
    /// First end event after `start`.
    pub end: Option<i64>,
    pub start_aligned: bool,
    pub end_aligned: bool,
    /// The step at the switch was spent inside the dormant set, where no
    /// events are defined.
    pub dormant_at_switch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma5Report {
    pub window: usize,
    pub tolerance: i64,
    pub switches: Vec<SwitchTiming>,
    pub all_aligned: bool,
}

/// Compares detected start/end events with `k_s` and `k_s + T` for every
/// switch after time 0 that lies inside the log.
pub fn lemma5_timing_check(log: &[LogEntry], switch_instants: &[usize], window: usize) -> Lemma5Report {
    const TOL: i64 = 1;
    let last = log.last().map_or(-1, |e| e.k);
    let starts: Vec<i64> = log.iter().filter(|e| e.event == Event::StartKj).map(|e| e.k).collect();
    let ends: Vec<i64> = log.iter().filter(|e| e.event == Event::EndKjSup).map(|e| e.k).collect();
    let mut switches = Vec::new();
    for &ks in switch_instants.iter().filter(|&&s| s > 0 && (s as i64) <= last) {
        let k = ks as i64;
        let start = starts
            .iter()
            .copied()
            .filter(|s| (s - k).abs() <= TOL)
            .min_by_key(|s| (s - k).abs())
            .or_else(|| starts.iter().copied().find(|&s| s > k));
        let end = start.and_then(|s| ends.iter().copied().find(|&e| e > s));
        let dormant_at_switch = log.iter().any(|e| e.k == k && e.phase == "dormant");
        switches.push(SwitchTiming {
            switch: ks,
            start,
            end,
            start_aligned: start.is_some_and(|s| (s - k).abs() <= TOL),
            end_aligned: end.is_some_and(|e| (e - k - window as i64).abs() <= TOL),
            dormant_at_switch,
        });
    }
    let all_aligned = switches.iter().all(|s| s.start_aligned && s.end_aligned);
    Lemma5Report {
        window,
        tolerance: TOL,
        switches,
        all_aligned,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPeak {
    pub start: usize,
    pub end: usize,
    pub peak: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IspsReport {
    /// Peaks of the stretches spent outside the ball.
    pub peaks: Vec<SegmentPeak>,
    pub sup_norm: f64,
    pub bounded: bool,
    pub decay_rate: f64,
    /// Envelope `gain * decay_rate^k * ||x(0)||`.
    pub envelope_gain: f64,
    pub residual_offset: f64,
    pub c0: f64,
    pub ball_radius: f64,
    pub entered_ball_at: Option<usize>,
    pub escapes: Vec<usize>,
    pub unrecovered_escapes: Vec<usize>,
    pub verdict: bool,
}

/// Steps at the end of a trajectory in which an escape need not be undone.
pub const ISPS_GRACE: usize = 20;

/// Empirical practical-stability test.
///
/// The ball has radius `delta_x + d_bar`: one disturbance step can push a
/// state on the `delta_x` sphere that far out.
pub fn check_isps(trajectory: &[Vector], d_bar: f64, delta_x: f64) -> Result<IspsReport> {
    let Some(x0) = trajectory.first() else {
        return Err(Error::InsufficientData("empty trajectory".into()));
    };
    let norms: Vec<f64> = trajectory.iter().map(|x| x.norm()).collect();
    if norms.iter().any(|n| !n.is_finite()) {
        return Err(Error::InvalidArgument("trajectory contains non-finite states".into()));
    }
    let n0 = x0.norm();
    let sup_norm = norms.iter().copied().fold(0.0, f64::max);
    let bounded = sup_norm <= 10.0 * n0.max(d_bar).max(delta_x);

    let radius = delta_x + d_bar;
    let inside: Vec<bool> = norms.iter().map(|&n| n <= radius).collect();
    let first_entry = inside.iter().position(|&b| b).unwrap_or(norms.len());

    // The decay rate comes from a least-squares line through ln ||x(k)|| on
    // the initial transient; the intercept is then raised until the line
    // bounds every fitted point, and excursions above it form the offset.
    let log_pts = |range: std::ops::Range<usize>| -> Vec<(f64, f64)> {
        range
            .filter(|&k| norms[k] > delta_x && norms[k] > 0.0)
            .map(|k| (k as f64, norms[k].ln()))
            .collect()
    };
    let mut pts = log_pts(0..first_entry);
    if pts.len() < 2 {
        pts = log_pts(0..norms.len());
    }
    let slope = if pts.len() >= 2 {
        let m = pts.len() as f64;
        let kbar = pts.iter().map(|p| p.0).sum::<f64>() / m;
        let ybar = pts.iter().map(|p| p.1).sum::<f64>() / m;
        let sxx: f64 = pts.iter().map(|p| (p.0 - kbar).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - kbar) * (p.1 - ybar)).sum();
        sxy / sxx
    } else {
        f64::NEG_INFINITY
    };
    let intercept = if slope.is_finite() {
        pts.iter().map(|p| p.1 - slope * p.0).fold(f64::NEG_INFINITY, f64::max)
    } else {
        pts.first().map_or(f64::NEG_INFINITY, |p| p.1)
    };
    let decay_rate = slope.exp();
    let envelope = |k: usize| {
        let e = if slope.is_finite() {
            (intercept + slope * k as f64).exp()
        } else if k == 0 {
            intercept.exp()
        } else {
            0.0
        };
        if e.is_finite() {
            e
        } else {
            0.0
        }
    };
    let residual_offset = norms
        .iter()
        .enumerate()
        .map(|(k, &n)| n - envelope(k))
        .fold(0.0, f64::max);
    let envelope_gain = if n0 > 0.0 { intercept.exp() / n0 } else { 0.0 };

    let entered_ball_at = inside.iter().position(|&b| b);
    let mut escapes = Vec::new();
    let mut unrecovered = Vec::new();
    let mut peaks = Vec::new();
    let mut k = 0;
    while k < norms.len() {
        if inside[k] {
            k += 1;
            continue;
        }
        let start = k;
        while k < norms.len() && !inside[k] {
            k += 1;
        }
        let peak = norms[start..k].iter().copied().fold(0.0, f64::max);
        peaks.push(SegmentPeak { start, end: k, peak });
        if start > 0 {
            escapes.push(start);
            if k == norms.len() && start + ISPS_GRACE < norms.len() {
                unrecovered.push(start);
            }
        }
    }
    let verdict = bounded
        && decay_rate <= 1.0
        && residual_offset <= 10.0 * (d_bar + delta_x)
        && entered_ball_at.is_some()
        && unrecovered.is_empty();
    Ok(IspsReport {
        peaks,
        sup_norm,
        bounded,
        decay_rate,
        envelope_gain,
        residual_offset,
        c0: residual_offset + delta_x,
        ball_radius: radius,
        entered_ball_at,
        escapes,
        unrecovered_escapes: unrecovered,
        verdict,
    })
}

/// Fraction of eligible steps at which `W_i(x(k+1)) <= lambda0 W_i(x(k))`
/// holds, `i` being the mode active at `k`. `None` when no step is eligible.
pub fn decrease_fraction(
    states: &[Vector],
    modes: &[usize],
    eligible: &[bool],
    fam: &LyapunovFamily,
    lambda0: f64,
) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for k in 0..states.len().saturating_sub(1) {
        if !eligible.get(k).copied().unwrap_or(false) {
            continue;
        }
        let i = modes[k];
        total += 1;
        if fam.value(i, &states[k + 1]) <= lambda0 * fam.value(i, &states[k]) {
            hits += 1;
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}
