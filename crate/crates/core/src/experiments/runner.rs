use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Resolved};
use crate::analysis::{
    check_isps, compute_bounds, compute_lyapunov_family, lemma5_timing_check, BoundReport, IspsReport, Lemma5Report,
    ModelSideInfo, ModelSideOptions,
};
use crate::data_window::{rank_condition, DataWindow};
use crate::error::{Error, Result};
use crate::numerics::{spectral_norm, Vector};
use crate::plant::{open_loop_trajectory, step_with, uniform_inputs, PlantState};
use crate::supervisor::{auxiliary_value, warm_start, LogEntry, SupervisorState};
use crate::synthesis::{InteriorPoint, SdpDump, SdpProblemData, SolverBackend};

/// One row of the trajectory table. The last row of a run carries the final
/// state and no input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: i64,
    pub x: Vec<f64>,
    pub u: Option<Vec<f64>>,
    /// Regime active at `k`, numbered from 1.
    pub mode: usize,
    pub phase: String,
    pub aux_value: f64,
    pub w_sigma_min: f64,
    pub solved: bool,
    pub feasible: Option<bool>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub disturbance_seed: u64,
    pub offline_seed: u64,
    pub excitation_seed: u64,
    pub window: usize,
    pub n_excite: usize,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub metadata: RunMetadata,
    pub records: Vec<StepRecord>,
}

impl TrajectoryLog {
    pub fn states(&self) -> Vec<Vector> {
        self.records.iter().map(|r| Vector::from_column_slice(&r.x)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcitationWindow {
    pub start: i64,
    pub length: usize,
    /// False when the horizon cut the window short.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStartInfo {
    pub gamma: f64,
    pub gain: Vec<Vec<f64>>,
    pub w_sigma_min: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub warnings: Vec<String>,
    pub log: TrajectoryLog,
    pub events: Vec<LogEntry>,
    /// Offline samples `x(-T), ..., x(-1)`.
    pub offline_states: Vec<Vector>,
    /// `d(k)` for `k = 0, ..., horizon - 1`.
    pub disturbances: Vec<Vector>,
    /// `||K(k)||` applied at each step.
    pub gain_norms: Vec<f64>,
    pub excitation_windows: Vec<ExcitationWindow>,
    pub excitation_levels: Vec<f64>,
    pub warm_start: WarmStartInfo,
    pub analysis_delta_x: Option<f64>,
    pub bounds: Option<BoundReport>,
    pub bounds_error: Option<String>,
    pub isps: Option<IspsReport>,
    pub lemma5: Lemma5Report,
    pub sdp_dumps: Vec<SdpDump>,
}

impl RunResult {
    pub fn max_gain_norm(&self) -> f64 {
        self.gain_norms.iter().copied().fold(0.0, f64::max)
    }
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(cfg.canonical().as_bytes()))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    run_experiment_with(cfg, &InteriorPoint::default())
}

pub fn run_experiment_with(cfg: &ExperimentConfig, backend: &dyn SolverBackend) -> Result<RunResult> {
    let res = cfg.resolve()?;
    for w in &res.warnings {
        log::warn!("{}: {w}", cfg.name);
    }
    let Resolved {
        plant,
        disturbance,
        supervisor: sup_cfg,
        offline_a,
        offline_b,
        ..
    } = &res;
    let dyns = plant.dynamics();
    let (n_u, t) = (dyns.n_u(), sup_cfg.window);

    let offline_inputs = uniform_inputs(n_u, t, cfg.offline.input_amplitude, res.offline_inputs_seed);
    let (offline, st0) = open_loop_trajectory(offline_a, offline_b, disturbance, -(t as i64), &res.x0, &offline_inputs)?;
    let mut window = DataWindow::new(t, n_u, -(t as i64), res.x0.clone())?;
    for (i, s) in offline.iter().enumerate() {
        let next = offline.get(i + 1).map_or(&st0.x, |n| &n.x);
        window.push(s.u.clone(), next.clone())?;
    }
    let offline_triple = window.snapshot()?;
    let mut sup: SupervisorState = warm_start(&offline_triple, sup_cfg, backend)?;
    let warm = WarmStartInfo {
        gamma: sup.warm_start_gamma,
        gain: crate::numerics::to_rows(&sup.gain),
        w_sigma_min: rank_condition(&offline_triple).1,
    };

    let mut st = st0;
    let mut records = Vec::with_capacity(cfg.horizon + 1);
    let mut disturbances = Vec::with_capacity(cfg.horizon);
    let mut gain_norms = Vec::with_capacity(cfg.horizon);
    let mut dumps = Vec::new();
    for _ in 0..cfg.horizon {
        let k = st.k;
        let sigma_min = rank_condition(&window.snapshot()?).1;
        let decision = sup.control_step(&st.x, &window, backend)?;
        if decision.solved_sdp && cfg.output.dump_sdp {
            let data = SdpProblemData::from_triple(&window.snapshot()?, sup_cfg.alpha)?;
            dumps.push(SdpDump::robust(&data, Some(k)));
        }
        gain_norms.push(spectral_norm(&sup.gain));
        let (a, b) = dyns.matrices_at(k)?;
        let out = step_with(&a, &b, disturbance, &st, &decision.u)?;
        records.push(StepRecord {
            k,
            x: st.x.iter().copied().collect(),
            u: Some(decision.u.iter().copied().collect()),
            mode: dyns.regime_at(k)? + 1,
            phase: sup.log.last().map(|e| e.phase.clone()).unwrap_or_default(),
            aux_value: decision.aux_value,
            w_sigma_min: sigma_min,
            solved: decision.solved_sdp,
            feasible: decision.feasible,
            gamma: decision.gamma,
        });
        disturbances.push(out.disturbance.clone());
        window.push(decision.u.clone(), out.state.x.clone())?;
        st = out.state;
    }
    records.push(final_record(&st, &sup, &window, dyns.regime_at(st.k)? + 1)?);

    let excitation_windows = excitation_windows(&records);
    let metadata = RunMetadata {
        name: cfg.name.clone(),
        config_hash: config_hash(cfg),
        seed: cfg.seed,
        disturbance_seed: cfg.disturbance_seed(),
        offline_seed: cfg.offline_seed(),
        excitation_seed: cfg.excitation_seed(),
        window: t,
        n_excite: sup_cfg.n_excite,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let log = TrajectoryLog { metadata, records };

    let mut analysis_delta_x = cfg.analysis.delta_x.or(sup_cfg.delta_x);
    let (mut bounds, mut bounds_error) = (None, None);
    if cfg.analysis.bounds || analysis_delta_x.is_none() {
        match model_side_info(cfg, &res, &offline_inputs, backend) {
            Ok(info) => {
                let dx = *analysis_delta_x.get_or_insert_with(|| derived_delta_x(sup_cfg.delta_v, &info));
                if cfg.analysis.bounds {
                    let mut c = sup_cfg.clone();
                    c.delta_x = Some(dx);
                    match compute_lyapunov_family(&info).and_then(|fam| compute_bounds(&info, &fam, &c)) {
                        Ok(b) => bounds = Some(b),
                        Err(e) => bounds_error = Some(e.to_string()),
                    }
                }
            }
            Err(e) => bounds_error = Some(e.to_string()),
        }
    }
    let isps = match (cfg.analysis.isps, analysis_delta_x) {
        (true, Some(dx)) => Some(check_isps(&log.states(), disturbance.bound(), dx)?),
        _ => None,
    };
    let lemma5 = lemma5_timing_check(&sup.log, &dyns.switch_instants(), t);

    Ok(RunResult {
        config: cfg.clone(),
        warnings: res.warnings.clone(),
        offline_states: offline.iter().map(|s| s.x.clone()).collect(),
        log,
        events: sup.log.clone(),
        disturbances,
        gain_norms,
        excitation_windows,
        excitation_levels: sup.excitation_levels.clone(),
        warm_start: warm,
        analysis_delta_x,
        bounds,
        bounds_error,
        isps,
        lemma5,
        sdp_dumps: dumps,
    })
}

fn model_side_info(
    cfg: &ExperimentConfig,
    res: &Resolved,
    offline_inputs: &[Vector],
    backend: &dyn SolverBackend,
) -> Result<ModelSideInfo> {
    let opts = ModelSideOptions {
        eta2: cfg.analysis.eta2,
        beta: cfg.analysis.beta,
        rho_internal: cfg.analysis.rho,
        phi_const: cfg.analysis.phi,
    };
    let sys = res.plant.regimes()?;
    ModelSideInfo::from_model(&sys, offline_inputs, &res.x0, res.offline_mode, &opts, backend)
}

/// Bound report for a configuration without running the closed loop. The
/// ball radius falls back to [`derived_delta_x`] when none is configured.
pub fn config_bounds(cfg: &ExperimentConfig, backend: &dyn SolverBackend) -> Result<BoundReport> {
    let res = cfg.resolve()?;
    let n_u = res.plant.dynamics().n_u();
    let t = res.supervisor.window;
    let offline_inputs = uniform_inputs(n_u, t, cfg.offline.input_amplitude, res.offline_inputs_seed);
    let info = model_side_info(cfg, &res, &offline_inputs, backend)?;
    let mut c = res.supervisor.clone();
    c.delta_x = Some(
        cfg.analysis
            .delta_x
            .or(c.delta_x)
            .unwrap_or_else(|| derived_delta_x(c.delta_v, &info)),
    );
    compute_bounds(&info, &compute_lyapunov_family(&info)?, &c)
}

/// Radius of the largest ball inside every reachable `V <= delta_V` set:
/// `P <= gamma I` and `gamma <= eta2 max_i gamma_i` along the run.
pub fn derived_delta_x(delta_v: f64, info: &ModelSideInfo) -> f64 {
    let cost = info.gamma_bar.iter().map(|g| info.eta2 * g).fold(0.0, f64::max);
    (delta_v / cost).sqrt()
}

fn final_record(st: &PlantState, sup: &SupervisorState, window: &DataWindow, mode: usize) -> Result<StepRecord> {
    Ok(StepRecord {
        k: st.k,
        x: st.x.iter().copied().collect(),
        u: None,
        mode,
        phase: sup.phase.label().to_string(),
        aux_value: auxiliary_value(&st.x, &sup.p)?,
        w_sigma_min: rank_condition(&window.snapshot()?).1,
        solved: false,
        feasible: None,
        gamma: None,
    })
}

/// Maximal runs of `excite` rows; a run cut by the horizon is incomplete.
pub fn excitation_windows(records: &[StepRecord]) -> Vec<ExcitationWindow> {
    let mut out = Vec::new();
    let mut i = 0;
    let steps = records.iter().filter(|r| r.u.is_some()).count();
    while i < steps {
        if records[i].phase != "excite" {
            i += 1;
            continue;
        }
        let start = i;
        while i < steps && records[i].phase == "excite" {
            i += 1;
        }
        out.push(ExcitationWindow {
            start: records[start].k,
            length: i - start,
            complete: i < steps,
        });
    }
    out
}

/// Runs several configurations on separate threads. Results keep the input
/// order.
pub fn run_batch(cfgs: &[ExperimentConfig]) -> Vec<Result<RunResult>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = cfgs.iter().map(|c| s.spawn(move || run_experiment(c))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::InvalidArgument("run panicked".into()))))
            .collect()
    })
}
