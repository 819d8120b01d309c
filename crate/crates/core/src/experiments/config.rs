//! Declarative experiment description.
//!
//! Matrices are row-major nested arrays. Modes are numbered from 1 in the
//! file and from 0 everywhere else.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_window::compute_n;
use crate::error::{Error, Result};
use crate::numerics::{from_rows, Matrix, Vector};
use crate::plant::{
    make_fault_schedule, DisturbanceKind, DisturbanceModel, DwellCheck, FaultSchedule, FaultSpec, Mode,
    PlantDynamics, ScheduledSystem, SwitchedSystem, SwitchingSchedule,
};
use crate::supervisor::SupervisorConfig;
use crate::synthesis::SynthesisSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Root of every seed that is not given explicitly.
    #[serde(default)]
    pub seed: u64,
    pub horizon: usize,
    pub system: SystemSpec,
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default)]
    pub disturbance: DisturbanceSpec,
    pub supervisor: SupervisorSpec,
    pub offline: OfflineSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub analysis: AnalysisSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SystemSpec {
    Switched { modes: Vec<ModeSpec> },
    Fault { a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, fault: FaultSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub switch_times: Vec<usize>,
    pub modes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceKindSpec {
    Zero,
    #[default]
    UniformBall,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSpec {
    #[serde(default)]
    pub bound: f64,
    #[serde(default)]
    pub kind: DisturbanceKindSpec,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Sequence for `kind = "fixed"`, replayed from `k = 0`.
    #[serde(default)]
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisorSpec {
    pub lambda0: f64,
    pub delta_v: f64,
    pub delta_eps: f64,
    #[serde(default)]
    pub delta_x: Option<f64>,
    pub alpha: f64,
    /// Data window `T`; `2N - 1` when omitted.
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default)]
    pub excitation_seed: Option<u64>,
    #[serde(default)]
    pub pe_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineSpec {
    /// Mode driven during collection; ignored for fault systems, which use
    /// the nominal matrices.
    #[serde(default = "one")]
    pub mode: usize,
    pub input_amplitude: f64,
    pub x0: Vec<f64>,
    /// Must equal the window when given.
    #[serde(default)]
    pub length: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<String>,
    #[serde(default)]
    pub dump_sdp: bool,
    #[serde(default = "yes")]
    pub plots: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: None,
            dump_sdp: false,
            plots: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    #[serde(default = "yes")]
    pub bounds: bool,
    #[serde(default = "yes")]
    pub isps: bool,
    #[serde(default = "two")]
    pub eta2: f64,
    #[serde(default = "unit")]
    pub beta: f64,
    #[serde(default = "unit")]
    pub rho: f64,
    #[serde(default)]
    pub phi: Option<f64>,
    /// Ball radius for the analysis side; derived from `delta_V` when unset.
    #[serde(default)]
    pub delta_x: Option<f64>,
}

fn two() -> f64 {
    2.0
}

fn unit() -> f64 {
    1.0
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            bounds: true,
            isps: true,
            eta2: 2.0,
            beta: 1.0,
            rho: 1.0,
            phi: None,
            delta_x: None,
        }
    }
}

/// Ground-truth plant of an experiment.
#[derive(Debug, Clone)]
pub enum Plant {
    Switched(ScheduledSystem),
    Fault(FaultSchedule),
}

impl Plant {
    pub fn dynamics(&self) -> &dyn PlantDynamics {
        match self {
            Plant::Switched(s) => s,
            Plant::Fault(f) => f,
        }
    }

    /// Matrices used for offline collection.
    pub fn offline_matrices(&self, mode: usize) -> (Matrix, Matrix) {
        match self {
            Plant::Switched(s) => {
                let m = s.system.mode(mode);
                (m.a.clone(), m.b.clone())
            }
            Plant::Fault(f) => {
                let (a, b) = f.base();
                (a.clone(), b.clone())
            }
        }
    }

    /// The distinct regimes as a switched system, in order of appearance.
    pub fn regimes(&self) -> Result<SwitchedSystem> {
        match self {
            Plant::Switched(s) => Ok(s.system.clone()),
            Plant::Fault(f) => {
                let mut modes = Vec::new();
                for k in std::iter::once(0).chain(f.switch_instants()) {
                    let (a, b) = f.matrices_at(k as i64)?;
                    modes.push(Mode { a, b });
                }
                SwitchedSystem::new(modes)
            }
        }
    }
}

/// A validated configuration with every derived quantity filled in.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub plant: Plant,
    pub disturbance: DisturbanceModel,
    pub supervisor: SupervisorConfig,
    pub offline_mode: usize,
    pub offline_a: Matrix,
    pub offline_b: Matrix,
    pub offline_inputs_seed: u64,
    pub x0: Vector,
    pub warnings: Vec<String>,
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), format!("cannot read: {e}")))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let at = e
            .span()
            .map(|s| format!("byte {}", s.start))
            .unwrap_or_else(|| "document".into());
        Error::config(at, e.message().to_string())
    })?;
    cfg.resolve()?;
    Ok(cfg)
}

fn matrix(rows: &[Vec<f64>], path: &str) -> Result<Matrix> {
    from_rows(rows).map_err(|e| Error::config(path, e.to_string()))
}

fn sub_seed(root: u64, salt: u64) -> u64 {
    root.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

impl ExperimentConfig {
    /// Drops every explicit sub-seed so that all of them follow `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.disturbance.seed = None;
        self.offline.seed = None;
        self.supervisor.excitation_seed = None;
        self
    }

    pub fn disturbance_seed(&self) -> u64 {
        self.disturbance.seed.unwrap_or_else(|| sub_seed(self.seed, 1))
    }

    pub fn offline_seed(&self) -> u64 {
        self.offline.seed.unwrap_or_else(|| sub_seed(self.seed, 2))
    }

    pub fn excitation_seed(&self) -> u64 {
        self.supervisor.excitation_seed.unwrap_or_else(|| sub_seed(self.seed, 3))
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let mut warnings = Vec::new();
        let plant = match &self.system {
            SystemSpec::Switched { modes } => {
                if modes.is_empty() {
                    return Err(Error::config("system.modes", "at least one mode is required"));
                }
                let modes = modes
                    .iter()
                    .enumerate()
                    .map(|(i, m)| {
                        Ok(Mode {
                            a: matrix(&m.a, &format!("system.modes[{i}].a"))?,
                            b: matrix(&m.b, &format!("system.modes[{i}].b"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let sys = SwitchedSystem::new(modes).map_err(|e| Error::config("system.modes", e.to_string()))?;
                let schedule = match &self.schedule {
                    None => SwitchingSchedule::single(0),
                    Some(s) => {
                        if let Some(i) = s.modes.iter().position(|&m| m == 0 || m > sys.mode_count()) {
                            return Err(Error::config(
                                format!("schedule.modes[{i}]"),
                                format!("mode {} does not exist", s.modes[i]),
                            ));
                        }
                        SwitchingSchedule::new(s.switch_times.clone(), s.modes.iter().map(|m| m - 1).collect())
                            .map_err(|e| Error::config("schedule", e.to_string()))?
                    }
                };
                Plant::Switched(
                    ScheduledSystem::new(sys, schedule).map_err(|e| Error::config("schedule", e.to_string()))?,
                )
            }
            SystemSpec::Fault { a, b, fault } => {
                if self.schedule.is_some() {
                    return Err(Error::config("schedule", "fault systems take their regimes from system.fault"));
                }
                let a = matrix(a, "system.a")?;
                let b = matrix(b, "system.b")?;
                Plant::Fault(make_fault_schedule(&a, &b, fault).map_err(|e| Error::config("system.fault", e.to_string()))?)
            }
        };
        let dyns = plant.dynamics();
        let (n_x, n_u) = (dyns.n_x(), dyns.n_u());
        let (n, t_min) = compute_n(n_x, n_u);

        let s = &self.supervisor;
        let window = match s.window {
            None => t_min,
            Some(t) if t < t_min => {
                return Err(Error::config(
                    "supervisor.window",
                    format!("T = {t} is below 2N - 1 = {t_min}"),
                ));
            }
            Some(t) => t,
        };
        if self.horizon < window {
            return Err(Error::config(
                "horizon",
                format!("horizon {} is shorter than the window {window}", self.horizon),
            ));
        }
        let mut gaps: Vec<usize> = std::iter::once(0).chain(dyns.switch_instants()).collect();
        gaps.dedup();
        let tau = gaps.windows(2).map(|w| w[1] - w[0]).min();
        if let Some(tau) = tau {
            let check = if tau > window {
                DwellCheck::Satisfied
            } else if tau == window {
                DwellCheck::Boundary
            } else {
                DwellCheck::Violated
            };
            if check != DwellCheck::Satisfied {
                warnings.push(format!("dwell time {tau} does not exceed the window length {window}"));
            }
        }

        let supervisor = SupervisorConfig {
            lambda0: s.lambda0,
            delta_v: s.delta_v,
            delta_eps: s.delta_eps,
            delta_x: s.delta_x,
            alpha: s.alpha,
            n_excite: n,
            window,
            excitation_seed: self.excitation_seed(),
            pe_target: s.pe_target,
            synthesis: SynthesisSettings::default(),
        };
        supervisor
            .validate()
            .map_err(|e| Error::config("supervisor", e.to_string()))?;

        let d = &self.disturbance;
        let kind = match d.kind {
            DisturbanceKindSpec::Zero => DisturbanceKind::Zero,
            DisturbanceKindSpec::UniformBall => DisturbanceKind::UniformBall,
            DisturbanceKindSpec::Fixed => DisturbanceKind::FixedSequence(d.values.clone()),
        };
        let disturbance = DisturbanceModel::new(d.bound, kind, self.disturbance_seed(), n_x)
            .map_err(|e| Error::config("disturbance", e.to_string()))?;

        let o = &self.offline;
        if o.x0.len() != n_x {
            return Err(Error::config("offline.x0", format!("expected {n_x} entries, got {}", o.x0.len())));
        }
        if o.length.is_some_and(|l| l != window) {
            return Err(Error::config("offline.length", format!("must equal the window {window}")));
        }
        if !(o.input_amplitude > 0.0) {
            return Err(Error::config("offline.input_amplitude", "must be positive"));
        }
        let offline_mode = match &plant {
            Plant::Switched(sched) => {
                if o.mode == 0 || o.mode > sched.system.mode_count() {
                    return Err(Error::config("offline.mode", format!("mode {} does not exist", o.mode)));
                }
                o.mode - 1
            }
            Plant::Fault(_) => 0,
        };
        let (offline_a, offline_b) = plant.offline_matrices(offline_mode);
        let a = &self.analysis;
        if !(a.eta2 >= 1.0) {
            return Err(Error::config("analysis.eta2", "must be at least 1"));
        }
        if !(a.beta > 0.0) || !(a.rho > 0.0) || a.phi.is_some_and(|p| !(p > 0.0)) {
            return Err(Error::config("analysis", "beta, rho and phi must be positive"));
        }
        Ok(Resolved {
            plant,
            disturbance,
            supervisor,
            offline_mode,
            offline_a,
            offline_b,
            offline_inputs_seed: self.offline_seed(),
            x0: Vector::from_vec(o.x0.clone()),
            warnings,
        })
    }

    /// Canonical serialized form used for hashing.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
