//! The scalar two-window example: the same plant produces a data window of
//! full rank without disturbance and a rank-one window with it.

use serde::{Deserialize, Serialize};

use crate::data_window::{rank_condition, DataTriple};
use crate::error::{Error, Result};
use crate::numerics::{numerical_rank, to_rows, Matrix};
use crate::synthesis::{
    extract_gain, solve_robust_sdp, InfeasibilityReason, SdpProblemData, SdpStatus, SolverBackend,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemarkConfig {
    pub name: String,
    pub alpha: f64,
    pub windows: Vec<RemarkWindow>,
}

/// `inputs` are `u(0..T)`; `states` are `x(0..=T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemarkWindow {
    pub label: String,
    pub inputs: Vec<f64>,
    pub states: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemarkWindowReport {
    pub label: String,
    pub w: Vec<Vec<f64>>,
    pub rank: usize,
    pub sigma_min: f64,
    pub rank_condition: bool,
    pub status: SdpStatus,
    pub reason: Option<InfeasibilityReason>,
    /// Rank margin `sigma_min(W)` reported by the solver.
    pub rank_margin: f64,
    pub gamma: Option<f64>,
    pub gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemarkReport {
    pub name: String,
    pub windows: Vec<RemarkWindowReport>,
}

impl RemarkWindow {
    pub fn triple(&self) -> Result<DataTriple> {
        let t = self.inputs.len();
        if self.states.len() != t + 1 {
            return Err(Error::config(
                format!("windows.{}.states", self.label),
                format!("expected {} states for {t} inputs", t + 1),
            ));
        }
        DataTriple::new(
            Matrix::from_row_slice(1, t, &self.inputs),
            Matrix::from_row_slice(1, t, &self.states[..t]),
            Matrix::from_row_slice(1, t, &self.states[1..]),
        )
    }
}

pub fn parse_remark(text: &str) -> Result<RemarkConfig> {
    toml::from_str(text).map_err(|e| Error::config("remark", e.message().to_string()))
}

pub fn run_remark(cfg: &RemarkConfig, backend: &dyn SolverBackend) -> Result<RemarkReport> {
    let mut windows = Vec::new();
    for w in &cfg.windows {
        let t = w.triple()?;
        let wm = t.w();
        let (ok, sigma_min) = rank_condition(&t);
        let data = SdpProblemData::from_triple(&t, cfg.alpha)?;
        let sol = solve_robust_sdp(&data, backend)?;
        let gain = if sol.is_optimal() {
            Some(extract_gain(&data.u_minus, &sol)?[(0, 0)])
        } else {
            None
        };
        windows.push(RemarkWindowReport {
            label: w.label.clone(),
            w: to_rows(&wm),
            rank: numerical_rank(&wm),
            sigma_min,
            rank_condition: ok,
            status: sol.status,
            reason: sol.reason,
            rank_margin: sol.stats.rank_margin,
            gamma: sol.is_optimal().then_some(sol.gamma),
            gain,
        });
    }
    Ok(RemarkReport {
        name: cfg.name.clone(),
        windows,
    })
}
