//! Event-triggered switching controller.
//!
//! The supervisor watches `V(x(k)) = x(k)' P(k) x(k)`. A rise after a decay
//! (`StartKj`) opens an excitation window of `N` open-loop inputs; after it
//! the robust SDP is re-solved at every step until the value starts to decay
//! again (`EndKjSup`), after which the gain is held. Inside the `delta_V`
//! sublevel set the gain is frozen.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_window::{pe_level, DataTriple, DataWindow, PeCertificate};
use crate::error::{Error, Result};
use crate::numerics::{asymmetry, Matrix, Vector};
use crate::plant::sample_ball;
use crate::synthesis::{
    extract_gain, solve_robust_sdp_with, SdpProblemData, SdpStatus, SolverBackend, SynthesisSettings,
};

/// Redraws allowed when certifying an excitation sequence.
pub const EXCITATION_ATTEMPTS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisorConfig {
    pub lambda0: f64,
    pub delta_v: f64,
    pub delta_eps: f64,
    #[serde(default)]
    pub delta_x: Option<f64>,
    pub alpha: f64,
    /// Excitation window length `N`.
    pub n_excite: usize,
    /// Data window length `T`.
    pub window: usize,
    pub excitation_seed: u64,
    pub pe_target: f64,
    #[serde(default)]
    pub synthesis: SynthesisSettings,
}

impl SupervisorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lambda0 > 0.0 && self.lambda0 < 1.0) {
            return bad(format!("lambda0 = {} must lie in (0, 1)", self.lambda0));
        }
        if !(self.delta_v > 0.0) {
            return bad(format!("delta_V = {} must be positive", self.delta_v));
        }
        if !(self.delta_eps > 0.0) {
            return bad(format!("delta_eps = {} must be positive", self.delta_eps));
        }
        if self.delta_x.is_some_and(|d| !(d >= 0.0)) {
            return bad("delta_x must be nonnegative".into());
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha = {} must be positive", self.alpha));
        }
        if !(self.pe_target >= 0.0) {
            return bad(format!("pe_target = {} must be nonnegative", self.pe_target));
        }
        if self.n_excite == 0 || self.window + 1 < 2 * self.n_excite {
            return bad(format!(
                "window T = {} must be at least 2N - 1 with N = {}",
                self.window, self.n_excite
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Phase {
    Excite { remaining: usize },
    Solve,
    Hold,
    Dormant,
}

impl Phase {
    pub fn label(&self) -> &'static str {
        match self {
            Phase::Excite { .. } => "excite",
            Phase::Solve => "solve",
            Phase::Hold => "hold",
            Phase::Dormant => "dormant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    None,
    StartKj,
    EndKjSup,
    DormantEntry,
    /// Logged when leaving the dormant set; never returned by [`detect_event`].
    DormantExit,
}

/// Classifies the newest of up to three values `(v(k-2), v(k-1), v(k))`.
pub fn detect_event(v_hist: &[f64], cfg: &SupervisorConfig) -> Event {
    let Some(&v) = v_hist.last() else {
        return Event::None;
    };
    if v <= cfg.delta_v {
        return Event::DormantEntry;
    }
    if v_hist.len() < 3 {
        return Event::None;
    }
    let n = v_hist.len();
    let (v2, v1, v0) = (v_hist[n - 3], v_hist[n - 2], v);
    let l = cfg.lambda0;
    if v0 > l * v1 && v1 <= l * v2 {
        Event::StartKj
    } else if v1 > l * v2 && v0 <= l * v1 {
        Event::EndKjSup
    } else {
        Event::None
    }
}

pub fn auxiliary_value(x: &Vector, p: &Matrix) -> Result<f64> {
    if p.shape() != (x.len(), x.len()) {
        return Err(Error::dim(format!("V(x) with x of length {} and P {:?}", x.len(), p.shape())));
    }
    Ok(x.dot(&(p * x)))
}

/// Draws `len` vectors from the `delta_eps` ball and certifies them at
/// `order`; errors with the best level when `pe_target` is never reached.
pub fn generate_excitation(
    n_u: usize,
    len: usize,
    order: usize,
    delta_eps: f64,
    pe_target: f64,
    seed: u64,
) -> Result<(Vec<Vector>, PeCertificate)> {
    let (seq, cert) = best_excitation(n_u, len, order, delta_eps, pe_target, seed)?;
    if cert.level < pe_target {
        return Err(Error::Excitation {
            best: cert.level,
            target: pe_target,
        });
    }
    Ok((seq, cert))
}

fn best_excitation(
    n_u: usize,
    len: usize,
    order: usize,
    delta_eps: f64,
    pe_target: f64,
    seed: u64,
) -> Result<(Vec<Vector>, PeCertificate)> {
    if n_u == 0 || len == 0 || !(delta_eps > 0.0) {
        return Err(Error::InvalidArgument("excitation needs n_u, N and delta_eps positive".into()));
    }
    let order = order.clamp(1, len);
    let mut best: Option<(Vec<Vector>, PeCertificate)> = None;
    for attempt in 0..EXCITATION_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        let seq: Vec<Vector> = (0..len).map(|_| sample_ball(&mut rng, n_u, delta_eps)).collect();
        let cert = pe_level(&seq, order)?;
        let done = cert.level >= pe_target;
        if best.as_ref().is_none_or(|(_, b)| cert.level > b.level) {
            best = Some((seq, cert));
        }
        if done {
            break;
        }
    }
    Ok(best.expect("at least one attempt"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlDecision {
    pub u: Vector,
    pub solved_sdp: bool,
    /// Phase that produced `u`.
    pub phase: Phase,
    pub phase_after: Phase,
    pub aux_value: f64,
    pub event: Event,
    pub feasible: Option<bool>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub k: i64,
    pub phase: String,
    pub event: Event,
    pub solved_sdp: bool,
    pub feasible: Option<bool>,
    pub gamma: Option<f64>,
    pub aux_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisorState {
    pub cfg: SupervisorConfig,
    pub phase: Phase,
    pub k: i64,
    pub gain: Matrix,
    pub p: Matrix,
    pub q: Matrix,
    pub v_hist: VecDeque<f64>,
    pub log: Vec<LogEntry>,
    excitation: Vec<Vector>,
    excite_pos: usize,
    events_started: u64,
    pending_start: bool,
    /// Level reached by each excitation sequence, in order.
    pub excitation_levels: Vec<f64>,
    /// Optimal cost of the offline program.
    pub warm_start_gamma: f64,
}

/// Solves the offline program and returns a state in `Hold` that opens the
/// first excitation window at `k = 0`.
pub fn warm_start(offline: &DataTriple, cfg: &SupervisorConfig, backend: &dyn SolverBackend) -> Result<SupervisorState> {
    cfg.validate()?;
    if offline.len() != cfg.window {
        return Err(Error::WarmStart(format!(
            "offline data has {} samples, window is {}",
            offline.len(),
            cfg.window
        )));
    }
    let data = SdpProblemData::from_triple(offline, cfg.alpha)?;
    let sol = solve_robust_sdp_with(&data, backend, &cfg.synthesis)?;
    if sol.status != SdpStatus::Optimal {
        return Err(Error::WarmStart(format!(
            "offline SDP returned {:?} ({:?}), sigma_min(W) = {:.3e}",
            sol.status, sol.reason, sol.stats.rank_margin
        )));
    }
    let gain = extract_gain(&data.u_minus, &sol)?;
    Ok(SupervisorState {
        cfg: cfg.clone(),
        phase: Phase::Hold,
        k: 0,
        gain,
        p: sol.p,
        q: sol.q,
        v_hist: VecDeque::with_capacity(3),
        log: Vec::new(),
        excitation: Vec::new(),
        excite_pos: 0,
        events_started: 0,
        pending_start: true,
        excitation_levels: Vec::new(),
        warm_start_gamma: sol.gamma,
    })
}

impl SupervisorState {
    pub fn n_x(&self) -> usize {
        self.p.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.gain.nrows()
    }

    fn begin_excitation(&mut self) -> Vector {
        let seed = self
            .cfg
            .excitation_seed
            .wrapping_add(self.events_started.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.events_started += 1;
        let order = self.n_x() + 1;
        let (seq, cert) = best_excitation(
            self.n_u(),
            self.cfg.n_excite,
            order,
            self.cfg.delta_eps,
            self.cfg.pe_target,
            seed,
        )
        .expect("validated excitation parameters");
        if cert.level < self.cfg.pe_target {
            log::warn!(
                "excitation at k = {} reached level {:.3e} below target {:.3e}",
                self.k,
                cert.level,
                self.cfg.pe_target
            );
        }
        self.excitation_levels.push(cert.level);
        self.excitation = seq;
        self.excite_pos = 1;
        self.phase = if self.cfg.n_excite == 1 {
            Phase::Solve
        } else {
            Phase::Excite {
                remaining: self.cfg.n_excite - 1,
            }
        };
        self.excitation[0].clone()
    }

    fn in_ball(&self, x: &Vector, v: f64) -> bool {
        v <= self.cfg.delta_v || self.cfg.delta_x.is_some_and(|dx| x.norm() <= dx)
    }

    /// Advances the controller by one step at state `x = x(k)`; `window`
    /// must end at `x(k)`.
    pub fn control_step(&mut self, x: &Vector, window: &DataWindow, backend: &dyn SolverBackend) -> Result<ControlDecision> {
        if x.len() != self.n_x() {
            return Err(Error::dim(format!("state of length {} for n_x = {}", x.len(), self.n_x())));
        }
        if window.latest_state() != x {
            return Err(Error::InvalidArgument(format!(
                "window ends at a different state than x({})",
                self.k
            )));
        }
        let phase_now = self.phase;
        let v_prev = auxiliary_value(x, &self.p)?;
        let in_ball = self.in_ball(x, v_prev);
        let mut event = Event::None;
        let mut solved_sdp = false;
        let mut feasible = None;
        let mut gamma = None;
        let mut v = v_prev;

        let u = match self.phase {
            Phase::Excite { remaining } => {
                let u = self.excitation[self.excite_pos].clone();
                self.excite_pos += 1;
                self.phase = if remaining <= 1 {
                    Phase::Solve
                } else {
                    Phase::Excite { remaining: remaining - 1 }
                };
                u
            }
            _ if self.pending_start => {
                self.pending_start = false;
                if in_ball {
                    event = Event::DormantEntry;
                    self.phase = Phase::Dormant;
                    &self.gain * x
                } else {
                    event = Event::StartKj;
                    self.begin_excitation()
                }
            }
            Phase::Dormant => {
                if in_ball {
                    &self.gain * x
                } else {
                    event = Event::DormantExit;
                    let rising = self.v_hist.back().is_some_and(|&prev| v > self.cfg.lambda0 * prev);
                    if rising {
                        event = Event::StartKj;
                        self.begin_excitation()
                    } else {
                        self.phase = Phase::Hold;
                        &self.gain * x
                    }
                }
            }
            Phase::Hold | Phase::Solve if in_ball => {
                event = Event::DormantEntry;
                self.phase = Phase::Dormant;
                &self.gain * x
            }
            Phase::Hold => {
                event = self.classify(v);
                if event == Event::StartKj {
                    self.begin_excitation()
                } else {
                    &self.gain * x
                }
            }
            Phase::Solve => {
                if window.is_full() {
                    solved_sdp = true;
                    let data = SdpProblemData::from_triple(&window.snapshot()?, self.cfg.alpha)?;
                    match solve_robust_sdp_with(&data, backend, &self.cfg.synthesis) {
                        Ok(sol) if sol.status == SdpStatus::Optimal => {
                            self.gain = extract_gain(&data.u_minus, &sol)?;
                            debug_assert!(asymmetry(&sol.p) < 1e-9);
                            self.p = sol.p;
                            self.q = sol.q;
                            feasible = Some(true);
                            gamma = Some(sol.gamma);
                        }
                        Ok(sol) => {
                            log::info!("k = {}: SDP {:?}, holding previous gain", self.k, sol.status);
                            feasible = Some(false);
                        }
                        Err(e) => {
                            log::warn!("k = {}: synthesis error {e}, holding previous gain", self.k);
                            feasible = Some(false);
                        }
                    }
                    v = auxiliary_value(x, &self.p)?;
                }
                event = self.classify(v);
                match event {
                    Event::EndKjSup => self.phase = Phase::Hold,
                    Event::DormantEntry => self.phase = Phase::Dormant,
                    // A rise while solving does not reopen excitation.
                    _ => event = Event::None,
                }
                &self.gain * x
            }
        };

        if self.v_hist.len() == 3 {
            self.v_hist.pop_front();
        }
        self.v_hist.push_back(v);
        self.log.push(LogEntry {
            k: self.k,
            phase: phase_now_label(phase_now, event),
            event,
            solved_sdp,
            feasible,
            gamma,
            aux_value: v,
        });
        let decision = ControlDecision {
            u,
            solved_sdp,
            phase: phase_now,
            phase_after: self.phase,
            aux_value: v,
            event,
            feasible,
            gamma,
        };
        self.k += 1;
        Ok(decision)
    }

    fn classify(&self, v: f64) -> Event {
        let mut hist: Vec<f64> = self.v_hist.iter().copied().collect();
        hist.push(v);
        detect_event(&hist, &self.cfg)
    }

    /// Times `k_j` at which excitation windows opened.
    pub fn start_times(&self) -> Vec<i64> {
        event_times(&self.log, Event::StartKj)
    }

    /// Times `k^j` at which solving stopped.
    pub fn end_times(&self) -> Vec<i64> {
        event_times(&self.log, Event::EndKjSup)
    }

    pub fn event_log_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.log)?)
    }
}

/// Value-style wrapper around [`SupervisorState::control_step`].
pub fn control_step(
    st: &SupervisorState,
    x: &Vector,
    window: &DataWindow,
    backend: &dyn SolverBackend,
) -> Result<(ControlDecision, SupervisorState)> {
    let mut next = st.clone();
    let d = next.control_step(x, window, backend)?;
    Ok((d, next))
}

/// The phase label recorded for a step: the phase that produced the input.
fn phase_now_label(phase: Phase, event: Event) -> String {
    match (phase, event) {
        (_, Event::StartKj) => "excite".into(),
        _ => phase.label().into(),
    }
}

pub fn event_times(log: &[LogEntry], which: Event) -> Vec<i64> {
    log.iter().filter(|e| e.event == which).map(|e| e.k).collect()
}

/// Checks that starts and ends alternate with `k_j + N < k^j`; returns
/// human-readable violations.
pub fn event_order_violations(log: &[LogEntry], n_excite: usize) -> Vec<String> {
    let mut out = Vec::new();
    let mut open: Option<i64> = None;
    for e in log {
        match e.event {
            Event::StartKj => {
                if let Some(k) = open {
                    // A dormant stretch may close a window without an end event.
                    let dormant_between = log
                        .iter()
                        .any(|d| d.k > k && d.k < e.k && d.event == Event::DormantEntry);
                    if !dormant_between {
                        out.push(format!("start at {} while window from {k} is still open", e.k));
                    }
                }
                open = Some(e.k);
            }
            Event::EndKjSup => match open.take() {
                Some(k) if k + (n_excite as i64) < e.k => {}
                Some(k) => out.push(format!("end at {} too soon after start at {k}", e.k)),
                None => out.push(format!("end at {} without a start", e.k)),
            },
            _ => {}
        }
    }
    out
}
