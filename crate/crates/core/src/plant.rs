//! Ground-truth switched plant: mode set, switching schedule, bounded
//! disturbances, and the piecewise fault model used by the engine example.
//!
//! Nothing in here is visible to the controller path; the supervisor only
//! ever sees measured states and the inputs it applied.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{controllability_matrix, numerical_rank, Matrix, Vector};

/// One linear mode `(A_i, B_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub a: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchedSystem {
    modes: Vec<Mode>,
    n_x: usize,
    n_u: usize,
}

impl SwitchedSystem {
    /// Validates shapes and controllability of every mode.
    pub fn new(modes: Vec<Mode>) -> Result<Self> {
        let first = modes
            .first()
            .ok_or_else(|| Error::InvalidArgument("a switched system needs at least one mode".into()))?;
        let n_x = first.a.nrows();
        let n_u = first.b.ncols();
        if n_x == 0 || n_u == 0 {
            return Err(Error::dim("state and input dimensions must be positive"));
        }
        for (i, m) in modes.iter().enumerate() {
            if m.a.shape() != (n_x, n_x) {
                return Err(Error::dim(format!("A_{} must be {n_x}x{n_x}", i + 1)));
            }
            if m.b.shape() != (n_x, n_u) {
                return Err(Error::dim(format!("B_{} must be {n_x}x{n_u}", i + 1)));
            }
            crate::numerics::ensure_finite(&m.a, "A")?;
            crate::numerics::ensure_finite(&m.b, "B")?;
            if numerical_rank(&controllability_matrix(&m.a, &m.b)) < n_x {
                return Err(Error::Uncontrollable(i + 1));
            }
        }
        Ok(Self { modes, n_x, n_u })
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    /// Mode by zero-based index.
    pub fn mode(&self, i: usize) -> &Mode {
        &self.modes[i]
    }
}

/// Outcome of checking a schedule's dwell time against a window length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DwellCheck {
    Satisfied,
    /// `tau == T`: allowed, but only the non-strict version of the assumption holds.
    Boundary,
    Violated,
}

/// Piecewise-constant switching signal. Switch times are stored as
/// nonnegative time indices with the first equal to zero; modes are
/// zero-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingSchedule {
    switch_times: Vec<usize>,
    modes: Vec<usize>,
}

impl SwitchingSchedule {
    pub fn new(switch_times: Vec<usize>, modes: Vec<usize>) -> Result<Self> {
        if switch_times.is_empty() || switch_times.len() != modes.len() {
            return Err(Error::Schedule(
                "switch times and modes must be nonempty and of equal length".into(),
            ));
        }
        if switch_times[0] != 0 {
            return Err(Error::Schedule("the first segment must start at k = 0".into()));
        }
        if switch_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Schedule("switch times must be strictly increasing".into()));
        }
        if modes.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Schedule("consecutive segments must use distinct modes".into()));
        }
        Ok(Self { switch_times, modes })
    }

    pub fn single(mode: usize) -> Self {
        Self {
            switch_times: vec![0],
            modes: vec![mode],
        }
    }

    pub fn switch_times(&self) -> &[usize] {
        &self.switch_times
    }

    pub fn modes(&self) -> &[usize] {
        &self.modes
    }

    /// Minimum gap between consecutive switches; `None` for a single segment.
    pub fn dwell(&self) -> Option<usize> {
        self.switch_times.windows(2).map(|w| w[1] - w[0]).min()
    }

    pub fn check_dwell(&self, window: usize) -> DwellCheck {
        match self.dwell() {
            None => DwellCheck::Satisfied,
            Some(tau) if tau > window => DwellCheck::Satisfied,
            Some(tau) if tau == window => DwellCheck::Boundary,
            Some(_) => DwellCheck::Violated,
        }
    }

    /// Errors when `tau < T`; logs a warning on `tau == T`.
    pub fn validate_against_window(&self, window: usize) -> Result<DwellCheck> {
        let check = self.check_dwell(window);
        match check {
            DwellCheck::Violated => Err(Error::Schedule(format!(
                "dwell time {} is below the window length {window}",
                self.dwell().unwrap_or(0)
            ))),
            DwellCheck::Boundary => {
                log::warn!("dwell time equals the window length {window}; strict inequality fails");
                Ok(check)
            }
            DwellCheck::Satisfied => Ok(check),
        }
    }

    /// Index of the segment containing `k`.
    pub fn segment_at(&self, k: i64) -> Result<usize> {
        if k < 0 {
            return Err(Error::InvalidArgument(format!("time {k} precedes the schedule")));
        }
        let k = k as usize;
        Ok(self.switch_times.partition_point(|&s| s <= k) - 1)
    }

    /// Zero-based mode active at time `k`.
    pub fn active_mode(&self, k: i64) -> Result<usize> {
        Ok(self.modes[self.segment_at(k)?])
    }

    pub fn validate_modes(&self, mode_count: usize) -> Result<()> {
        match self.modes.iter().find(|&&m| m >= mode_count) {
            Some(m) => Err(Error::Schedule(format!(
                "mode {} does not exist (system has {mode_count})",
                m + 1
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceKind {
    Zero,
    UniformBall,
    /// Replays the stored vectors from `k = 0`; zero afterwards and at
    /// negative times.
    FixedSequence(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceModel {
    bound: f64,
    kind: DisturbanceKind,
    seed: u64,
    dim: usize,
}

impl DisturbanceModel {
    pub fn new(bound: f64, kind: DisturbanceKind, seed: u64, dim: usize) -> Result<Self> {
        if !(bound >= 0.0) || !bound.is_finite() {
            return Err(Error::InvalidArgument(format!("disturbance bound {bound} must be >= 0")));
        }
        if let DisturbanceKind::FixedSequence(seq) = &kind {
            for (k, d) in seq.iter().enumerate() {
                if d.len() != dim {
                    return Err(Error::dim(format!("disturbance d({k}) has length {}", d.len())));
                }
                let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > bound * (1.0 + 1e-12) {
                    return Err(Error::InvalidArgument(format!(
                        "disturbance d({k}) has norm {norm} above the bound {bound}"
                    )));
                }
            }
        }
        Ok(Self { bound, kind, seed, dim })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            bound: 0.0,
            kind: DisturbanceKind::Zero,
            seed: 0,
            dim,
        }
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn kind(&self) -> &DisturbanceKind {
        &self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `d(k)`, deterministic in `(seed, k)`.
    pub fn sample(&self, k: i64) -> Vector {
        if self.bound == 0.0 {
            return Vector::zeros(self.dim);
        }
        match &self.kind {
            DisturbanceKind::Zero => Vector::zeros(self.dim),
            DisturbanceKind::FixedSequence(seq) => usize::try_from(k)
                .ok()
                .and_then(|i| seq.get(i))
                .map_or_else(|| Vector::zeros(self.dim), |d| Vector::from_column_slice(d)),
            DisturbanceKind::UniformBall => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(k as u64);
                sample_ball(&mut rng, self.dim, self.bound)
            }
        }
    }
}

/// Uniform draw from the Euclidean ball of the given radius.
pub fn sample_ball<R: Rng>(rng: &mut R, dim: usize, radius: f64) -> Vector {
    loop {
        let g = Vector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = g.norm();
        if norm > 1e-12 {
            let r: f64 = rng.random::<f64>().powf(1.0 / dim as f64);
            return g * (radius * r / norm);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub k: i64,
    pub x: Vector,
}

/// Result of one plant step; the drawn disturbance is kept for analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: PlantState,
    pub disturbance: Vector,
}

/// Time-varying linear dynamics as seen by the simulator.
pub trait PlantDynamics {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    /// `(A(k), B(k))` effective at time `k >= 0`.
    fn matrices_at(&self, k: i64) -> Result<(Matrix, Matrix)>;
    /// Label of the regime active at time `k` (zero-based).
    fn regime_at(&self, k: i64) -> Result<usize>;
    /// Times at which the regime changes (excluding `k = 0`).
    fn switch_instants(&self) -> Vec<usize>;
}

/// A switched system bound to its schedule.
#[derive(Debug, Clone)]
pub struct ScheduledSystem {
    pub system: SwitchedSystem,
    pub schedule: SwitchingSchedule,
}

impl ScheduledSystem {
    pub fn new(system: SwitchedSystem, schedule: SwitchingSchedule) -> Result<Self> {
        schedule.validate_modes(system.mode_count())?;
        Ok(Self { system, schedule })
    }
}

impl PlantDynamics for ScheduledSystem {
    fn n_x(&self) -> usize {
        self.system.n_x()
    }

    fn n_u(&self) -> usize {
        self.system.n_u()
    }

    fn matrices_at(&self, k: i64) -> Result<(Matrix, Matrix)> {
        let m = self.system.mode(self.schedule.active_mode(k)?);
        Ok((m.a.clone(), m.b.clone()))
    }

    fn regime_at(&self, k: i64) -> Result<usize> {
        self.schedule.active_mode(k)
    }

    fn switch_instants(&self) -> Vec<usize> {
        self.schedule.switch_times()[1..].to_vec()
    }
}

/// One linear step `x+ = A x + B u + d` without any bookkeeping.
pub fn propagate(a: &Matrix, b: &Matrix, x: &Vector, u: &Vector, d: &Vector) -> Result<Vector> {
    if x.len() != a.ncols() || u.len() != b.ncols() || d.len() != a.nrows() {
        return Err(Error::dim(format!(
            "step with x of length {}, u of length {}, d of length {}",
            x.len(),
            u.len(),
            d.len()
        )));
    }
    Ok(a * x + b * u + d)
}

/// Advances the switched plant by one step.
pub fn step(
    sys: &SwitchedSystem,
    sched: &SwitchingSchedule,
    dist: &DisturbanceModel,
    st: &PlantState,
    u: &Vector,
) -> Result<StepOutcome> {
    let mode = if st.k < 0 {
        sched.modes()[0]
    } else {
        sched.active_mode(st.k)?
    };
    let m = sys.mode(mode);
    step_with(&m.a, &m.b, dist, st, u)
}

/// Advances a plant whose matrices are already resolved for time `st.k`.
pub fn step_with(
    a: &Matrix,
    b: &Matrix,
    dist: &DisturbanceModel,
    st: &PlantState,
    u: &Vector,
) -> Result<StepOutcome> {
    let d = dist.sample(st.k);
    let x = propagate(a, b, &st.x, u, &d)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("state diverged at k = {}", st.k + 1)));
    }
    Ok(StepOutcome {
        state: PlantState { k: st.k + 1, x },
        disturbance: d,
    })
}

/// Half-open time interval `[start, end)`; `end = None` means unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: usize,
    #[serde(default)]
    pub end: Option<usize>,
}

impl Interval {
    pub fn contains(&self, k: usize) -> bool {
        k >= self.start && self.end.is_none_or(|e| k < e)
    }

    fn overlaps(&self, other: &Interval) -> bool {
        let a_end = self.end.unwrap_or(usize::MAX);
        let b_end = other.end.unwrap_or(usize::MAX);
        self.start < b_end && other.start < a_end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSegment {
    #[serde(flatten)]
    pub during: Interval,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorSegment {
    #[serde(flatten)]
    pub during: Interval,
    /// Diagonal of the actuator effectiveness matrix.
    pub mask: Vec<f64>,
}

/// `A~(k) = A + beta(k) D`, `B~(k) = B alpha(k)`; times outside every
/// segment use `beta = 0` and `alpha = I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub direction: Vec<Vec<f64>>,
    #[serde(default)]
    pub beta: Vec<BetaSegment>,
    #[serde(default)]
    pub actuator: Vec<ActuatorSegment>,
}

#[derive(Debug, Clone)]
pub struct FaultSchedule {
    a: Matrix,
    b: Matrix,
    direction: Matrix,
    beta: Vec<BetaSegment>,
    actuator: Vec<ActuatorSegment>,
    breakpoints: Vec<usize>,
}

fn check_disjoint(intervals: &[&Interval], what: &str) -> Result<()> {
    for (i, a) in intervals.iter().enumerate() {
        if let Some(e) = a.end {
            if e <= a.start {
                return Err(Error::Schedule(format!("empty {what} interval starting at {}", a.start)));
            }
        }
        for b in &intervals[i + 1..] {
            if a.overlaps(b) {
                return Err(Error::Schedule(format!(
                    "overlapping {what} intervals starting at {} and {}",
                    a.start, b.start
                )));
            }
        }
    }
    Ok(())
}

pub fn make_fault_schedule(base_a: &Matrix, base_b: &Matrix, spec: &FaultSpec) -> Result<FaultSchedule> {
    let n_x = base_a.nrows();
    if !base_a.is_square() || base_b.nrows() != n_x {
        return Err(Error::dim("fault base matrices have inconsistent shapes"));
    }
    let direction = crate::numerics::from_rows(&spec.direction)?;
    if direction.shape() != (n_x, n_x) {
        return Err(Error::dim("fault direction D must match A"));
    }
    if spec.actuator.iter().any(|s| s.mask.len() != base_b.ncols()) {
        return Err(Error::dim("actuator mask length must equal the input dimension"));
    }
    check_disjoint(&spec.beta.iter().map(|s| &s.during).collect::<Vec<_>>(), "beta")?;
    check_disjoint(&spec.actuator.iter().map(|s| &s.during).collect::<Vec<_>>(), "actuator")?;

    let mut breakpoints: Vec<usize> = spec
        .beta
        .iter()
        .map(|s| &s.during)
        .chain(spec.actuator.iter().map(|s| &s.during))
        .flat_map(|iv| std::iter::once(iv.start).chain(iv.end))
        .filter(|&k| k > 0)
        .collect();
    breakpoints.sort_unstable();
    breakpoints.dedup();

    let mut sched = FaultSchedule {
        a: base_a.clone(),
        b: base_b.clone(),
        direction,
        beta: spec.beta.clone(),
        actuator: spec.actuator.clone(),
        breakpoints: Vec::new(),
    };
    // Keep only breakpoints where the effective matrices actually change.
    let mut real = Vec::new();
    for &k in &breakpoints {
        if sched.effective(k) != sched.effective(k - 1) {
            real.push(k);
        }
    }
    sched.breakpoints = real;
    Ok(sched)
}

impl FaultSchedule {
    pub fn beta_at(&self, k: usize) -> f64 {
        self.beta
            .iter()
            .find(|s| s.during.contains(k))
            .map_or(0.0, |s| s.value)
    }

    pub fn mask_at(&self, k: usize) -> Vector {
        self.actuator
            .iter()
            .find(|s| s.during.contains(k))
            .map_or_else(|| Vector::from_element(self.b.ncols(), 1.0), |s| Vector::from_column_slice(&s.mask))
    }

    fn effective(&self, k: usize) -> (Matrix, Matrix) {
        let a = &self.a + &self.direction * self.beta_at(k);
        let b = &self.b * Matrix::from_diagonal(&self.mask_at(k));
        (a, b)
    }

    pub fn base(&self) -> (&Matrix, &Matrix) {
        (&self.a, &self.b)
    }
}

impl PlantDynamics for FaultSchedule {
    fn n_x(&self) -> usize {
        self.a.nrows()
    }

    fn n_u(&self) -> usize {
        self.b.ncols()
    }

    fn matrices_at(&self, k: i64) -> Result<(Matrix, Matrix)> {
        if k < 0 {
            return Err(Error::InvalidArgument(format!("time {k} precedes the fault schedule")));
        }
        Ok(self.effective(k as usize))
    }

    fn regime_at(&self, k: i64) -> Result<usize> {
        if k < 0 {
            return Err(Error::InvalidArgument(format!("time {k} precedes the fault schedule")));
        }
        Ok(self.breakpoints.partition_point(|&b| b <= k as usize))
    }

    fn switch_instants(&self) -> Vec<usize> {
        self.breakpoints.clone()
    }
}

/// One recorded sample of an open-loop trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub k: i64,
    pub x: Vector,
    pub u: Vector,
    pub d: Vector,
}

/// Simulates `(a, b)` from `x_start` at time `k_start` under the given
/// inputs. Returns the samples and the final state.
pub fn open_loop_trajectory(
    a: &Matrix,
    b: &Matrix,
    dist: &DisturbanceModel,
    k_start: i64,
    x_start: &Vector,
    inputs: &[Vector],
) -> Result<(Vec<Sample>, PlantState)> {
    let mut st = PlantState {
        k: k_start,
        x: x_start.clone(),
    };
    let mut samples = Vec::with_capacity(inputs.len());
    for u in inputs {
        let out = step_with(a, b, dist, &st, u)?;
        samples.push(Sample {
            k: st.k,
            x: st.x.clone(),
            u: u.clone(),
            d: out.disturbance.clone(),
        });
        st = out.state;
    }
    Ok((samples, st))
}

/// Inputs drawn uniformly per component from `[-amplitude, amplitude]`.
pub fn uniform_inputs(n_u: usize, len: usize, amplitude: f64, seed: u64) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| Vector::from_fn(n_u, |_, _| rng.random_range(-amplitude..=amplitude)))
        .collect()
}
