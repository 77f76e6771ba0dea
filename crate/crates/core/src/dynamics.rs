//! Vector fields of the projected dynamics and a projected forward-Euler
//! integrator.
//!
//! Four systems share one state layout ([`PrimalDualState`]):
//!
//! * [`System::Networked`] – per-node power-limiting droop with duals `λ`
//!   scaled by `√k_I`; every node only reads its own injection.
//! * [`System::Droop`] – the same controller written with integrator states
//!   `μ = √k_I λ` and unscaled gains `k_I`.
//! * [`System::EdgePrimalDual`] – primal-dual gradient flow on the edge
//!   coordinates `η = V Bᵀ θ`.
//! * [`System::NodePrimalDual`] – primal-dual gradient flow of the
//!   `ρ`-augmented Lagrangian in nodal coordinates; its primal field multiplies
//!   everything by `L` and therefore needs neighbours' multipliers.
//!
//! Duals are integrated in clamp form, `λ ← max(0, λ + h v)`, with `v` the
//! unprojected rate. This agrees with the tangent-cone field to first order
//! and keeps every multiplier nonnegative exactly.

use std::io::Write;

use nalgebra::DVector;

use crate::error::{check_len, Error, Result};
use crate::problem::FlowProblem;

/// Abort once the state norm exceeds this.
pub const DIVERGENCE_NORM: f64 = 1e9;
pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_RHO: f64 = 1.0;
/// Settling: maximum frequency spread over the tail window (pu).
pub const SPREAD_TOL: f64 = 1e-4;
/// Settling: maximum drift of the mean frequency over the tail (pu per second).
pub const DRIFT_TOL: f64 = 1e-6;
pub const DEFAULT_TAIL_FRACTION: f64 = 0.2;

/// Projection of `v` onto the tangent cone of `ℝ_{≥0}` at `x`.
///
/// # Panics
/// If `x < 0`; the point must lie in the cone.
pub fn tangent_project(x: f64, v: f64) -> f64 {
    assert!(x >= 0.0, "tangent_project requires x >= 0, got {x}");
    if x > 0.0 {
        v
    } else {
        v.max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum System {
    Networked,
    Droop,
    EdgePrimalDual,
    NodePrimalDual { rho: f64 },
}

impl System {
    pub fn is_edge(&self) -> bool {
        matches!(self, System::EdgePrimalDual)
    }

    fn primal_len(&self, p: &FlowProblem) -> usize {
        if self.is_edge() {
            p.transform().edge_count()
        } else {
            p.n()
        }
    }

    /// Converts this system's dual variables to the `√k_I`-scaled multipliers
    /// used by the KKT residuals.
    pub fn kkt_duals(&self, p: &FlowProblem, s: &PrimalDualState) -> (DVector<f64>, DVector<f64>) {
        match self {
            System::Networked | System::EdgePrimalDual => (s.lambda_lo.clone(), s.lambda_hi.clone()),
            System::Droop | System::NodePrimalDual { .. } => (
                s.lambda_lo.component_div(p.sqrt_k_i()),
                s.lambda_hi.component_div(p.sqrt_k_i()),
            ),
        }
    }
}

/// Primal variables (`θ` or `η`) and nonnegative lower/upper multipliers.
///
/// For [`System::Droop`] the multiplier fields hold `μ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualState {
    pub primal: DVector<f64>,
    pub lambda_lo: DVector<f64>,
    pub lambda_hi: DVector<f64>,
}

impl PrimalDualState {
    pub fn new(primal: DVector<f64>, lambda_lo: DVector<f64>, lambda_hi: DVector<f64>) -> Self {
        Self {
            primal,
            lambda_lo,
            lambda_hi,
        }
    }

    pub fn zeros(primal_len: usize, n: usize) -> Self {
        Self::new(DVector::zeros(primal_len), DVector::zeros(n), DVector::zeros(n))
    }

    pub fn norm(&self) -> f64 {
        (self.primal.norm_squared() + self.lambda_lo.norm_squared() + self.lambda_hi.norm_squared()).sqrt()
    }

    fn is_finite(&self) -> bool {
        self.primal
            .iter()
            .chain(self.lambda_lo.iter())
            .chain(self.lambda_hi.iter())
            .all(|x| x.is_finite())
    }

    fn min_dual(&self) -> f64 {
        self.lambda_lo
            .iter()
            .chain(self.lambda_hi.iter())
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Maps a nodal state to edge coordinates, keeping the multipliers.
    pub fn to_edge(&self, p: &FlowProblem) -> Result<Self> {
        Ok(Self::new(
            p.transform().to_edge_coords(&self.primal)?,
            self.lambda_lo.clone(),
            self.lambda_hi.clone(),
        ))
    }
}

/// Time derivative of a [`PrimalDualState`] with projected dual rates.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivative {
    pub primal: DVector<f64>,
    pub lambda_lo: DVector<f64>,
    pub lambda_hi: DVector<f64>,
}

/// Scratch buffers for one evaluation of a vector field.
#[derive(Debug, Clone)]
struct Rates {
    injections: DVector<f64>,
    /// Nodal field: `dθ/dt` for nodal systems, `f(BVη, λ)` for the edge system.
    omega: DVector<f64>,
    primal: DVector<f64>,
    /// Unprojected dual rates.
    dual_lo: DVector<f64>,
    dual_hi: DVector<f64>,
    scratch: DVector<f64>,
}

impl Rates {
    fn new(primal_len: usize, n: usize) -> Self {
        Self {
            injections: DVector::zeros(n),
            omega: DVector::zeros(n),
            primal: DVector::zeros(primal_len),
            dual_lo: DVector::zeros(n),
            dual_hi: DVector::zeros(n),
            scratch: DVector::zeros(n),
        }
    }
}

fn check_state(system: System, p: &FlowProblem, s: &PrimalDualState) -> Result<()> {
    check_len("primal", system.primal_len(p), s.primal.len())?;
    check_len("lambda_lo", p.n(), s.lambda_lo.len())?;
    check_len("lambda_hi", p.n(), s.lambda_hi.len())
}

fn evaluate(system: System, p: &FlowProblem, s: &PrimalDualState, r: &mut Rates) {
    let t = p.transform();
    if system.is_edge() {
        r.injections.gemv_tr(1.0, t.edge_map(), &s.primal, 0.0);
    } else {
        r.injections.gemv(1.0, t.laplacian(), &s.primal, 0.0);
    }
    r.injections += p.p_load();

    let (star, lo, hi, m, kp, ki, ski) = (
        p.p_star(),
        p.p_lo(),
        p.p_hi(),
        p.m(),
        p.k_p(),
        p.k_i(),
        p.sqrt_k_i(),
    );
    match system {
        System::Networked | System::EdgePrimalDual | System::Droop => {
            let droop = matches!(system, System::Droop);
            for i in 0..p.n() {
                let pi = r.injections[i];
                let dual = s.lambda_hi[i] - s.lambda_lo[i];
                let dual_term = if droop { dual } else { ski[i] * dual };
                r.omega[i] = m[i] * (star[i] - pi) - kp[i] * (pi - hi[i]).max(0.0)
                    + kp[i] * (lo[i] - pi).max(0.0)
                    - dual_term;
                let gain = if droop { ki[i] } else { ski[i] };
                r.dual_lo[i] = gain * (lo[i] - pi);
                r.dual_hi[i] = gain * (pi - hi[i]);
            }
            if system.is_edge() {
                r.primal.gemv(1.0, t.edge_map(), &r.omega, 0.0);
            } else {
                r.primal.copy_from(&r.omega);
            }
        }
        System::NodePrimalDual { rho } => {
            for i in 0..p.n() {
                let pi = r.injections[i];
                r.scratch[i] = m[i] * (pi - star[i]) + rho * (pi - hi[i]).max(0.0) + s.lambda_hi[i]
                    - rho * (lo[i] - pi).max(0.0)
                    - s.lambda_lo[i];
                r.dual_lo[i] = lo[i] - pi;
                r.dual_hi[i] = pi - hi[i];
            }
            r.primal.gemv(-1.0, t.laplacian(), &r.scratch, 0.0);
            r.omega.copy_from(&r.primal);
        }
    }
}

/// Evaluates the vector field of `system` at `s` with tangent-cone projected
/// dual rates.
pub fn rhs(system: System, p: &FlowProblem, s: &PrimalDualState) -> Result<Derivative> {
    check_state(system, p, s)?;
    if s.min_dual() < 0.0 {
        return Err(Error::Validation("dual variables must be nonnegative".into()));
    }
    let mut r = Rates::new(system.primal_len(p), p.n());
    evaluate(system, p, s, &mut r);
    let project = |x: &DVector<f64>, v: &DVector<f64>| x.zip_map(v, tangent_project);
    Ok(Derivative {
        primal: r.primal,
        lambda_lo: project(&s.lambda_lo, &r.dual_lo),
        lambda_hi: project(&s.lambda_hi, &r.dual_hi),
    })
}

pub fn networked_rhs(p: &FlowProblem, s: &PrimalDualState) -> Result<Derivative> {
    rhs(System::Networked, p, s)
}

pub fn droop_rhs(p: &FlowProblem, s: &PrimalDualState) -> Result<Derivative> {
    rhs(System::Droop, p, s)
}

pub fn edge_pd_rhs(p: &FlowProblem, s: &PrimalDualState) -> Result<Derivative> {
    rhs(System::EdgePrimalDual, p, s)
}

pub fn node_pd_rhs(p: &FlowProblem, s: &PrimalDualState, rho: f64) -> Result<Derivative> {
    if !(rho >= 0.0) {
        return Err(Error::Validation(format!("rho must be nonnegative, got {rho}")));
    }
    rhs(System::NodePrimalDual { rho }, p, s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationOptions {
    /// Step size (s).
    pub h: f64,
    /// Horizon (s).
    pub t_end: f64,
    /// Record every k-th step.
    pub sample_every: usize,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        Self {
            h: DEFAULT_STEP,
            t_end: 10.0,
            sample_every: 100,
        }
    }
}

impl IntegrationOptions {
    fn steps(&self) -> Result<usize> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::Validation(format!("step size must be positive, got {}", self.h)));
        }
        if !(self.t_end >= 0.0) {
            return Err(Error::Validation(format!("horizon must be nonnegative, got {}", self.t_end)));
        }
        if self.sample_every == 0 {
            return Err(Error::Validation("sample_every must be at least 1".into()));
        }
        Ok((self.t_end / self.h).round() as usize)
    }
}

/// Sampled output of an integration run.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PrimalDualState>,
    /// Nodal frequency deviation `ω` (the nodal primal field) per sample.
    pub omega: Vec<DVector<f64>>,
    pub injections: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> Option<&PrimalDualState> {
        self.states.last()
    }

    /// Appends `other`, shifting its times by `offset`. A leading sample that
    /// coincides with the current last time is dropped.
    pub fn append(&mut self, other: Trajectory, offset: f64) {
        let last = self.times.last().copied();
        for (k, t) in other.times.into_iter().enumerate() {
            let t = t + offset;
            if k == 0 && last.is_some_and(|l| t <= l) {
                continue;
            }
            self.times.push(t);
            self.states.push(other.states[k].clone());
            self.omega.push(other.omega[k].clone());
            self.injections.push(other.injections[k].clone());
        }
    }

    /// Writes the wide CSV: `t, <primal>_k…, omega_i…, P_i…, lam_lo_i…, lam_hi_i…`.
    ///
    /// `primal_name` is `theta` for nodal runs and `eta` for edge runs.
    pub fn write_csv<W: Write>(&self, mut w: W, primal_name: &str) -> Result<()> {
        let Some(first) = self.states.first() else {
            writeln!(w, "t")?;
            return Ok(());
        };
        let (np, n) = (first.primal.len(), first.lambda_lo.len());
        let mut header = vec!["t".to_string()];
        header.extend((0..np).map(|k| format!("{primal_name}_{k}")));
        for prefix in ["omega", "P", "lam_lo", "lam_hi"] {
            header.extend((0..n).map(|i| format!("{prefix}_{i}")));
        }
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            let s = &self.states[k];
            let row: Vec<String> = std::iter::once(self.times[k])
                .chain(s.primal.iter().copied())
                .chain(self.omega[k].iter().copied())
                .chain(self.injections[k].iter().copied())
                .chain(s.lambda_lo.iter().copied())
                .chain(s.lambda_hi.iter().copied())
                .map(fmt_sig12)
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Writes the long CSV `t,series,value` for plotting tools.
    pub fn write_long_csv<W: Write>(&self, mut w: W, primal_name: &str) -> Result<()> {
        writeln!(w, "t,series,value")?;
        for k in 0..self.len() {
            let t = fmt_sig12(self.times[k]);
            let s = &self.states[k];
            let groups: [(&str, &DVector<f64>); 5] = [
                (primal_name, &s.primal),
                ("omega", &self.omega[k]),
                ("P", &self.injections[k]),
                ("lam_lo", &s.lambda_lo),
                ("lam_hi", &s.lambda_hi),
            ];
            for (name, v) in groups {
                for (i, x) in v.iter().enumerate() {
                    writeln!(w, "{t},{name}_{i},{}", fmt_sig12(*x))?;
                }
            }
        }
        Ok(())
    }
}

/// Scientific notation with 12 significant digits.
pub fn fmt_sig12(x: f64) -> String {
    format!("{x:.11e}")
}

/// Stepwise projected forward-Euler integration of one system.
#[derive(Debug, Clone)]
pub struct Integrator<'a> {
    system: System,
    problem: &'a FlowProblem,
    state: PrimalDualState,
    h: f64,
    step: usize,
    rates: Rates,
}

impl<'a> Integrator<'a> {
    pub fn new(system: System, problem: &'a FlowProblem, s0: PrimalDualState, h: f64) -> Result<Self> {
        check_state(system, problem, &s0)?;
        if s0.min_dual() < 0.0 {
            return Err(Error::Validation("initial dual variables must be nonnegative".into()));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Validation(format!("step size must be positive, got {h}")));
        }
        if let System::NodePrimalDual { rho } = system {
            if !(rho >= 0.0) {
                return Err(Error::Validation(format!("rho must be nonnegative, got {rho}")));
            }
        }
        let mut rates = Rates::new(system.primal_len(problem), problem.n());
        evaluate(system, problem, &s0, &mut rates);
        Ok(Self {
            system,
            problem,
            state: s0,
            h,
            step: 0,
            rates,
        })
    }

    pub fn state(&self) -> &PrimalDualState {
        &self.state
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.h
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Nodal frequency at the current state.
    pub fn omega(&self) -> &DVector<f64> {
        &self.rates.omega
    }

    pub fn injections(&self) -> &DVector<f64> {
        &self.rates.injections
    }

    pub fn step(&mut self) -> Result<()> {
        let h = self.h;
        let s = &mut self.state;
        s.primal.axpy(h, &self.rates.primal, 1.0);
        for (x, v) in s.lambda_lo.iter_mut().zip(self.rates.dual_lo.iter()) {
            *x = (*x + h * v).max(0.0);
        }
        for (x, v) in s.lambda_hi.iter_mut().zip(self.rates.dual_hi.iter()) {
            *x = (*x + h * v).max(0.0);
        }
        self.step += 1;
        let norm = s.norm();
        if !s.is_finite() || norm > DIVERGENCE_NORM {
            return Err(Error::Divergence {
                step: self.step,
                time: self.time(),
            });
        }
        evaluate(self.system, self.problem, &self.state, &mut self.rates);
        Ok(())
    }

    fn record(&self, traj: &mut Trajectory) {
        traj.times.push(self.time());
        traj.states.push(self.state.clone());
        traj.omega.push(self.rates.omega.clone());
        traj.injections.push(self.rates.injections.clone());
    }

    pub fn into_state(self) -> PrimalDualState {
        self.state
    }
}

/// Integrates `system` from `s0` over `[0, t_end]`, sampling every
/// `sample_every` steps plus the final step.
pub fn integrate(
    system: System,
    p: &FlowProblem,
    s0: PrimalDualState,
    opts: IntegrationOptions,
) -> Result<Trajectory> {
    let steps = opts.steps()?;
    let mut it = Integrator::new(system, p, s0, opts.h)?;
    let mut traj = Trajectory::default();
    it.record(&mut traj);
    for k in 1..=steps {
        it.step()?;
        if k % opts.sample_every == 0 || k == steps {
            it.record(&mut traj);
        }
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SettleOptions {
    /// Simulated time between settling checks (s).
    pub check_every: f64,
    /// Maximum KKT residual of the current state.
    pub kkt_tol: f64,
    pub tail_fraction: f64,
    /// Do not stop before this time (s).
    pub min_time: f64,
}

impl Default for SettleOptions {
    fn default() -> Self {
        Self {
            check_every: 1.0,
            kkt_tol: 1e-7,
            tail_fraction: DEFAULT_TAIL_FRACTION,
            min_time: 5.0,
        }
    }
}

/// KKT residual of a state of `system`, evaluated in its own coordinates.
pub fn state_kkt(system: System, p: &FlowProblem, s: &PrimalDualState) -> Result<crate::problem::KktPoint> {
    let (lo, hi) = system.kkt_duals(p, s);
    if system.is_edge() {
        p.kkt_residual_edge(&s.primal, &lo, &hi)
    } else {
        p.kkt_residual_nodal(&s.primal, &lo, &hi)
    }
}

/// Integrates until the trajectory has settled (see [`sync_metrics`]) and the
/// current state is a KKT point within `settle.kkt_tol`, or `opts.t_end` is
/// reached.
pub fn integrate_until_settled(
    system: System,
    p: &FlowProblem,
    s0: PrimalDualState,
    opts: IntegrationOptions,
    settle: SettleOptions,
) -> Result<Trajectory> {
    let steps = opts.steps()?;
    let check_steps = ((settle.check_every / opts.h).round() as usize).max(1);
    let mut it = Integrator::new(system, p, s0, opts.h)?;
    let mut traj = Trajectory::default();
    it.record(&mut traj);
    for k in 1..=steps {
        it.step()?;
        let sampled = k % opts.sample_every == 0 || k == steps;
        if sampled {
            it.record(&mut traj);
        }
        if sampled && k % check_steps == 0 && it.time() >= settle.min_time {
            let metrics = sync_metrics(&traj, settle.tail_fraction);
            if metrics.settled && state_kkt(system, p, it.state())?.residuals.max() < settle.kkt_tol {
                break;
            }
        }
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncMetrics {
    /// Mean of all `ω_i` over the tail window.
    pub omega_s_estimate: f64,
    /// Largest `max_i ω_i − min_i ω_i` over the tail window.
    pub max_spread: f64,
    /// Change of the mean frequency across the tail window per second.
    pub mean_drift: f64,
    pub settled: bool,
}

/// Synchronisation metrics over the last `tail_fraction` of the time span.
///
/// # Panics
/// If the trajectory is empty.
pub fn sync_metrics(traj: &Trajectory, tail_fraction: f64) -> SyncMetrics {
    assert!(!traj.is_empty(), "sync_metrics needs at least one sample");
    let (t0, t1) = (traj.times[0], *traj.times.last().unwrap());
    let start_time = t1 - tail_fraction.clamp(0.0, 1.0) * (t1 - t0);
    let start = traj.times.partition_point(|&t| t < start_time).min(traj.len() - 1);
    let tail = &traj.omega[start..];
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut spread: f64 = 0.0;
    for w in tail {
        sum += w.sum();
        count += w.len();
        spread = spread.max(w.max() - w.min());
    }
    let dt = t1 - traj.times[start];
    let drift = if dt > 0.0 {
        (traj.omega[traj.len() - 1].mean() - traj.omega[start].mean()).abs() / dt
    } else {
        0.0
    };
    SyncMetrics {
        omega_s_estimate: sum / count as f64,
        max_spread: spread,
        mean_drift: drift,
        settled: spread < SPREAD_TOL && drift < DRIFT_TOL,
    }
}
