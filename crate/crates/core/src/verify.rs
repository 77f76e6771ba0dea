//! Randomized property harness.
//!
//! Each property draws its own instances from a generator seeded by
//! `(seed, property, trial)`, so results do not depend on scheduling and
//! trials run in parallel.

use std::fmt;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::analysis::{self, DispatchCase};
use crate::dynamics::{
    self, IntegrationOptions, Integrator, PrimalDualState, SettleOptions, System, DEFAULT_STEP,
    SPREAD_TOL,
};
use crate::oracle::{self, OracleSolution};
use crate::problem::{FlowProblem, ACTIVE_TOL};
use crate::random::{self, InstanceConfig, InstanceRng};

/// Oracle KKT acceptance on random instances.
pub const ORACLE_KKT_TOL: f64 = 1e-8;
/// Final KKT residual of converged dynamics.
pub const CONVERGED_KKT_TOL: f64 = 1e-4;
/// Slack on the limits for final injections.
pub const LIMIT_SLACK: f64 = 1e-5;
/// `|ω̂ − ω_pred|` bound (pu).
pub const OMEGA_TOL: f64 = 1e-3;
/// Horizon of the convergence runs (s).
pub const CONVERGENCE_HORIZON: f64 = 500.0;
/// Horizon of the trajectory comparison runs (s).
pub const COMPARISON_HORIZON: f64 = 20.0;
pub const COINCIDENCE_TOL: f64 = 1e-6;
pub const KERNEL_TOL: f64 = 1e-8;
pub const RADIAL_TOL: f64 = 1e-4;
pub const DROOP_TOL: f64 = 1e-8;
/// Estimated frequencies below this magnitude count as zero for sign checks.
pub const SIGN_DEADBAND: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Property {
    OracleKkt,
    DynamicsConvergence,
    Synchronization,
    Trichotomy,
    CoincidingFields,
    KernelConservation,
    RadialUniqueness,
    DroopEquivalence,
    ShiftInvariance,
    CrossCoordinates,
    GraphIndependence,
}

impl Property {
    pub const ALL: [Property; 11] = [
        Property::OracleKkt,
        Property::DynamicsConvergence,
        Property::Synchronization,
        Property::Trichotomy,
        Property::CoincidingFields,
        Property::KernelConservation,
        Property::RadialUniqueness,
        Property::DroopEquivalence,
        Property::ShiftInvariance,
        Property::CrossCoordinates,
        Property::GraphIndependence,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Property::OracleKkt => "oracle_kkt",
            Property::DynamicsConvergence => "dynamics_convergence",
            Property::Synchronization => "synchronization",
            Property::Trichotomy => "trichotomy",
            Property::CoincidingFields => "coinciding_fields",
            Property::KernelConservation => "kernel_conservation",
            Property::RadialUniqueness => "radial_uniqueness",
            Property::DroopEquivalence => "droop_equivalence",
            Property::ShiftInvariance => "shift_invariance",
            Property::CrossCoordinates => "cross_coordinates",
            Property::GraphIndependence => "graph_independence",
        }
    }

    fn config(&self) -> InstanceConfig {
        match self {
            Property::KernelConservation => InstanceConfig::cyclic(),
            Property::RadialUniqueness => InstanceConfig::trees(),
            _ => InstanceConfig::default(),
        }
    }

    fn index(&self) -> u64 {
        Property::ALL.iter().position(|p| p == self).unwrap() as u64
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Test hooks applied to every trial.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Hooks {
    /// Shift the oracle multiplier and injections, breaking its agreement with
    /// the dynamics.
    pub corrupt_oracle: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub trials: usize,
    pub seed: u64,
    pub hooks: Hooks,
}

#[derive(Debug, Clone)]
pub struct PropertyReport {
    pub property: Property,
    pub trials: usize,
    pub failures: usize,
    /// Message of the lowest-index failing trial.
    pub first_failure: Option<(usize, String)>,
}

impl PropertyReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub seed: u64,
    pub properties: Vec<PropertyReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(PropertyReport::passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.properties {
            let status = if r.passed() { "PASS" } else { "FAIL" };
            write!(f, "{status} {:<22} {}/{} trials", r.property.name(), r.trials - r.failures, r.trials)?;
            if let Some((k, msg)) = &r.first_failure {
                write!(f, "  first failure (trial {k}): {msg}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Generator for one trial of one property.
pub fn trial_rng(seed: u64, property: Property, trial: usize) -> InstanceRng {
    let mix = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(property.index().wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(trial as u64);
    random::rng(mix)
}

pub fn run_suite(opts: &VerifyOptions) -> SuiteReport {
    let properties = Property::ALL
        .iter()
        .map(|&prop| run_property(prop, opts))
        .collect();
    SuiteReport {
        seed: opts.seed,
        properties,
    }
}

pub fn run_property(prop: Property, opts: &VerifyOptions) -> PropertyReport {
    let outcomes: Vec<Result<(), String>> = (0..opts.trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = trial_rng(opts.seed, prop, k);
            check(prop, &mut rng, opts.hooks)
        })
        .collect();
    let failures = outcomes.iter().filter(|o| o.is_err()).count();
    let first_failure = outcomes
        .into_iter()
        .enumerate()
        .find_map(|(k, o)| o.err().map(|m| (k, m)));
    PropertyReport {
        property: prop,
        trials: opts.trials,
        failures,
        first_failure,
    }
}

/// Draws an instance for `prop` and checks it.
pub fn check(prop: Property, rng: &mut InstanceRng, hooks: Hooks) -> Result<(), String> {
    let p = random::random_problem(rng, &prop.config());
    match prop {
        Property::OracleKkt => check_oracle_kkt(&p),
        Property::DynamicsConvergence => check_convergence(&p),
        Property::Synchronization => check_synchronization(&p, hooks),
        Property::Trichotomy => check_trichotomy(&p),
        Property::CoincidingFields => {
            let s0 = random_state(rng, p.n());
            check_coinciding_fields(&p, &s0, DEFAULT_STEP).map(|_| ())
        }
        Property::KernelConservation => {
            let s0 = random_state(rng, p.n());
            check_kernel_conservation(&p, &s0)
        }
        Property::RadialUniqueness => {
            let a = random_state(rng, p.n());
            let b = random_state(rng, p.n());
            check_radial_uniqueness(&p, &a, &b)
        }
        Property::DroopEquivalence => {
            let s0 = random_state(rng, p.n());
            check_droop_equivalence(&p, &s0)
        }
        Property::ShiftInvariance => {
            let s0 = random_state(rng, p.n());
            let c = rng.gen_range(-5.0..5.0);
            check_shift_invariance(&p, &s0, c)
        }
        Property::CrossCoordinates => check_cross_coordinates(&p, rng),
        Property::GraphIndependence => {
            let g = random::random_graph(rng, p.n(), false, false);
            check_graph_independence(&p, &p.with_graph(g).map_err(|e| e.to_string())?)
        }
    }
}

pub fn random_state<R: Rng>(rng: &mut R, n: usize) -> PrimalDualState {
    let (theta, lo, hi) = random::random_initial(rng, n);
    PrimalDualState::new(theta, lo, hi)
}

fn oracle_with_hooks(p: &FlowProblem, hooks: Hooks) -> Result<OracleSolution, String> {
    let mut sol = oracle::solve(p, ORACLE_KKT_TOL).map_err(|e| e.to_string())?;
    if hooks.corrupt_oracle {
        sol.nu += 0.1;
        sol.p_opt.add_scalar_mut(0.01);
    }
    Ok(sol)
}

pub fn check_oracle_kkt(p: &FlowProblem) -> Result<(), String> {
    let sol = oracle::solve(p, ORACLE_KKT_TOL).map_err(|e| e.to_string())?;
    let kkt = sol.kkt(p).map_err(|e| e.to_string())?;
    if kkt.is_kkt(ORACLE_KKT_TOL) {
        Ok(())
    } else {
        Err(format!("oracle residuals {:?}", kkt.residuals))
    }
}

/// Outcome of a networked run from zero until settled or the horizon.
#[derive(Debug, Clone)]
pub struct ConvergedRun {
    pub final_state: PrimalDualState,
    pub final_injections: DVector<f64>,
    pub kkt_max: f64,
    pub metrics: dynamics::SyncMetrics,
    pub t_final: f64,
}

pub fn converge(p: &FlowProblem) -> Result<ConvergedRun, String> {
    let n = p.n();
    let opts = IntegrationOptions {
        h: DEFAULT_STEP,
        t_end: CONVERGENCE_HORIZON,
        sample_every: 100,
    };
    let traj = dynamics::integrate_until_settled(
        System::Networked,
        p,
        PrimalDualState::zeros(n, n),
        opts,
        SettleOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let final_state = traj.last_state().cloned().expect("nonempty trajectory");
    let kkt = dynamics::state_kkt(System::Networked, p, &final_state).map_err(|e| e.to_string())?;
    Ok(ConvergedRun {
        final_injections: traj.injections.last().cloned().expect("nonempty trajectory"),
        kkt_max: kkt.residuals.max(),
        metrics: dynamics::sync_metrics(&traj, dynamics::DEFAULT_TAIL_FRACTION),
        t_final: *traj.times.last().expect("nonempty trajectory"),
        final_state,
    })
}

pub fn check_convergence(p: &FlowProblem) -> Result<(), String> {
    let run = converge(p)?;
    if run.kkt_max >= CONVERGED_KKT_TOL {
        return Err(format!("final KKT residual {:e} at t = {}", run.kkt_max, run.t_final));
    }
    for (i, &x) in run.final_injections.iter().enumerate() {
        if x < p.p_lo()[i] - LIMIT_SLACK || x > p.p_hi()[i] + LIMIT_SLACK {
            return Err(format!("node {i} injection {x} outside [{}, {}]", p.p_lo()[i], p.p_hi()[i]));
        }
    }
    Ok(())
}

pub fn check_synchronization(p: &FlowProblem, hooks: Hooks) -> Result<(), String> {
    let run = converge(p)?;
    let pred = analysis::predict(p).map_err(|e| e.to_string())?;
    let sol = oracle_with_hooks(p, hooks)?;
    if run.metrics.max_spread >= SPREAD_TOL {
        return Err(format!("tail spread {:e}", run.metrics.max_spread));
    }
    let est = run.metrics.omega_s_estimate;
    if (est - pred.omega_s).abs() >= OMEGA_TOL {
        return Err(format!("estimated omega_s {est} vs predicted {}", pred.omega_s));
    }
    let gap = (&run.final_injections - &sol.p_opt).amax();
    if (est - sol.nu).abs() >= OMEGA_TOL || gap >= OMEGA_TOL {
        return Err(format!(
            "dynamics and oracle disagree: omega {est} vs nu {}, injection gap {gap:e}",
            sol.nu
        ));
    }
    if (pred.omega_s - sol.nu).abs() > analysis::PREDICTION_TOL {
        return Err(format!("predicted omega_s {} vs oracle multiplier {}", pred.omega_s, sol.nu));
    }
    Ok(())
}

pub fn check_trichotomy(p: &FlowProblem) -> Result<(), String> {
    let run = converge(p)?;
    if run.kkt_max >= CONVERGED_KKT_TOL {
        // Only converged runs are judged.
        return Ok(());
    }
    let est = run.metrics.omega_s_estimate;
    let mismatch = p.dispatch_mismatch();
    let case = DispatchCase::of(p);
    let sign_ok = match case {
        DispatchCase::Balanced => est.abs() < SIGN_DEADBAND,
        DispatchCase::BelowDispatch => est > SIGN_DEADBAND,
        DispatchCase::AboveDispatch => est < -SIGN_DEADBAND,
    };
    if !sign_ok {
        return Err(format!("omega_s {est} for dispatch mismatch {mismatch}"));
    }
    let active = p
        .active_sets_of_injections(&run.final_injections, ACTIVE_TOL)
        .map_err(|e| e.to_string())?;
    if !active.mutually_exclusive() {
        return Err(format!("both active sets nonempty: {active:?}"));
    }
    match case {
        DispatchCase::BelowDispatch if !active.at_upper.is_empty() => {
            Err(format!("upper limits active below dispatch: {:?}", active.at_upper))
        }
        DispatchCase::AboveDispatch if !active.at_lower.is_empty() => {
            Err(format!("lower limits active above dispatch: {:?}", active.at_lower))
        }
        DispatchCase::Balanced if !active.is_empty() => {
            Err(format!("limits active at balance: {active:?}"))
        }
        _ => Ok(()),
    }
}

/// Runs the nodal and edge systems in lockstep from `η0 = V Bᵀ θ0` and returns
/// `sup_k ‖V Bᵀ θ_k − η_k‖` over the comparison horizon.
pub fn coincidence_gap(p: &FlowProblem, s0: &PrimalDualState, h: f64) -> Result<f64, String> {
    let e0 = s0.to_edge(p).map_err(|e| e.to_string())?;
    let mut nodal = Integrator::new(System::Networked, p, s0.clone(), h).map_err(|e| e.to_string())?;
    let mut edge = Integrator::new(System::EdgePrimalDual, p, e0, h).map_err(|e| e.to_string())?;
    let steps = (COMPARISON_HORIZON / h).round() as usize;
    let t = p.transform();
    let mut gap: f64 = 0.0;
    for _ in 0..steps {
        nodal.step().map_err(|e| e.to_string())?;
        edge.step().map_err(|e| e.to_string())?;
        let eta = t.to_edge_coords(&nodal.state().primal).map_err(|e| e.to_string())?;
        gap = gap.max((eta - &edge.state().primal).norm());
    }
    Ok(gap)
}

pub fn check_coinciding_fields(p: &FlowProblem, s0: &PrimalDualState, h: f64) -> Result<f64, String> {
    let gap = coincidence_gap(p, s0, h)?;
    if gap < COINCIDENCE_TOL {
        Ok(gap)
    } else {
        Err(format!("coincidence gap {gap:e} at h = {h}"))
    }
}

pub fn check_kernel_conservation(p: &FlowProblem, s0: &PrimalDualState) -> Result<(), String> {
    let split = analysis::edge_split(p).map_err(|e| e.to_string())?;
    if split.gamma_zero.ncols() == 0 {
        return Err("graph has no cycle".into());
    }
    let e0 = s0.to_edge(p).map_err(|e| e.to_string())?;
    let g0 = split.kernel_coords(&e0.primal);
    let mut it = Integrator::new(System::EdgePrimalDual, p, e0, DEFAULT_STEP).map_err(|e| e.to_string())?;
    let steps = (COMPARISON_HORIZON / DEFAULT_STEP).round() as usize;
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        it.step().map_err(|e| e.to_string())?;
        worst = worst.max((split.kernel_coords(&it.state().primal) - &g0).amax());
    }
    if worst < KERNEL_TOL {
        Ok(())
    } else {
        Err(format!("kernel coordinate drift {worst:e}"))
    }
}

fn settle_from(p: &FlowProblem, s0: PrimalDualState) -> Result<PrimalDualState, String> {
    let opts = IntegrationOptions {
        h: DEFAULT_STEP,
        t_end: CONVERGENCE_HORIZON,
        sample_every: 100,
    };
    let traj = dynamics::integrate_until_settled(System::Networked, p, s0, opts, SettleOptions::default())
        .map_err(|e| e.to_string())?;
    Ok(traj.last_state().cloned().expect("nonempty trajectory"))
}

pub fn check_radial_uniqueness(
    p: &FlowProblem,
    a: &PrimalDualState,
    b: &PrimalDualState,
) -> Result<(), String> {
    if !p.graph().is_tree() {
        return Err("graph is not a tree".into());
    }
    let t = p.transform();
    let ea = t.to_edge_coords(&settle_from(p, a.clone())?.primal).map_err(|e| e.to_string())?;
    let eb = t.to_edge_coords(&settle_from(p, b.clone())?.primal).map_err(|e| e.to_string())?;
    let d = (ea - eb).amax();
    if d < RADIAL_TOL {
        Ok(())
    } else {
        Err(format!("final edge states differ by {d:e}"))
    }
}

/// Integrates the droop form from `(θ0, μ0)` and the λ-form from
/// `(θ0, μ0/√k_I)` with the same steps; returns the largest deviation after
/// rescaling the λ-form duals by `√k_I`.
pub fn droop_deviation(p: &FlowProblem, s0: &PrimalDualState) -> Result<f64, String> {
    let sk = p.sqrt_k_i();
    let lam0 = PrimalDualState::new(
        s0.primal.clone(),
        s0.lambda_lo.component_div(sk),
        s0.lambda_hi.component_div(sk),
    );
    let mut droop = Integrator::new(System::Droop, p, s0.clone(), DEFAULT_STEP).map_err(|e| e.to_string())?;
    let mut lam = Integrator::new(System::Networked, p, lam0, DEFAULT_STEP).map_err(|e| e.to_string())?;
    let steps = (COMPARISON_HORIZON / DEFAULT_STEP).round() as usize;
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        droop.step().map_err(|e| e.to_string())?;
        lam.step().map_err(|e| e.to_string())?;
        let (d, l) = (droop.state(), lam.state());
        worst = worst
            .max((&d.primal - &l.primal).amax())
            .max((&d.lambda_lo - l.lambda_lo.component_mul(sk)).amax())
            .max((&d.lambda_hi - l.lambda_hi.component_mul(sk)).amax());
    }
    Ok(worst)
}

pub fn check_droop_equivalence(p: &FlowProblem, s0: &PrimalDualState) -> Result<(), String> {
    let d = droop_deviation(p, s0)?;
    if d < DROOP_TOL {
        Ok(())
    } else {
        Err(format!("droop and lambda forms deviate by {d:e}"))
    }
}

/// Largest deviation between the run from `θ0` and the run from `θ0 + c𝟙`
/// after removing the shift, over `θ`, both duals, `ω` and the KKT residuals.
pub fn shift_deviation(p: &FlowProblem, s0: &PrimalDualState, c: f64) -> Result<f64, String> {
    let mut shifted = s0.clone();
    shifted.primal.add_scalar_mut(c);
    let mut a = Integrator::new(System::Networked, p, s0.clone(), DEFAULT_STEP).map_err(|e| e.to_string())?;
    let mut b = Integrator::new(System::Networked, p, shifted, DEFAULT_STEP).map_err(|e| e.to_string())?;
    let steps = (COMPARISON_HORIZON / DEFAULT_STEP).round() as usize;
    let mut worst: f64 = 0.0;
    for k in 1..=steps {
        a.step().map_err(|e| e.to_string())?;
        b.step().map_err(|e| e.to_string())?;
        let (sa, sb) = (a.state(), b.state());
        worst = worst
            .max((sb.primal.add_scalar(-c) - &sa.primal).amax())
            .max((&sb.lambda_lo - &sa.lambda_lo).amax())
            .max((&sb.lambda_hi - &sa.lambda_hi).amax())
            .max((b.omega() - a.omega()).amax());
        if k % 1000 == 0 || k == steps {
            let ra = dynamics::state_kkt(System::Networked, p, sa).map_err(|e| e.to_string())?;
            let rb = dynamics::state_kkt(System::Networked, p, sb).map_err(|e| e.to_string())?;
            worst = worst.max((ra.residuals.max() - rb.residuals.max()).abs());
        }
    }
    Ok(worst)
}

/// Tolerance for shift invariance: the rounding bound of one evaluation of
/// `Lθ` summed over all steps of the comparison horizon.
pub fn shift_tolerance(p: &FlowProblem, s0: &PrimalDualState, c: f64) -> f64 {
    let scale = 1.0 + c.abs() + s0.primal.amax();
    let l = p.transform().laplacian().amax() * p.n() as f64;
    let steps = (COMPARISON_HORIZON / DEFAULT_STEP).round();
    steps * f64::EPSILON * scale * l.max(1.0)
}

pub fn check_shift_invariance(p: &FlowProblem, s0: &PrimalDualState, c: f64) -> Result<(), String> {
    let d = shift_deviation(p, s0, c)?;
    let tol = shift_tolerance(p, s0, c);
    if d <= tol {
        Ok(())
    } else {
        Err(format!("shift by {c} changes the run by {d:e} (tolerance {tol:e})"))
    }
}

pub fn check_cross_coordinates<R: Rng>(p: &FlowProblem, rng: &mut R) -> Result<(), String> {
    let sol = oracle::solve(p, ORACLE_KKT_TOL).map_err(|e| e.to_string())?;
    let tol = 1e-6;
    let run = |theta: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>| {
        analysis::verify_cross_coordinates(p, theta, lo, hi, tol).map_err(|e| e.to_string())
    };
    let at = run(&sol.theta, &sol.lambda_lo, &sol.lambda_hi)?;
    if !(at.both_accept() && at.consistent) {
        return Err(format!("oracle point not accepted in both coordinates: {at:?}"));
    }
    let shift = sol.theta.add_scalar(rng.gen_range(-5.0..5.0));
    let sh = run(&shift, &sol.lambda_lo, &sol.lambda_hi)?;
    if !sh.both_accept() {
        return Err("shifted oracle point rejected".into());
    }
    let bad = random_state(rng, p.n());
    let garbage = run(&(&sol.theta + bad.primal), &bad.lambda_lo, &bad.lambda_hi)?;
    if !(garbage.both_reject() && garbage.consistent) {
        return Err(format!("perturbed point not rejected in both coordinates: {garbage:?}"));
    }
    Ok(())
}

pub fn check_graph_independence(p: &FlowProblem, q: &FlowProblem) -> Result<(), String> {
    let a = analysis::predict(p).map_err(|e| e.to_string())?;
    let b = analysis::predict(q).map_err(|e| e.to_string())?;
    if (a.omega_s - b.omega_s).abs() > analysis::PREDICTION_TOL
        || a.active_lower != b.active_lower
        || a.active_upper != b.active_upper
    {
        return Err(format!("prediction depends on the graph: {a:?} vs {b:?}"));
    }
    Ok(())
}
