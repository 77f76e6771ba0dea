//! Ground-truth solver for the constrained flow problem.
//!
//! For a connected graph the reachable injections are exactly the vectors with
//! `𝟙ᵀP = 𝟙ᵀP_L`, so the problem collapses to a separable box-constrained QP
//! with a single equality constraint:
//!
//! ```text
//! min ½ Σ m_i (P_i − P*_i)²   s.t.  P_lo ≤ P ≤ P_hi,  Σ P_i = Σ P_L
//! ```
//!
//! Its stationarity condition gives `P_i(ν) = clip(P*_i − ν/m_i, P_lo,i, P_hi,i)`
//! and the multiplier `ν` is the root of the nonincreasing map
//! `ν ↦ Σ P_i(ν) − Σ P_L`, found by bisection. No graph quantity enters the
//! solve; angles are recovered afterwards from `Lθ = P − P_L`.

use std::collections::BTreeSet;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::graph::EdgeTransform;
use crate::problem::{ActiveSets, FlowProblem, KktPoint};

/// Stop once the clipped sum matches the load to this absolute accuracy.
pub const SUM_TOL: f64 = 1e-12;
pub const MAX_BISECTIONS: usize = 200;

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub p_opt: DVector<f64>,
    /// Multiplier of `Σ P = Σ P_L`; equals the synchronous frequency.
    pub nu: f64,
    /// Zero-mean angles with `Lθ = p_opt − P_L`.
    pub theta: DVector<f64>,
    pub lambda_lo: DVector<f64>,
    pub lambda_hi: DVector<f64>,
    /// Nodes whose clip is active (tolerance 0).
    pub active: ActiveSets,
    pub iterations: usize,
}

impl OracleSolution {
    pub fn predicted_omega_s(&self) -> f64 {
        self.nu
    }

    pub fn kkt(&self, p: &FlowProblem) -> Result<KktPoint> {
        p.kkt_residual_nodal(&self.theta, &self.lambda_lo, &self.lambda_hi)
    }
}

fn clipped(p: &FlowProblem, nu: f64, i: usize) -> f64 {
    (p.p_star()[i] - nu / p.m()[i]).clamp(p.p_lo()[i], p.p_hi()[i])
}

fn clipped_sum(p: &FlowProblem, nu: f64) -> f64 {
    (0..p.n()).map(|i| clipped(p, nu, i)).sum()
}

/// Solves the flow problem by dual bisection.
///
/// `tol` is the KKT acceptance tolerance the result is checked against; the
/// call fails if the recovered point does not meet it.
pub fn solve(p: &FlowProblem, tol: f64) -> Result<OracleSolution> {
    p.validate().into_result()?;
    let n = p.n();
    let target = p.p_load().sum();

    let mut nu_lo = f64::INFINITY;
    let mut nu_hi = f64::NEG_INFINITY;
    for i in 0..n {
        nu_lo = nu_lo.min(p.m()[i] * (p.p_star()[i] - p.p_hi()[i]));
        nu_hi = nu_hi.max(p.m()[i] * (p.p_star()[i] - p.p_lo()[i]));
    }
    nu_lo -= 1.0;
    nu_hi += 1.0;
    // The clipped sum is nonincreasing in ν.
    let (f_lo, f_hi) = (clipped_sum(p, nu_lo) - target, clipped_sum(p, nu_hi) - target);
    if !(f_lo > 0.0 && f_hi < 0.0) {
        return Err(Error::Bracket(format!(
            "sum at bracket ends = {} / {}, load = {target}",
            f_lo + target,
            f_hi + target
        )));
    }

    let mut nu = 0.5 * (nu_lo + nu_hi);
    let mut iterations = 0;
    while iterations < MAX_BISECTIONS {
        iterations += 1;
        nu = 0.5 * (nu_lo + nu_hi);
        let f = clipped_sum(p, nu) - target;
        if f.abs() < SUM_TOL {
            break;
        }
        if f > 0.0 {
            nu_lo = nu;
        } else {
            nu_hi = nu;
        }
    }

    let p_opt = DVector::from_fn(n, |i, _| clipped(p, nu, i));
    let mut lambda_lo = DVector::zeros(n);
    let mut lambda_hi = DVector::zeros(n);
    let mut at_lower = BTreeSet::new();
    let mut at_upper = BTreeSet::new();
    for i in 0..n {
        let free = p.p_star()[i] - nu / p.m()[i];
        let (m, star, sk) = (p.m()[i], p.p_star()[i], p.sqrt_k_i()[i]);
        if free >= p.p_hi()[i] {
            at_upper.insert(i);
            lambda_hi[i] = (-(m * (p.p_hi()[i] - star) + nu) / sk).max(0.0);
        } else if free <= p.p_lo()[i] {
            at_lower.insert(i);
            lambda_lo[i] = ((m * (p.p_lo()[i] - star) + nu) / sk).max(0.0);
        }
    }
    let theta = recover_theta(p.transform(), &p_opt, p.p_load())?;
    let sol = OracleSolution {
        p_opt,
        nu,
        theta,
        lambda_lo,
        lambda_hi,
        active: ActiveSets {
            at_lower,
            at_upper,
            tol: 0.0,
        },
        iterations,
    };
    let kkt = sol.kkt(p)?;
    if !kkt.is_kkt(tol) {
        return Err(Error::Validation(format!(
            "oracle point misses KKT tolerance {tol}: {:?}",
            kkt.residuals
        )));
    }
    Ok(sol)
}

/// The zero-mean `θ` with `Lθ = p_opt − p_load`.
pub fn recover_theta(
    t: &EdgeTransform,
    p_opt: &DVector<f64>,
    p_load: &DVector<f64>,
) -> Result<DVector<f64>> {
    crate::error::check_len("p_opt", t.node_count(), p_opt.len())?;
    crate::error::check_len("p_load", t.node_count(), p_load.len())?;
    let rhs = p_opt - p_load;
    let scale = p_opt.lp_norm(1).max(p_load.lp_norm(1)).max(1.0);
    if rhs.sum().abs() > 1e-9 * scale {
        return Err(Error::Validation(format!(
            "injections do not balance the load: sum(p_opt - p_load) = {}",
            rhs.sum()
        )));
    }
    t.solve_laplacian(&rhs)
}
