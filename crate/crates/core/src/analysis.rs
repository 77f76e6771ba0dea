//! Closed-form predictions and structural decompositions.
//!
//! The synchronous frequency of a converged run only depends on the total
//! load, the setpoints, the limits of saturated nodes and the droop
//! coefficients of unsaturated ones:
//!
//! ```text
//! ω_s = (Σ_{free} P*_i + Σ_{upper} P_hi,i + Σ_{lower} P_lo,i − Σ P_L,i) / Σ_{free} 1/m_i
//! ```

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::RANK_TOL;
use crate::oracle;
use crate::problem::{FlowProblem, KktPoint};

/// Tolerance between the closed-form frequency and the oracle multiplier.
pub const PREDICTION_TOL: f64 = 1e-9;
/// Oracle KKT tolerance used by [`predict`].
const ORACLE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchCase {
    /// `Σ P_L < Σ P*`: frequency rises, only lower limits can bind.
    BelowDispatch,
    Balanced,
    /// `Σ P_L > Σ P*`: frequency drops, only upper limits can bind.
    AboveDispatch,
}

impl DispatchCase {
    pub fn of(p: &FlowProblem) -> Self {
        let mismatch = p.dispatch_mismatch();
        let scale = p.p_load().lp_norm(1).max(p.p_star().lp_norm(1)).max(1.0);
        if mismatch.abs() <= 1e-12 * scale {
            DispatchCase::Balanced
        } else if mismatch > 0.0 {
            DispatchCase::BelowDispatch
        } else {
            DispatchCase::AboveDispatch
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DispatchCase::BelowDispatch => "below_dispatch",
            DispatchCase::Balanced => "balanced",
            DispatchCase::AboveDispatch => "above_dispatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyPrediction {
    pub case: DispatchCase,
    /// Closed-form synchronous frequency deviation (pu).
    pub omega_s: f64,
    /// Equality multiplier returned by the oracle, for reference.
    pub oracle_nu: f64,
    pub active_lower: BTreeSet<usize>,
    pub active_upper: BTreeSet<usize>,
}

/// Evaluates the closed-form synchronous frequency for given active sets.
/// Returns `None` when every node is saturated.
pub fn synchronous_frequency(
    p: &FlowProblem,
    lower: &BTreeSet<usize>,
    upper: &BTreeSet<usize>,
) -> Option<f64> {
    let mut num = -p.p_load().sum();
    let mut den = 0.0;
    for i in 0..p.n() {
        if upper.contains(&i) {
            num += p.p_hi()[i];
        } else if lower.contains(&i) {
            num += p.p_lo()[i];
        } else {
            num += p.p_star()[i];
            den += 1.0 / p.m()[i];
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Predicts the synchronous frequency and the saturated nodes.
///
/// Active sets come from the oracle's clip structure; the frequency itself is
/// evaluated by [`synchronous_frequency`] and cross-checked against the
/// oracle multiplier.
pub fn predict(p: &FlowProblem) -> Result<FrequencyPrediction> {
    let sol = oracle::solve(p, ORACLE_TOL)?;
    let lower = sol.active.at_lower.clone();
    let upper = sol.active.at_upper.clone();
    let formula = synchronous_frequency(p, &lower, &upper).ok_or_else(|| {
        Error::Feasibility("every node is saturated, the load cannot be balanced".into())
    })?;
    if (formula - sol.nu).abs() > PREDICTION_TOL {
        return Err(Error::Validation(format!(
            "closed-form frequency {formula} disagrees with oracle multiplier {}",
            sol.nu
        )));
    }
    let case = DispatchCase::of(p);
    let omega_s = match case {
        DispatchCase::Balanced => 0.0,
        _ => formula,
    };
    Ok(FrequencyPrediction {
        case,
        omega_s,
        oracle_nu: sol.nu,
        active_lower: lower,
        active_upper: upper,
    })
}

/// Nodes ordered by the frequency drop `m_i (P_hi,i − P*_i)` at which each one
/// reaches its upper limit as the load grows.
pub fn upper_saturation_order(p: &FlowProblem) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.n()).collect();
    let key = |i: usize| p.m()[i] * (p.p_hi()[i] - p.p_star()[i]);
    idx.sort_by(|&a, &b| key(a).total_cmp(&key(b)));
    idx
}

/// Eigen-split of the edge Hessian `V Bᵀ M B V` into its range and kernel.
#[derive(Debug, Clone)]
pub struct EdgeSplit {
    /// e × (n−1), eigenvectors of the positive eigenvalues.
    pub gamma_plus: DMatrix<f64>,
    /// e × (e−n+1), orthonormal basis of the kernel.
    pub gamma_zero: DMatrix<f64>,
    /// All eigenvalues, positive ones first in decreasing order.
    pub eigenvalues: DVector<f64>,
}

pub fn edge_hessian(p: &FlowProblem) -> DMatrix<f64> {
    let vbt = p.transform().edge_map();
    let mut scaled = vbt.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= p.m()[j];
    }
    let h = &scaled * vbt.transpose();
    // Symmetrise against rounding.
    (&h + h.transpose()) * 0.5
}

pub fn edge_split(p: &FlowProblem) -> Result<EdgeSplit> {
    let hess = edge_hessian(p);
    let e = hess.nrows();
    let eig = hess.symmetric_eigen();
    let mut order: Vec<usize> = (0..e).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let max = eig.eigenvalues[order[0]].max(0.0);
    let positive = order
        .iter()
        .take_while(|&&k| eig.eigenvalues[k] > RANK_TOL * max)
        .count();
    let expected = p.n() - 1;
    if positive != expected {
        return Err(Error::Structural(format!(
            "edge Hessian has {positive} positive eigenvalues, expected n - 1 = {expected}"
        )));
    }
    let pick = |ks: &[usize]| {
        DMatrix::from_columns(
            &ks.iter()
                .map(|&k| eig.eigenvectors.column(k).into_owned())
                .collect::<Vec<_>>(),
        )
    };
    let gamma_plus = pick(&order[..positive]);
    let gamma_zero = if positive < e {
        pick(&order[positive..])
    } else {
        DMatrix::zeros(e, 0)
    };
    let eigenvalues = DVector::from_iterator(e, order.iter().map(|&k| eig.eigenvalues[k]));
    Ok(EdgeSplit {
        gamma_plus,
        gamma_zero,
        eigenvalues,
    })
}

impl EdgeSplit {
    /// `Γ₊ᵀ V Bᵀ M B V Γ₊`, positive definite.
    pub fn reduced_hessian(&self, p: &FlowProblem) -> DMatrix<f64> {
        self.gamma_plus.transpose() * edge_hessian(p) * &self.gamma_plus
    }

    /// `Γ₊ᵀ V Bᵀ M (P_L − P*)`: with it the edge objective reads
    /// `½ γ₊ᵀ H γ₊ + cᵀ γ₊`.
    pub fn reduced_linear_term(&self, p: &FlowProblem) -> DVector<f64> {
        let offset = (p.p_load() - p.p_star()).component_mul(p.m());
        self.gamma_plus.transpose() * (p.transform().edge_map() * offset)
    }

    /// Kernel coordinates `Γ₀ᵀ η`, conserved by the edge dynamics.
    pub fn kernel_coords(&self, eta: &DVector<f64>) -> DVector<f64> {
        self.gamma_zero.tr_mul(eta)
    }

    pub fn range_coords(&self, eta: &DVector<f64>) -> DVector<f64> {
        self.gamma_plus.tr_mul(eta)
    }
}

#[derive(Debug, Clone)]
pub struct CrossCheck {
    pub nodal: KktPoint,
    pub edge: KktPoint,
    pub nodal_accepts: bool,
    pub edge_accepts: bool,
    /// Decisions agree, or both residuals sit inside the conditioning band
    /// around `tol` where the two stationarity norms may legitimately differ.
    pub consistent: bool,
}

impl CrossCheck {
    pub fn both_accept(&self) -> bool {
        self.nodal_accepts && self.edge_accepts
    }

    pub fn both_reject(&self) -> bool {
        !self.nodal_accepts && !self.edge_accepts
    }
}

/// Evaluates a nodal candidate and its image `η = V Bᵀ θ` side by side.
pub fn verify_cross_coordinates(
    p: &FlowProblem,
    theta: &DVector<f64>,
    lambda_lo: &DVector<f64>,
    lambda_hi: &DVector<f64>,
    tol: f64,
) -> Result<CrossCheck> {
    let nodal = p.kkt_residual_nodal(theta, lambda_lo, lambda_hi)?;
    let eta = p.transform().to_edge_coords(theta)?;
    let edge = p.kkt_residual_edge(&eta, lambda_lo, lambda_hi)?;
    let nodal_accepts = nodal.is_kkt(tol);
    let edge_accepts = edge.is_kkt(tol);
    // ‖Bᵀs‖ and ‖s − mean(s)𝟙‖ bound each other through the extreme nonzero
    // singular values of B.
    let sv = p.transform().incidence().clone().singular_values();
    let smax = sv.max();
    let smin = sv
        .iter()
        .copied()
        .filter(|&s| s > RANK_TOL * smax)
        .fold(f64::INFINITY, f64::min);
    let kappa = smax.max(1.0 / smin).max(1.0);
    let in_band = |r: f64| r >= tol / kappa && r <= tol * kappa;
    let consistent = nodal_accepts == edge_accepts
        || (in_band(nodal.residuals.max()) && in_band(edge.residuals.max()));
    Ok(CrossCheck {
        nodal,
        edge,
        nodal_accepts,
        edge_accepts,
        consistent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NetworkGraph;
    use crate::problem::Converter;
    use approx::assert_relative_eq;

    fn conv(p_star: f64, p_lo: f64, p_hi: f64, m: f64) -> Converter {
        Converter {
            p_star,
            p_lo,
            p_hi,
            m,
            k_p: 1.0,
            k_i: 1.0,
        }
    }

    fn example_e(sign: f64) -> FlowProblem {
        let g = NetworkGraph::new(2, [(0, 1, 1.0)]).unwrap();
        let (c0, c1) = if sign > 0.0 {
            (conv(0.1, -1.0, 0.25, 1.0), conv(0.0, -1.0, 1.0, 2.0))
        } else {
            (conv(-0.1, -0.25, 1.0, 1.0), conv(0.0, -1.0, 1.0, 2.0))
        };
        FlowProblem::new(g, &[c0, c1], DVector::from_vec(vec![0.5 * sign, 0.0])).unwrap()
    }

    #[test]
    fn balanced_prediction() {
        let g = NetworkGraph::new(2, [(0, 1, 1.0)]).unwrap();
        let c = conv(0.0, -1.0, 1.0, 1.0);
        let p = FlowProblem::new(g, &[c, c], DVector::from_vec(vec![0.5, -0.5])).unwrap();
        let pr = predict(&p).unwrap();
        assert_eq!(pr.case, DispatchCase::Balanced);
        assert_eq!(pr.omega_s, 0.0);
        assert!(pr.active_lower.is_empty() && pr.active_upper.is_empty());
    }

    #[test]
    fn clipped_prediction_and_mirror() {
        let pr = predict(&example_e(1.0)).unwrap();
        assert_eq!(pr.case, DispatchCase::AboveDispatch);
        assert_eq!(pr.active_upper, BTreeSet::from([0]));
        assert!(pr.active_lower.is_empty());
        // (0 + 0.25 − 0.5) / (1/2)
        assert_relative_eq!(pr.omega_s, -0.5, epsilon = 1e-12);

        let pr = predict(&example_e(-1.0)).unwrap();
        assert_eq!(pr.case, DispatchCase::BelowDispatch);
        assert_eq!(pr.active_lower, BTreeSet::from([0]));
        assert!(pr.active_upper.is_empty());
        assert_relative_eq!(pr.omega_s, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn all_saturated_formula_is_undefined() {
        let p = example_e(1.0);
        assert!(synchronous_frequency(&p, &BTreeSet::new(), &BTreeSet::from([0, 1])).is_none());
    }

    #[test]
    fn tree_split_has_no_kernel() {
        let g = NetworkGraph::new(4, [(0, 1, 2.0), (1, 2, 0.5), (1, 3, 3.0)]).unwrap();
        let c = conv(0.0, -1.0, 1.0, 1.3);
        let p = FlowProblem::new(g, &[c; 4], DVector::zeros(4)).unwrap();
        let s = edge_split(&p).unwrap();
        assert_eq!(s.gamma_zero.ncols(), 0);
        assert_eq!(s.gamma_plus.ncols(), 3);
        assert!(s.reduced_hessian(&p).cholesky().is_some());
    }

    #[test]
    fn triangle_split_has_one_zero_eigenvalue() {
        let g = NetworkGraph::new(3, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]).unwrap();
        let c = conv(0.0, -1.0, 1.0, 1.0);
        let p = FlowProblem::new(g, &[c; 3], DVector::zeros(3)).unwrap();
        let s = edge_split(&p).unwrap();
        assert_eq!(s.gamma_zero.ncols(), 1);
        // With M = I the nonzero spectrum of BᵀB equals that of BBᵀ = L: {3, 3}.
        assert_relative_eq!(s.eigenvalues[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(s.eigenvalues[1], 3.0, epsilon = 1e-12);
        assert!(s.eigenvalues[2].abs() < 1e-12);
        let hess = edge_hessian(&p);
        assert!((&hess * &s.gamma_zero).norm() < 1e-12);
        assert!((s.gamma_plus.transpose() * &s.gamma_zero).norm() < 1e-12);
        let gamma = DMatrix::from_columns(
            &s.gamma_plus
                .column_iter()
                .chain(s.gamma_zero.column_iter())
                .map(|c| c.into_owned())
                .collect::<Vec<_>>(),
        );
        let rebuilt = &gamma * DMatrix::from_diagonal(&s.eigenvalues) * gamma.transpose();
        assert!((rebuilt - hess).norm() < 1e-10);
    }

    #[test]
    fn reduced_objective_matches_edge_objective() {
        let g = NetworkGraph::new(4, [(0, 1, 2.0), (1, 2, 0.5), (2, 3, 3.0), (0, 3, 1.0), (0, 2, 0.7)]).unwrap();
        let cs = [
            conv(0.1, -1.0, 1.0, 0.6),
            conv(0.0, -1.0, 1.0, 1.3),
            conv(-0.3, -1.0, 1.0, 2.0),
            conv(0.2, -1.0, 1.0, 0.9),
        ];
        let p = FlowProblem::new(g, &cs, DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1])).unwrap();
        let s = edge_split(&p).unwrap();
        let theta = DVector::from_vec(vec![0.2, -0.1, 0.4, -0.3]);
        let eta = p.transform().to_edge_coords(&theta).unwrap();
        let gp = s.range_coords(&eta);
        let reduced = 0.5 * gp.dot(&(s.reduced_hessian(&p) * &gp)) + s.reduced_linear_term(&p).dot(&gp);
        assert_relative_eq!(reduced, p.objective_nodal(&theta).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn cross_check_on_oracle_and_garbage() {
        let p = example_e(1.0);
        let sol = oracle::solve(&p, 1e-10).unwrap();
        let c = verify_cross_coordinates(&p, &sol.theta, &sol.lambda_lo, &sol.lambda_hi, 1e-8).unwrap();
        assert!(c.both_accept() && c.consistent);

        let shifted = &sol.theta + DVector::from_element(2, 3.0);
        let c = verify_cross_coordinates(&p, &shifted, &sol.lambda_lo, &sol.lambda_hi, 1e-8).unwrap();
        assert!(c.both_accept());

        let c = verify_cross_coordinates(
            &p,
            &DVector::from_vec(vec![5.0, -5.0]),
            &DVector::from_vec(vec![0.3, 0.0]),
            &DVector::zeros(2),
            1e-8,
        )
        .unwrap();
        assert!(c.both_reject() && c.consistent);
    }

    #[test]
    fn saturation_order_by_headroom() {
        let g = NetworkGraph::new(3, [(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let cs = [
            conv(0.25, 0.2, 1.1, 0.0417),
            conv(0.875, 0.2, 1.1, 0.0938),
            conv(0.55, 0.2, 1.1, 0.06),
        ];
        let p = FlowProblem::new(g, &cs, DVector::from_element(3, 0.5)).unwrap();
        assert_eq!(upper_saturation_order(&p), vec![1, 2, 0]);
    }
}
