//! The constrained flow problem: minimise `½‖P − P*‖²_M` over angles `θ`
//! subject to `P_lo ≤ P ≤ P_hi` with `P = Lθ + P_L`.
//!
//! The box constraints are scaled by `K_I = diag(√k_I)` before dualising, so
//! every residual below uses the square-rooted integral gains.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::DVector;

use crate::error::{check_len, Error, Result};
use crate::graph::{project_off_consensus, EdgeTransform, NetworkGraph};

/// Default acceptance tolerance on each KKT residual.
pub const KKT_TOL: f64 = 1e-6;
/// Default tolerance (per-unit power) for classifying a node as at a limit.
pub const ACTIVE_TOL: f64 = 1e-5;

/// Per-node converter parameters, all per-unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Converter {
    pub p_star: f64,
    pub p_lo: f64,
    pub p_hi: f64,
    pub m: f64,
    pub k_p: f64,
    pub k_i: f64,
}

#[derive(Debug, Clone)]
pub struct FlowProblem {
    graph: NetworkGraph,
    transform: EdgeTransform,
    p_star: DVector<f64>,
    p_load: DVector<f64>,
    p_lo: DVector<f64>,
    p_hi: DVector<f64>,
    m: DVector<f64>,
    k_p: DVector<f64>,
    k_i: DVector<f64>,
    sqrt_k_i: DVector<f64>,
}

impl FlowProblem {
    /// Checks dimensions and gain positivity. The feasibility assumptions are
    /// checked separately by [`FlowProblem::validate`].
    pub fn new(graph: NetworkGraph, converters: &[Converter], p_load: DVector<f64>) -> Result<Self> {
        let n = graph.node_count();
        check_len("converters", n, converters.len())?;
        check_len("p_load", n, p_load.len())?;
        let col = |f: fn(&Converter) -> f64| DVector::from_iterator(n, converters.iter().map(f));
        let p_star = col(|c| c.p_star);
        let p_lo = col(|c| c.p_lo);
        let p_hi = col(|c| c.p_hi);
        let m = col(|c| c.m);
        let k_p = col(|c| c.k_p);
        let k_i = col(|c| c.k_i);
        for (name, v) in [("m", &m), ("k_p", &k_p), ("k_i", &k_i)] {
            if let Some(i) = v.iter().position(|&x| !(x.is_finite() && x > 0.0)) {
                return Err(Error::Validation(format!(
                    "{name}[{i}] = {} must be strictly positive",
                    v[i]
                )));
            }
        }
        for (name, v) in [("p_star", &p_star), ("p_lo", &p_lo), ("p_hi", &p_hi), ("p_load", &p_load)] {
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::Validation(format!("{name}[{i}] is not finite")));
            }
        }
        let transform = graph.transform();
        let sqrt_k_i = k_i.map(f64::sqrt);
        Ok(Self {
            graph,
            transform,
            p_star,
            p_load,
            p_lo,
            p_hi,
            m,
            k_p,
            k_i,
            sqrt_k_i,
        })
    }

    /// Same converters and network, different load vector.
    pub fn with_load(&self, p_load: DVector<f64>) -> Result<Self> {
        check_len("p_load", self.n(), p_load.len())?;
        Ok(Self {
            p_load,
            ..self.clone()
        })
    }

    /// Same data on a different network over the same node set.
    pub fn with_graph(&self, graph: NetworkGraph) -> Result<Self> {
        check_len("graph nodes", self.n(), graph.node_count())?;
        let transform = graph.transform();
        Ok(Self {
            graph,
            transform,
            ..self.clone()
        })
    }

    pub fn n(&self) -> usize {
        self.graph.node_count()
    }

    pub fn graph(&self) -> &NetworkGraph {
        &self.graph
    }

    pub fn transform(&self) -> &EdgeTransform {
        &self.transform
    }

    pub fn p_star(&self) -> &DVector<f64> {
        &self.p_star
    }

    pub fn p_load(&self) -> &DVector<f64> {
        &self.p_load
    }

    pub fn p_lo(&self) -> &DVector<f64> {
        &self.p_lo
    }

    pub fn p_hi(&self) -> &DVector<f64> {
        &self.p_hi
    }

    pub fn m(&self) -> &DVector<f64> {
        &self.m
    }

    pub fn k_p(&self) -> &DVector<f64> {
        &self.k_p
    }

    pub fn k_i(&self) -> &DVector<f64> {
        &self.k_i
    }

    /// Diagonal of `K_I`, i.e. `√k_I`.
    pub fn sqrt_k_i(&self) -> &DVector<f64> {
        &self.sqrt_k_i
    }

    pub fn converter(&self, i: usize) -> Converter {
        Converter {
            p_star: self.p_star[i],
            p_lo: self.p_lo[i],
            p_hi: self.p_hi[i],
            m: self.m[i],
            k_p: self.k_p[i],
            k_i: self.k_i[i],
        }
    }

    /// `Σ P* − Σ P_L`: positive when the load is below the dispatch.
    pub fn dispatch_mismatch(&self) -> f64 {
        self.p_star.sum() - self.p_load.sum()
    }

    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        for i in 0..self.n() {
            if !(self.p_lo[i] < self.p_hi[i]) {
                violations.push(Violation::LimitOrder { node: i });
            }
        }
        let (lo, load, hi) = (self.p_lo.sum(), self.p_load.sum(), self.p_hi.sum());
        if !(lo < load && load < hi) {
            violations.push(Violation::LoadOutsideLimits { lo, load, hi });
        }
        for i in 0..self.n() {
            if !(self.p_lo[i] < self.p_star[i] && self.p_star[i] < self.p_hi[i]) {
                violations.push(Violation::SetpointOutsideLimits { node: i });
            }
        }
        ValidationReport { violations }
    }

    /// `P = Lθ + P_L`.
    pub fn injections(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("theta", self.n(), theta.len())?;
        Ok(self.transform.laplacian() * theta + &self.p_load)
    }

    /// Stacked constraint violation `(P_lo − P_N − P_L, P_N + P_L − P_hi)` for a
    /// network injection `P_N = Lθ`.
    pub fn violation(&self, p_net: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.n();
        check_len("p_net", n, p_net.len())?;
        let p = p_net + &self.p_load;
        Ok(DVector::from_fn(2 * n, |k, _| {
            if k < n {
                self.p_lo[k] - p[k]
            } else {
                p[k - n] - self.p_hi[k - n]
            }
        }))
    }

    /// `½‖P − P*‖²_M`.
    pub fn objective(&self, theta: &DVector<f64>) -> Result<f64> {
        let d = self.injections(theta)? - &self.p_star;
        Ok(0.5 * d.component_mul(&d).dot(&self.m))
    }

    /// Reduced objective `½‖Lθ‖²_M + (P_L − P*)ᵀ M L θ`, equal to
    /// [`FlowProblem::objective`] minus the constant `½‖P_L − P*‖²_M`.
    pub fn objective_nodal(&self, theta: &DVector<f64>) -> Result<f64> {
        check_len("theta", self.n(), theta.len())?;
        let lt = self.transform.laplacian() * theta;
        let offset = &self.p_load - &self.p_star;
        Ok(0.5 * lt.component_mul(&lt).dot(&self.m) + offset.component_mul(&self.m).dot(&lt))
    }

    /// Unprojected stationarity vector `M(P − P*) + K_I(λ_hi − λ_lo)` for the
    /// injections `P`. At a KKT point it equals `−ω_s 𝟙`.
    pub fn stationarity_vector(
        &self,
        p: &DVector<f64>,
        lambda_lo: &DVector<f64>,
        lambda_hi: &DVector<f64>,
    ) -> DVector<f64> {
        (p - &self.p_star).component_mul(&self.m)
            + (lambda_hi - lambda_lo).component_mul(&self.sqrt_k_i)
    }

    fn residuals_at(
        &self,
        p_net: &DVector<f64>,
        stationarity: f64,
        lambda_lo: &DVector<f64>,
        lambda_hi: &DVector<f64>,
    ) -> KktResiduals {
        let p = p_net + &self.p_load;
        let g = self.violation(p_net).expect("dimension checked by caller");
        let primal = g.map(|x| x.max(0.0)).norm();
        let dual = lambda_lo
            .iter()
            .chain(lambda_hi.iter())
            .map(|&l| (-l).max(0.0).powi(2))
            .sum::<f64>()
            .sqrt();
        let lo_gap = (&self.p_lo - &p).component_mul(&self.sqrt_k_i);
        let hi_gap = (&p - &self.p_hi).component_mul(&self.sqrt_k_i);
        let slack = lambda_lo.component_mul(&lo_gap).norm() + lambda_hi.component_mul(&hi_gap).norm();
        KktResiduals {
            stationarity,
            primal_feasibility: primal,
            dual_feasibility: dual,
            complementary_slackness: slack,
        }
    }

    fn check_duals(&self, lambda_lo: &DVector<f64>, lambda_hi: &DVector<f64>) -> Result<()> {
        check_len("lambda_lo", self.n(), lambda_lo.len())?;
        check_len("lambda_hi", self.n(), lambda_hi.len())
    }

    /// KKT residuals of a nodal candidate. Stationarity is measured as the
    /// distance of the stationarity vector from `span(𝟙) = ker Bᵀ`.
    pub fn kkt_residual_nodal(
        &self,
        theta: &DVector<f64>,
        lambda_lo: &DVector<f64>,
        lambda_hi: &DVector<f64>,
    ) -> Result<KktPoint> {
        self.check_duals(lambda_lo, lambda_hi)?;
        let p = self.injections(theta)?;
        let p_net = &p - &self.p_load;
        let stat = project_off_consensus(&self.stationarity_vector(&p, lambda_lo, lambda_hi)).norm();
        Ok(KktPoint {
            coords: Coordinates::Nodal,
            primal: theta.clone(),
            lambda_lo: lambda_lo.clone(),
            lambda_hi: lambda_hi.clone(),
            residuals: self.residuals_at(&p_net, stat, lambda_lo, lambda_hi),
        })
    }

    /// KKT residuals of an edge candidate; stationarity is `‖Bᵀ(…)‖`.
    pub fn kkt_residual_edge(
        &self,
        eta: &DVector<f64>,
        lambda_lo: &DVector<f64>,
        lambda_hi: &DVector<f64>,
    ) -> Result<KktPoint> {
        self.check_duals(lambda_lo, lambda_hi)?;
        let p_net = self.transform.from_edge_coords(eta)?;
        let p = &p_net + &self.p_load;
        let s = self.stationarity_vector(&p, lambda_lo, lambda_hi);
        let stat = self.transform.incidence().tr_mul(&s).norm();
        Ok(KktPoint {
            coords: Coordinates::Edge,
            primal: eta.clone(),
            lambda_lo: lambda_lo.clone(),
            lambda_hi: lambda_hi.clone(),
            residuals: self.residuals_at(&p_net, stat, lambda_lo, lambda_hi),
        })
    }

    pub fn active_sets(&self, theta: &DVector<f64>, tol: f64) -> Result<ActiveSets> {
        let p = self.injections(theta)?;
        self.active_sets_of_injections(&p, tol)
    }

    pub fn active_sets_of_injections(&self, p: &DVector<f64>, tol: f64) -> Result<ActiveSets> {
        check_len("injections", self.n(), p.len())?;
        let mut sets = ActiveSets {
            at_lower: BTreeSet::new(),
            at_upper: BTreeSet::new(),
            tol,
        };
        for i in 0..self.n() {
            let lo = (p[i] - self.p_lo[i]).abs() <= tol;
            let hi = (p[i] - self.p_hi[i]).abs() <= tol;
            match (lo, hi) {
                (true, true) => {
                    return Err(Error::Validation(format!(
                        "node {i} is within {tol} of both limits"
                    )))
                }
                (true, false) => {
                    sets.at_lower.insert(i);
                }
                (false, true) => {
                    sets.at_upper.insert(i);
                }
                _ => {}
            }
        }
        Ok(sets)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// `P_lo,i < P_hi,i` fails.
    LimitOrder { node: usize },
    /// `Σ P_lo < Σ P_L < Σ P_hi` fails.
    LoadOutsideLimits { lo: f64, load: f64, hi: f64 },
    /// `P_lo,i < P*_i < P_hi,i` fails.
    SetpointOutsideLimits { node: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LimitOrder { node } => {
                write!(f, "load feasibility: node {node} needs p_lo < p_hi")
            }
            Violation::LoadOutsideLimits { lo, load, hi } => write!(
                f,
                "load feasibility: need sum(p_lo) < sum(p_load) < sum(p_hi), got {lo} / {load} / {hi}"
            ),
            Violation::SetpointOutsideLimits { node } => {
                write!(f, "setpoint feasibility: node {node} needs p_lo < p_star < p_hi")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::Feasibility(
                self.violations
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("; "),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinates {
    Nodal,
    Edge,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_feasibility: f64,
    pub dual_feasibility: f64,
    pub complementary_slackness: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_feasibility)
            .max(self.dual_feasibility)
            .max(self.complementary_slackness)
    }

    pub fn accepts(&self, tol: f64) -> bool {
        self.max() < tol
    }
}

/// A candidate primal-dual point together with its residual breakdown.
#[derive(Debug, Clone)]
pub struct KktPoint {
    pub coords: Coordinates,
    /// `θ` for nodal candidates, `η` for edge candidates.
    pub primal: DVector<f64>,
    pub lambda_lo: DVector<f64>,
    pub lambda_hi: DVector<f64>,
    pub residuals: KktResiduals,
}

impl KktPoint {
    pub fn is_kkt(&self, tol: f64) -> bool {
        self.residuals.accepts(tol)
    }
}

/// Nodes sitting at their lower / upper injection limit.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSets {
    pub at_lower: BTreeSet<usize>,
    pub at_upper: BTreeSet<usize>,
    pub tol: f64,
}

impl ActiveSets {
    pub fn is_empty(&self) -> bool {
        self.at_lower.is_empty() && self.at_upper.is_empty()
    }

    /// At most one of the two sets is nonempty.
    pub fn mutually_exclusive(&self) -> bool {
        self.at_lower.is_empty() || self.at_upper.is_empty()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn unit_converter(p_lo: f64, p_hi: f64, p_star: f64) -> Converter {
        Converter {
            p_star,
            p_lo,
            p_hi,
            m: 1.0,
            k_p: 1.0,
            k_i: 1.0,
        }
    }

    fn two_node(p_load: [f64; 2], lo: f64, hi: f64) -> FlowProblem {
        let g = NetworkGraph::new(2, [(0, 1, 1.0)]).unwrap();
        let c = unit_converter(lo, hi, 0.0);
        FlowProblem::new(g, &[c, c], DVector::from_row_slice(&p_load)).unwrap()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    #[test]
    fn validate_examples() {
        let p = two_node([0.5, -0.1], -1.0, 1.0);
        assert!(p.validate().is_valid());

        let g = NetworkGraph::new(2, [(0, 1, 1.0)]).unwrap();
        let bad_setpoint = FlowProblem::new(
            g.clone(),
            &[unit_converter(-1.0, 1.0, 1.0), unit_converter(-1.0, 1.0, 0.0)],
            v(&[0.0, 0.0]),
        )
        .unwrap();
        let report = bad_setpoint.validate();
        assert_eq!(report.violations, vec![Violation::SetpointOutsideLimits { node: 0 }]);
        assert!(matches!(report.into_result(), Err(Error::Feasibility(_))));

        let at_upper_sum = two_node([1.0, 1.0], -1.0, 1.0);
        assert!(matches!(
            at_upper_sum.validate().violations.as_slice(),
            [Violation::LoadOutsideLimits { .. }]
        ));

        let crossed = FlowProblem::new(
            g,
            &[unit_converter(1.0, -1.0, 0.0), unit_converter(-1.0, 1.0, 0.0)],
            v(&[0.0, 0.0]),
        )
        .unwrap();
        assert!(crossed.validate().violations.contains(&Violation::LimitOrder { node: 0 }));
    }

    #[test]
    fn rejects_nonpositive_gains() {
        let g = NetworkGraph::new(2, [(0, 1, 1.0)]).unwrap();
        let mut c = unit_converter(-1.0, 1.0, 0.0);
        c.k_i = 0.0;
        let ok = unit_converter(-1.0, 1.0, 0.0);
        assert!(matches!(
            FlowProblem::new(g.clone(), &[ok, c], v(&[0.0, 0.0])),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            FlowProblem::new(g, &[ok], v(&[0.0, 0.0])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn injection_examples() {
        let p = two_node([0.5, -0.5], -1.0, 1.0);
        assert_eq!(p.injections(&v(&[0.0, 0.0])).unwrap(), v(&[0.5, -0.5]));
        assert_eq!(p.injections(&v(&[3.0, 3.0])).unwrap(), v(&[0.5, -0.5]));
        let inj = p.injections(&v(&[-0.25, 0.25])).unwrap();
        assert_relative_eq!(inj[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(inj[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn violation_examples() {
        let g = NetworkGraph::new(2, [(0, 1, 1.0)]).unwrap();
        let c0 = unit_converter(0.2, 1.1, 0.5);
        let c1 = unit_converter(-1.0, 1.0, 0.0);
        let p = FlowProblem::new(g, &[c0, c1], v(&[0.5, 0.0])).unwrap();
        let g = p.violation(&v(&[0.7, -0.7])).unwrap();
        assert_relative_eq!(g[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(g[2], 0.1, epsilon = 1e-12);

        let p = two_node([0.0, 0.0], -1.0, 1.0);
        let g = p.violation(&v(&[0.0, 0.0])).unwrap();
        assert!(g.iter().all(|&x| x < 0.0));
        let g = p.violation(&v(&[1.0, -1.0])).unwrap();
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn objective_examples() {
        let p = two_node([0.5, -0.5], -1.0, 1.0);
        assert_eq!(p.objective_nodal(&v(&[2.0, 2.0])).unwrap(), 0.0);
        assert_relative_eq!(
            p.objective_nodal(&v(&[-0.25, 0.25])).unwrap(),
            -0.25,
            epsilon = 1e-15
        );
        let theta = v(&[0.3, -1.2]);
        let shift = 0.5 * (p.p_load() - p.p_star()).norm_squared();
        assert_relative_eq!(
            p.objective_nodal(&theta).unwrap() + shift,
            p.objective(&theta).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn dual_residual_reports_negative_multipliers() {
        let p = two_node([0.5, -0.5], -1.0, 1.0);
        let k = p
            .kkt_residual_nodal(&v(&[-0.25, 0.25]), &v(&[-0.1, 0.0]), &v(&[0.0, 0.0]))
            .unwrap();
        assert_relative_eq!(k.residuals.dual_feasibility, 0.1);
        assert!(!k.is_kkt(KKT_TOL));
    }

    #[test]
    fn balanced_two_node_is_kkt() {
        let p = two_node([0.5, -0.5], -1.0, 1.0);
        let zero = DVector::zeros(2);
        let k = p.kkt_residual_nodal(&v(&[-0.25, 0.25]), &zero, &zero).unwrap();
        assert!(k.is_kkt(1e-12), "{:?}", k.residuals);
        let eta = p.transform().to_edge_coords(&v(&[-0.25, 0.25])).unwrap();
        let k = p.kkt_residual_edge(&eta, &zero, &zero).unwrap();
        assert!(k.is_kkt(1e-12));
    }

    #[test]
    fn edge_residual_ignores_cycle_component() {
        let g = NetworkGraph::new(3, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]).unwrap();
        let c = unit_converter(-1.0, 1.0, 0.0);
        let p = FlowProblem::new(g, &[c, c, c], v(&[0.3, -0.2, 0.4])).unwrap();
        // (1, 1, −1) circulates around the cycle: B·(1,1,−1) = 0 with unit weights.
        let cycle = v(&[1.0, 1.0, -1.0]);
        assert!(p.transform().from_edge_coords(&cycle).unwrap().norm() < 1e-15);
        let eta = v(&[0.1, -0.3, 0.2]);
        let lam = v(&[0.0, 0.2, 0.0]);
        let a = p.kkt_residual_edge(&eta, &lam, &DVector::zeros(3)).unwrap();
        let b = p.kkt_residual_edge(&(&eta + 2.5 * &cycle), &lam, &DVector::zeros(3)).unwrap();
        assert_relative_eq!(a.residuals.stationarity, b.residuals.stationarity, epsilon = 1e-14);
        assert_relative_eq!(a.residuals.primal_feasibility, b.residuals.primal_feasibility, epsilon = 1e-14);
    }

    #[test]
    fn zero_candidate_infeasible_at_zero() {
        // P_L itself breaks the upper limit of node 0.
        let p = two_node([1.5, -1.0], -2.0, 1.0);
        assert!(p.validate().is_valid());
        let zero = DVector::zeros(2);
        let k = p.kkt_residual_edge(&DVector::zeros(1), &zero, &zero).unwrap();
        assert!(k.residuals.primal_feasibility > 0.0);
    }

    #[test]
    fn active_sets_examples() {
        let p = two_node([0.0, 0.0], -1.0, 1.0);
        let s = p.active_sets(&v(&[0.0, 0.0]), ACTIVE_TOL).unwrap();
        assert!(s.is_empty());
        // θ = (1, 0) → P = (1, −1)
        let s = p.active_sets(&v(&[1.0, 0.0]), ACTIVE_TOL).unwrap();
        assert_eq!(s.at_upper, BTreeSet::from([0]));
        assert_eq!(s.at_lower, BTreeSet::from([1]));
        assert!(!s.mutually_exclusive());

        let narrow = two_node([0.0, 0.0], -1e-6, 1e-6);
        assert!(matches!(
            narrow.active_sets(&v(&[0.0, 0.0]), ACTIVE_TOL),
            Err(Error::Validation(_))
        ));
    }
}
