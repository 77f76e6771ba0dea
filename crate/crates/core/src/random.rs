//! Seeded generator of valid random flow problems.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::NetworkGraph;
use crate::problem::{Converter, FlowProblem};

pub type InstanceRng = ChaCha8Rng;

pub fn rng(seed: u64) -> InstanceRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceConfig {
    pub n_min: usize,
    pub n_max: usize,
    /// Spanning trees only.
    pub tree: bool,
    /// Force at least one cycle (requires `n ≥ 3`).
    pub cyclic: bool,
    /// Probability of an instance with `Σ P_L = Σ P*`.
    pub balanced_fraction: f64,
    /// Minimum `|Σ P* − Σ P_L|` of unbalanced instances.
    pub min_mismatch: f64,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            n_min: 2,
            n_max: 8,
            tree: false,
            cyclic: false,
            balanced_fraction: 0.1,
            min_mismatch: 0.05,
        }
    }
}

impl InstanceConfig {
    pub fn trees() -> Self {
        Self {
            tree: true,
            ..Self::default()
        }
    }

    pub fn cyclic() -> Self {
        Self {
            n_min: 3,
            cyclic: true,
            ..Self::default()
        }
    }
}

/// Random connected graph: a random spanning tree plus, unless `tree`, each
/// remaining pair with probability 0.3. Weights are uniform in `[1, 4]`.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize, tree: bool, cyclic: bool) -> NetworkGraph {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut present = vec![vec![false; n]; n];
    let mut edges = Vec::new();
    for k in 1..n {
        let parent = order[rng.gen_range(0..k)];
        let child = order[k];
        present[parent][child] = true;
        present[child][parent] = true;
        edges.push((parent, child, rng.gen_range(1.0..4.0)));
    }
    if !tree {
        let mut missing = Vec::new();
        for (i, row) in present.iter().enumerate() {
            for (j, &linked) in row.iter().enumerate().skip(i + 1) {
                if !linked {
                    missing.push((i, j));
                }
            }
        }
        let before = edges.len();
        for &(i, j) in &missing {
            if rng.gen_bool(0.3) {
                edges.push((i, j, rng.gen_range(1.0..4.0)));
            }
        }
        if cyclic && edges.len() == before && !missing.is_empty() {
            let (i, j) = missing[rng.gen_range(0..missing.len())];
            edges.push((i, j, rng.gen_range(1.0..4.0)));
        }
    }
    NetworkGraph::new(n, edges).expect("spanning tree construction yields a connected simple graph")
}

pub fn random_converter<R: Rng>(rng: &mut R) -> Converter {
    let p_lo = rng.gen_range(-1.5..-0.5);
    let p_hi = rng.gen_range(0.5..1.5);
    let span = p_hi - p_lo;
    Converter {
        p_star: rng.gen_range(p_lo + 0.1 * span..p_hi - 0.1 * span),
        p_lo,
        p_hi,
        m: rng.gen_range(0.5..2.0),
        k_p: rng.gen_range(0.5..2.0),
        k_i: rng.gen_range(0.5..2.0),
    }
}

/// Random valid instance. The total load lies strictly between the summed
/// limits, at `Σ P_lo + f (Σ P_hi − Σ P_lo)` with `f ∈ [0.05, 0.95]`.
pub fn random_problem<R: Rng>(rng: &mut R, cfg: &InstanceConfig) -> FlowProblem {
    let n = rng.gen_range(cfg.n_min..=cfg.n_max);
    let graph = random_graph(rng, n, cfg.tree, cfg.cyclic);
    let converters: Vec<Converter> = (0..n).map(|_| random_converter(rng)).collect();
    let load = random_load(rng, &converters, cfg);
    FlowProblem::new(graph, &converters, load).expect("generated data is finite with positive gains")
}

pub fn random_load<R: Rng>(rng: &mut R, converters: &[Converter], cfg: &InstanceConfig) -> DVector<f64> {
    let n = converters.len();
    let sum_lo: f64 = converters.iter().map(|c| c.p_lo).sum();
    let sum_hi: f64 = converters.iter().map(|c| c.p_hi).sum();
    let sum_star: f64 = converters.iter().map(|c| c.p_star).sum();
    let total = if rng.gen_bool(cfg.balanced_fraction) {
        sum_star
    } else {
        loop {
            let t = sum_lo + rng.gen_range(0.05..0.95) * (sum_hi - sum_lo);
            if (t - sum_star).abs() >= cfg.min_mismatch {
                break t;
            }
        }
    };
    let mut load = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let shift = (total - load.sum()) / n as f64;
    load.add_scalar_mut(shift);
    load[n - 1] = total - load.rows(0, n - 1).sum();
    load
}

/// Random initial state with angles in `[-1, 1]` and duals in `[0, 1]`.
pub fn random_initial<R: Rng>(rng: &mut R, n: usize) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    (
        DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
        DVector::from_fn(n, |_, _| rng.gen_range(0.0..1.0)),
        DVector::from_fn(n, |_, _| rng.gen_range(0.0..1.0)),
    )
}
