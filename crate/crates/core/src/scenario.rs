//! Scenario files: network, converters, a piecewise-constant load schedule
//! and integration settings.
//!
//! The format is TOML with four required sections and one optional one:
//!
//! ```toml
//! [graph]
//! nodes = 3
//! edges = [[0, 1, 5.0], [0, 2, 8.0], [1, 2, 4.0]]   # [i, j, weight], 0-based
//!
//! [converters]
//! base_power = 100.0                # MVA; reports convert pu to MW with it
//! p_star = [0.25, 0.875, 0.55]
//! p_lo   = [0.2, 0.2, 0.2]
//! p_hi   = [1.1, 1.1, 1.1]
//! m      = [0.0417, 0.0938, 0.06]
//! k_p    = [0.0048, 0.0048, 0.0048]
//! k_i    = [0.0637, 0.0637, 0.0637]
//!
//! [[schedule]]                      # one table per segment
//! t_start = 0.0
//! load = [0.4, 0.4, 0.4]
//!
//! [sim]
//! h = 1e-3
//! t_end = 100.0
//! sample_every = 100
//!
//! [initial]                         # optional, defaults to zeros
//! theta = [0.0, 0.0, 0.0]
//! lambda_lo = [0.0, 0.0, 0.0]
//! lambda_hi = [0.0, 0.0, 0.0]
//! ```
//!
//! Segment `k` lasts from its `t_start` to the next segment's `t_start`, the
//! last one until `t_end`.

use std::path::Path;

use nalgebra::DVector;
use serde::Deserialize;

use crate::dynamics::{IntegrationOptions, PrimalDualState};
use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::problem::{Converter, FlowProblem};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    graph: RawGraph,
    converters: RawConverters,
    #[serde(default)]
    schedule: Vec<RawSegment>,
    sim: RawSim,
    initial: Option<RawInitial>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    nodes: usize,
    edges: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConverters {
    base_power: f64,
    p_star: Vec<f64>,
    p_lo: Vec<f64>,
    p_hi: Vec<f64>,
    m: Vec<f64>,
    k_p: Vec<f64>,
    k_i: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSegment {
    t_start: f64,
    load: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSim {
    h: f64,
    t_end: f64,
    sample_every: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    theta: Vec<f64>,
    lambda_lo: Vec<f64>,
    lambda_hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub t_start: f64,
    pub load: DVector<f64>,
}

/// A validated scenario. Every segment's flow problem satisfies the
/// feasibility conditions.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub graph: NetworkGraph,
    pub converters: Vec<Converter>,
    /// MVA per pu.
    pub base_power: f64,
    pub segments: Vec<Segment>,
    pub sim: IntegrationOptions,
    pub initial: PrimalDualState,
    problems: Vec<FlowProblem>,
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Scenario {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses scenario text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let fail = |message: String| Error::Scenario {
            path: origin.to_string(),
            message,
        };
        let raw: RawScenario = toml::from_str(text).map_err(|e| fail(e.to_string()))?;
        let n = raw.graph.nodes;

        let graph = NetworkGraph::new(n, raw.graph.edges.iter().copied())
            .map_err(|e| fail(format!("[graph]: {e}")))?;

        let c = &raw.converters;
        if !(c.base_power > 0.0 && c.base_power.is_finite()) {
            return Err(fail(format!("[converters] base_power must be positive, got {}", c.base_power)));
        }
        for (field, v) in [
            ("p_star", &c.p_star),
            ("p_lo", &c.p_lo),
            ("p_hi", &c.p_hi),
            ("m", &c.m),
            ("k_p", &c.k_p),
            ("k_i", &c.k_i),
        ] {
            if v.len() != n {
                return Err(fail(format!("[converters] {field} has {} entries, expected {n}", v.len())));
            }
        }
        let converters: Vec<Converter> = (0..n)
            .map(|i| Converter {
                p_star: c.p_star[i],
                p_lo: c.p_lo[i],
                p_hi: c.p_hi[i],
                m: c.m[i],
                k_p: c.k_p[i],
                k_i: c.k_i[i],
            })
            .collect();

        let sim = IntegrationOptions {
            h: raw.sim.h,
            t_end: raw.sim.t_end,
            sample_every: raw.sim.sample_every,
        };
        if !(sim.h > 0.0 && sim.h.is_finite()) {
            return Err(fail(format!("[sim] h must be positive, got {}", sim.h)));
        }
        if sim.sample_every == 0 {
            return Err(fail("[sim] sample_every must be at least 1".into()));
        }

        if raw.schedule.is_empty() {
            return Err(fail("[schedule] needs at least one segment".into()));
        }
        let mut segments = Vec::with_capacity(raw.schedule.len());
        let mut problems = Vec::with_capacity(raw.schedule.len());
        for (k, seg) in raw.schedule.iter().enumerate() {
            if k == 0 && seg.t_start != 0.0 {
                return Err(fail(format!("segment 0 must start at t = 0, got {}", seg.t_start)));
            }
            if k > 0 && !(seg.t_start > raw.schedule[k - 1].t_start) {
                return Err(fail(format!("segment {k}: start times must be strictly increasing")));
            }
            if !(seg.t_start < sim.t_end) {
                return Err(fail(format!("segment {k}: starts at or after t_end = {}", sim.t_end)));
            }
            if seg.load.len() != n {
                return Err(fail(format!("segment {k}: load has {} entries, expected {n}", seg.load.len())));
            }
            let load = DVector::from_vec(seg.load.clone());
            let problem = FlowProblem::new(graph.clone(), &converters, load.clone())
                .map_err(|e| fail(format!("segment {k}: {e}")))?;
            let report = problem.validate();
            if let Some(v) = report.violations.first() {
                return Err(fail(format!("segment {k}: {v}")));
            }
            segments.push(Segment {
                t_start: seg.t_start,
                load,
            });
            problems.push(problem);
        }

        let initial = match raw.initial {
            None => PrimalDualState::zeros(n, n),
            Some(init) => {
                for (field, v) in [
                    ("theta", &init.theta),
                    ("lambda_lo", &init.lambda_lo),
                    ("lambda_hi", &init.lambda_hi),
                ] {
                    if v.len() != n {
                        return Err(fail(format!("[initial] {field} has {} entries, expected {n}", v.len())));
                    }
                }
                if init.lambda_lo.iter().chain(&init.lambda_hi).any(|&x| !(x >= 0.0)) {
                    return Err(fail("[initial] dual variables must be nonnegative".into()));
                }
                PrimalDualState::new(
                    DVector::from_vec(init.theta),
                    DVector::from_vec(init.lambda_lo),
                    DVector::from_vec(init.lambda_hi),
                )
            }
        };

        let name = Path::new(origin)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| origin.to_string());
        Ok(Self {
            name,
            graph,
            converters,
            base_power: c.base_power,
            segments,
            sim,
            initial,
            problems,
        })
    }

    pub fn n(&self) -> usize {
        self.graph.node_count()
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    /// Flow problem of segment `k`.
    pub fn problem(&self, k: usize) -> &FlowProblem {
        &self.problems[k]
    }

    pub fn segment_end(&self, k: usize) -> f64 {
        self.segments
            .get(k + 1)
            .map_or(self.sim.t_end, |s| s.t_start)
    }

    /// Overrides step size and horizon. A shorter horizon drops the segments
    /// that would start after it.
    pub fn with_sim(mut self, h: Option<f64>, t_end: Option<f64>) -> Result<Self> {
        if let Some(h) = h {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Validation(format!("step size must be positive, got {h}")));
            }
            self.sim.h = h;
        }
        if let Some(t_end) = t_end {
            if !(t_end > 0.0 && t_end.is_finite()) {
                return Err(Error::Validation(format!("horizon must be positive, got {t_end}")));
            }
            self.sim.t_end = t_end;
            let keep = self.segments.iter().take_while(|s| s.t_start < t_end).count();
            self.segments.truncate(keep);
            self.problems.truncate(keep);
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[graph]
nodes = 2
edges = [[0, 1, 1.0]]

[converters]
base_power = 100.0
p_star = [0.0, 0.0]
p_lo = [-1.0, -1.0]
p_hi = [1.0, 1.0]
m = [1.0, 1.0]
k_p = [1.0, 1.0]
k_i = [1.0, 1.0]

[[schedule]]
t_start = 0.0
load = [0.5, -0.5]

[[schedule]]
t_start = 5.0
load = [0.5, 0.5]

[sim]
h = 1e-3
t_end = 10.0
sample_every = 10
"#;

    fn scenario_error(text: &str) -> String {
        match Scenario::parse(text, "test.scenario") {
            Err(Error::Scenario { message, .. }) => message,
            other => panic!("expected scenario error, got {other:?}"),
        }
    }

    #[test]
    fn parses_base() {
        let s = Scenario::parse(BASE, "dir/test.scenario").unwrap();
        assert_eq!(s.name, "test");
        assert_eq!(s.n(), 2);
        assert_eq!(s.segment_count(), 2);
        assert_eq!(s.segment_end(0), 5.0);
        assert_eq!(s.segment_end(1), 10.0);
        assert_eq!(s.initial.primal, DVector::zeros(2));
        assert_eq!(s.problem(1).p_load().sum(), 1.0);
    }

    #[test]
    fn infeasible_segment_names_index() {
        let text = BASE.replace("load = [0.5, 0.5]", "load = [1.0, 1.0]");
        let msg = scenario_error(&text);
        assert!(msg.starts_with("segment 1:"), "{msg}");
        assert!(msg.contains("load feasibility"), "{msg}");
    }

    #[test]
    fn empty_schedule_rejected() {
        let head = BASE.split("[[schedule]]").next().unwrap();
        let text = format!("{head}[sim]\nh = 1e-3\nt_end = 1.0\nsample_every = 1\n");
        assert!(scenario_error(&text).contains("at least one segment"));
    }

    #[test]
    fn parse_errors_carry_location() {
        let text = BASE.replace("nodes = 2", "nodes = \"two\"");
        let msg = scenario_error(&text);
        assert!(msg.contains("line"), "{msg}");
        let text = BASE.replace("k_i = [1.0, 1.0]", "k_i = [1.0]");
        assert!(scenario_error(&text).contains("k_i has 1 entries"));
    }

    #[test]
    fn schedule_times_checked() {
        let text = BASE.replace("t_start = 5.0", "t_start = 0.0");
        assert!(scenario_error(&text).contains("strictly increasing"));
        let text = BASE.replace("t_start = 0.0", "t_start = 1.0");
        assert!(scenario_error(&text).contains("t = 0"));
    }

    #[test]
    fn sim_override_truncates() {
        let s = Scenario::parse(BASE, "t").unwrap().with_sim(Some(5e-4), Some(4.0)).unwrap();
        assert_eq!(s.segment_count(), 1);
        assert_eq!(s.sim.h, 5e-4);
        assert_eq!(s.segment_end(0), 4.0);
    }
}
