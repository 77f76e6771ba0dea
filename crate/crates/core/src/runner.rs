//! Segment-chained simulation of a scenario with per-segment predictions.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::analysis::{self, DispatchCase, FrequencyPrediction};
use crate::dynamics::{
    self, fmt_sig12, IntegrationOptions, PrimalDualState, SyncMetrics, System, Trajectory,
    DEFAULT_TAIL_FRACTION,
};
use crate::error::Result;
use crate::problem::{ActiveSets, KktResiduals, ACTIVE_TOL};
use crate::scenario::Scenario;

/// `|ω̂ − ω_pred|` bound of the agreement flag (pu).
pub const AGREEMENT_OMEGA_TOL: f64 = 1e-3;
/// KKT residual bound of the agreement flag.
pub const AGREEMENT_KKT_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SegmentReport {
    pub index: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub case: DispatchCase,
    pub total_load: f64,
    pub residuals: KktResiduals,
    pub active: ActiveSets,
    pub metrics: SyncMetrics,
    pub prediction: FrequencyPrediction,
    /// Injections at the end of the segment (pu).
    pub final_injections: Vec<f64>,
    pub agreement: bool,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub scenario: String,
    pub base_power: f64,
    pub segments: Vec<SegmentReport>,
    pub trajectory: Trajectory,
    pub files: Vec<PathBuf>,
    /// Set when a segment failed; `segments` holds the completed ones.
    pub failure: Option<String>,
}

impl RunReport {
    pub fn all_agree(&self) -> bool {
        self.failure.is_none() && self.segments.iter().all(|s| s.agreement)
    }

    /// Node indices in the order they first appear in an upper active set.
    pub fn upper_saturation_sequence(&self) -> Vec<usize> {
        let mut seen = Vec::new();
        for seg in &self.segments {
            for &i in &seg.active.at_upper {
                if !seen.contains(&i) {
                    seen.push(i);
                }
            }
        }
        seen
    }

    pub fn to_mw(&self, pu: f64) -> f64 {
        pu * self.base_power
    }

    /// Human-readable summary, one block per segment.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario: {}", self.scenario);
        for s in &self.segments {
            let _ = writeln!(
                out,
                "segment {} [{}, {}) {}: load {:.4} pu ({:.2} MW), omega_s est {:.6e} pred {:.6e}, \
                 spread {:.2e}, kkt {:.2e}, lower {:?}, upper {:?}, agreement {}",
                s.index,
                s.t_start,
                s.t_end,
                s.case.as_str(),
                s.total_load,
                self.to_mw(s.total_load),
                s.metrics.omega_s_estimate,
                s.prediction.omega_s,
                s.metrics.max_spread,
                s.residuals.max(),
                s.active.at_lower,
                s.active.at_upper,
                s.agreement
            );
        }
        if let Some(f) = &self.failure {
            let _ = writeln!(out, "aborted: {f}");
        }
        out
    }
}

fn set_field(s: &BTreeSet<usize>) -> String {
    s.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

/// Runs the networked dynamics segment by segment. The final state of each
/// segment is the initial state of the next. When `out_dir` is given the
/// trajectory (wide and long CSV) and the segment table are written there.
pub fn run(s: &Scenario, out_dir: Option<&Path>) -> Result<RunReport> {
    let mut report = RunReport {
        scenario: s.name.clone(),
        base_power: s.base_power,
        segments: Vec::new(),
        trajectory: Trajectory::default(),
        files: Vec::new(),
        failure: None,
    };
    let mut state: PrimalDualState = s.initial.clone();
    for k in 0..s.segment_count() {
        match run_segment(s, k, state.clone()) {
            Ok((seg, traj)) => {
                state = traj.last_state().cloned().unwrap_or(state);
                report.trajectory.append(traj, s.segments[k].t_start);
                report.segments.push(seg);
            }
            Err(e) => {
                report.failure = Some(format!("segment {k}: {e}"));
                break;
            }
        }
    }
    if let Some(dir) = out_dir {
        write_outputs(&mut report, dir)?;
    }
    Ok(report)
}

fn run_segment(s: &Scenario, k: usize, s0: PrimalDualState) -> Result<(SegmentReport, Trajectory)> {
    let p = s.problem(k);
    let (t_start, t_end) = (s.segments[k].t_start, s.segment_end(k));
    let opts = IntegrationOptions {
        h: s.sim.h,
        t_end: t_end - t_start,
        sample_every: s.sim.sample_every,
    };
    let traj = dynamics::integrate(System::Networked, p, s0, opts)?;
    let last = traj.last_state().expect("integration records the initial state");
    let kkt = dynamics::state_kkt(System::Networked, p, last)?;
    let injections = traj.injections.last().expect("nonempty trajectory").clone();
    let active = p.active_sets_of_injections(&injections, ACTIVE_TOL)?;
    let metrics = dynamics::sync_metrics(&traj, DEFAULT_TAIL_FRACTION);
    let prediction = analysis::predict(p)?;
    let agreement = (metrics.omega_s_estimate - prediction.omega_s).abs() < AGREEMENT_OMEGA_TOL
        && kkt.residuals.max() < AGREEMENT_KKT_TOL;
    let seg = SegmentReport {
        index: k,
        t_start,
        t_end,
        case: prediction.case,
        total_load: p.p_load().sum(),
        residuals: kkt.residuals,
        active,
        metrics,
        prediction,
        final_injections: injections.iter().copied().collect(),
        agreement,
    };
    Ok((seg, traj))
}

fn write_outputs(report: &mut RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let stem = &report.scenario;

    let wide = dir.join(format!("{stem}_trajectory.csv"));
    report
        .trajectory
        .write_csv(BufWriter::new(File::create(&wide)?), "theta")?;
    let long = dir.join(format!("{stem}_trajectory_long.csv"));
    report
        .trajectory
        .write_long_csv(BufWriter::new(File::create(&long)?), "theta")?;

    let table = dir.join(format!("{stem}_segments.csv"));
    let mut w = BufWriter::new(File::create(&table)?);
    write_segment_table(report, &mut w)?;
    w.flush()?;

    report.files = vec![wide, long, table];
    Ok(())
}

/// Writes the per-segment table with per-unit and MW columns.
pub fn write_segment_table<W: Write>(report: &RunReport, mut w: W) -> Result<()> {
    let n = report
        .segments
        .first()
        .map_or(0, |s| s.final_injections.len());
    let mut header: Vec<String> = [
        "segment",
        "t_start",
        "t_end",
        "case",
        "load_pu",
        "load_mw",
        "omega_s_est",
        "omega_s_pred",
        "max_spread",
        "kkt_max",
        "active_lower",
        "active_upper",
        "agreement",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..n).map(|i| format!("P_{i}_pu")));
    header.extend((0..n).map(|i| format!("P_{i}_mw")));
    writeln!(w, "{}", header.join(","))?;
    for s in &report.segments {
        let mut row = vec![
            s.index.to_string(),
            fmt_sig12(s.t_start),
            fmt_sig12(s.t_end),
            s.case.as_str().to_string(),
            fmt_sig12(s.total_load),
            fmt_sig12(report.to_mw(s.total_load)),
            fmt_sig12(s.metrics.omega_s_estimate),
            fmt_sig12(s.prediction.omega_s),
            fmt_sig12(s.metrics.max_spread),
            fmt_sig12(s.residuals.max()),
            set_field(&s.active.at_lower),
            set_field(&s.active.at_upper),
            s.agreement.to_string(),
        ];
        row.extend(s.final_injections.iter().map(|&x| fmt_sig12(x)));
        row.extend(s.final_injections.iter().map(|&x| fmt_sig12(report.to_mw(x))));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}
