use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use plimflow::analysis::{self, FrequencyPrediction};
use plimflow::dynamics::fmt_sig12;
use plimflow::oracle;
use plimflow::runner;
use plimflow::scenario::Scenario;
use plimflow::verify::{self, Hooks, VerifyOptions};

#[derive(Parser)]
#[command(name = "plimflow", version, about = "Power-limiting droop control and constrained network flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the networked dynamics over the scenario's load schedule.
    Simulate {
        scenario: PathBuf,
        /// Output directory for trajectory and segment CSV files.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the step size (s).
        #[arg(long)]
        h: Option<f64>,
        /// Override the horizon (s).
        #[arg(long = "t-end")]
        t_end: Option<f64>,
    },
    /// Predict synchronous frequency and saturated nodes.
    Predict {
        scenario: PathBuf,
        /// Segment index; all segments when omitted.
        #[arg(long)]
        segment: Option<usize>,
        /// Append one row per segment to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Solve the flow problem of a segment with the dual-bisection oracle.
    Oracle {
        scenario: PathBuf,
        #[arg(long)]
        segment: Option<usize>,
    },
    /// Run the randomized property suite.
    Verify {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Test hook: perturb the oracle solution.
        #[arg(long, hide = true)]
        corrupt_oracle: bool,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns whether every check passed.
fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { scenario, out, h, t_end } => simulate(&scenario, &out, h, t_end),
        Command::Predict { scenario, segment, csv } => predict(&scenario, segment, csv.as_deref()),
        Command::Oracle { scenario, segment } => solve_oracle(&scenario, segment),
        Command::Verify { trials, seed, corrupt_oracle } => {
            if trials == 0 {
                bail!("--trials must be at least 1");
            }
            let report = verify::run_suite(&VerifyOptions {
                trials,
                seed,
                hooks: Hooks { corrupt_oracle },
            });
            print!("{report}");
            Ok(report.passed())
        }
    }
}

fn load(path: &Path) -> Result<Scenario> {
    Scenario::load(path).with_context(|| format!("loading {}", path.display()))
}

fn segments(s: &Scenario, segment: Option<usize>) -> Result<Vec<usize>> {
    match segment {
        Some(k) if k >= s.segment_count() => {
            bail!("segment {k} out of range, scenario has {}", s.segment_count())
        }
        Some(k) => Ok(vec![k]),
        None => Ok((0..s.segment_count()).collect()),
    }
}

fn simulate(path: &Path, out: &Path, h: Option<f64>, t_end: Option<f64>) -> Result<bool> {
    let s = load(path)?.with_sim(h, t_end)?;
    let report = runner::run(&s, Some(out))?;
    print!("{}", report.summary());
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    Ok(report.all_agree())
}

fn print_prediction(s: &Scenario, k: usize, pr: &FrequencyPrediction) {
    let set = |v: &std::collections::BTreeSet<usize>| format!("{v:?}");
    println!("segment: {k}");
    println!("case: {}", pr.case.as_str());
    println!("total_load_pu: {}", fmt_sig12(s.problem(k).p_load().sum()));
    println!("total_load_mw: {}", fmt_sig12(s.problem(k).p_load().sum() * s.base_power));
    println!("omega_s: {}", fmt_sig12(pr.omega_s));
    println!("oracle_nu: {}", fmt_sig12(pr.oracle_nu));
    println!("active_lower: {}", set(&pr.active_lower));
    println!("active_upper: {}", set(&pr.active_upper));
}

fn predict(path: &Path, segment: Option<usize>, csv: Option<&Path>) -> Result<bool> {
    let s = load(path)?;
    let mut rows = Vec::new();
    for (i, k) in segments(&s, segment)?.into_iter().enumerate() {
        let pr = analysis::predict(s.problem(k))?;
        if i > 0 {
            println!();
        }
        print_prediction(&s, k, &pr);
        let join = |v: &std::collections::BTreeSet<usize>| {
            v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
        };
        rows.push(format!(
            "{},{},{},{},{},{},{}",
            s.name,
            k,
            pr.case.as_str(),
            fmt_sig12(s.problem(k).p_load().sum()),
            fmt_sig12(pr.omega_s),
            join(&pr.active_lower),
            join(&pr.active_upper)
        ));
    }
    if let Some(csv) = csv {
        let fresh = std::fs::metadata(csv).map_or(true, |m| m.len() == 0);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(csv)
            .with_context(|| format!("opening {}", csv.display()))?;
        if fresh {
            writeln!(f, "scenario,segment,case,load_pu,omega_s,active_lower,active_upper")?;
        }
        for r in rows {
            writeln!(f, "{r}")?;
        }
    }
    Ok(true)
}

fn solve_oracle(path: &Path, segment: Option<usize>) -> Result<bool> {
    let s = load(path)?;
    for (i, k) in segments(&s, segment)?.into_iter().enumerate() {
        let p = s.problem(k);
        let sol = oracle::solve(p, verify::ORACLE_KKT_TOL)?;
        let kkt = sol.kkt(p)?;
        let vec = |v: &[f64]| {
            v.iter().map(|&x| fmt_sig12(x)).collect::<Vec<_>>().join(", ")
        };
        if i > 0 {
            println!();
        }
        println!("segment: {k}");
        println!("nu: {}", fmt_sig12(sol.nu));
        println!("p_opt_pu: [{}]", vec(sol.p_opt.as_slice()));
        println!("p_opt_mw: [{}]", vec((&sol.p_opt * s.base_power).as_slice()));
        println!("theta: [{}]", vec(sol.theta.as_slice()));
        println!("lambda_lo: [{}]", vec(sol.lambda_lo.as_slice()));
        println!("lambda_hi: [{}]", vec(sol.lambda_hi.as_slice()));
        println!("active_lower: {:?}", sol.active.at_lower);
        println!("active_upper: {:?}", sol.active.at_upper);
        println!("kkt_max: {}", fmt_sig12(kkt.residuals.max()));
        println!("bisections: {}", sol.iterations);
    }
    Ok(true)
}
