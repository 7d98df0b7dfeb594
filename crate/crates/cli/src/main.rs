//! `bcert`: check, lift, compose, bound, synthesize and simulate barrier
//! certificates described in a project file.
//!
//! Exit codes: 0 success, 1 refutation or infeasibility, 2 input error.

mod table;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bcert_core::bound::safety_bound;
use bcert_core::cegis::{coefficient_table, synthesize_cbc};
use bcert_core::certify::CertStatus;
use bcert_core::fixtures::FixtureKind;
use bcert_core::project::{run_demo, DemoConfig, Project, ProjectError, SCHEMA_VERSION};
use bcert_core::sim::{plot_data, trajectory_csv, SimError};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "bcert", version, about = "Stochastic barrier certificates for switched networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Project file (JSON).
    #[arg(long)]
    project: PathBuf,
    /// Directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Grid-check every per-mode certificate.
    Check(Common),
    /// Build augmented certificates and grid-check them.
    Lift {
        #[command(flatten)]
        common: Common,
        /// Skip the grid check of the augmented certificates.
        #[arg(long)]
        no_check: bool,
    },
    /// Small-gain test and network certificate.
    Compose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        no_check: bool,
    },
    /// Finite-horizon bound, from flags or from the composed project.
    Bound {
        #[arg(long)]
        project: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long)]
        psi: Option<f64>,
        #[arg(long)]
        horizon: Option<u64>,
    },
    /// Search for a per-mode certificate by counterexample-guided synthesis.
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// Subsystem id; defaults to the first one.
        #[arg(long)]
        subsystem: Option<String>,
        #[arg(long, default_value_t = 0)]
        mode: usize,
        #[arg(long)]
        degree: Option<u32>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated decay rates.
        #[arg(long, value_delimiter = ',')]
        kappa_grid: Option<Vec<f64>>,
        /// Comma-separated unsafe levels.
        #[arg(long, value_delimiter = ',')]
        lambda_grid: Option<Vec<f64>>,
    },
    /// Monte Carlo run under the barrier-driven switching controller.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trajectories: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Trajectories written out in full.
        #[arg(long)]
        retain: Option<usize>,
        #[arg(long)]
        initial_mode: Option<usize>,
        /// Simulate even if the network certificate is not verified.
        #[arg(long)]
        allow_unverified: bool,
        #[arg(long)]
        no_check: bool,
    },
    /// Run a worked example end to end.
    Demo {
        /// room-temp or two-mode
        name: String,
        /// Ring size.
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        trajectories: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        retain: usize,
    },
}

/// Why a command did not succeed.
enum Failure {
    Refuted(String),
    Input(String),
}

impl From<ProjectError> for Failure {
    fn from(e: ProjectError) -> Self {
        if e.is_infeasible() {
            Failure::Refuted(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

/// Writes `body` as pretty JSON, adding `schema_version` to objects lacking it.
fn write_json<T: Serialize>(dir: &Path, name: &str, body: &T) -> Result<(), Failure> {
    let mut v = serde_json::to_value(body).map_err(|e| Failure::Input(e.to_string()))?;
    if let Some(obj) = v.as_object_mut() {
        obj.entry("schema_version").or_insert(SCHEMA_VERSION.into());
    }
    let text = serde_json::to_string_pretty(&v).map_err(|e| Failure::Input(e.to_string()))?;
    fs::write(dir.join(name), text + "\n")?;
    Ok(())
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), Failure> {
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn load(common: &Common) -> Result<Project, Failure> {
    let text = fs::read_to_string(&common.project)
        .map_err(|e| Failure::Input(format!("{}: {e}", common.project.display())))?;
    let p = Project::from_json(&text).map_err(|e| Failure::Input(format!("{}: {e}", common.project.display())))?;
    for w in &p.warnings {
        eprintln!("warning: {w}");
    }
    fs::create_dir_all(&common.out)?;
    Ok(p)
}

fn check(common: &Common) -> Outcome {
    let p = load(common)?;
    let out = p.check()?;
    write_json(&common.out, "check.json", &out)?;
    print!("{}", table::checks(&out));
    let cexs: Vec<_> = out
        .subsystems
        .iter()
        .filter(|s| s.id == s.representative)
        .flat_map(|s| {
            s.modes.iter().filter_map(move |m| match &m.status {
                CertStatus::Refuted { condition, counterexample } => Some(serde_json::json!({
                    "subsystem": s.id, "mode": m.mode, "condition": condition, "counterexample": counterexample,
                })),
                _ => None,
            })
        })
        .collect();
    if out.verified {
        Ok(())
    } else {
        write_json(&common.out, "counterexamples.json", &serde_json::json!({ "refutations": cexs }))?;
        Err(Failure::Refuted(format!("{} certificate(s) refuted", cexs.len())))
    }
}

fn lift(common: &Common, no_check: bool) -> Outcome {
    let p = load(common)?;
    let (_, out) = p.lift(!no_check)?;
    write_json(&common.out, "lift.json", &out)?;
    print!("{}", table::lift(&out));
    if no_check || out.verified {
        Ok(())
    } else {
        Err(Failure::Refuted("an augmented certificate fails its grid check".into()))
    }
}

fn compose(common: &Common, no_check: bool) -> Outcome {
    let p = load(common)?;
    let (apbcs, lifted) = p.lift(!no_check)?;
    write_json(&common.out, "lift.json", &lifted)?;
    let (_, out) = p.compose(&apbcs)?;
    write_json(&common.out, "compose.json", &out)?;
    print!("{}", table::compose(&out));
    if no_check || out.status.is_verified() {
        Ok(())
    } else {
        Err(Failure::Refuted("the composed certificate is not verified".into()))
    }
}

struct BoundFlags {
    project: Option<PathBuf>,
    out: PathBuf,
    gamma: Option<f64>,
    lambda: Option<f64>,
    kappa: Option<f64>,
    psi: Option<f64>,
    horizon: Option<u64>,
}

fn bound(f: BoundFlags) -> Outcome {
    let (k, horizon) = match (f.gamma, f.lambda, f.kappa, f.psi) {
        (Some(g), Some(l), Some(k), Some(p)) => ((g, l, k, p), f.horizon.unwrap_or(10)),
        _ => {
            let Some(path) = f.project else {
                return Err(Failure::Input("give --gamma --lambda --kappa --psi or a --project".into()));
            };
            let p = load(&Common { project: path, out: f.out.clone() })?;
            let (apbcs, _) = p.lift(false)?;
            let (c, _) = p.compose(&apbcs)?;
            let k = &c.certificate.constants;
            ((f.gamma.unwrap_or(k.gamma), f.lambda.unwrap_or(k.lambda), f.kappa.unwrap_or(k.kappa), f.psi.unwrap_or(k.psi)),
             f.horizon.unwrap_or(p.file.bound.horizon))
        }
    };
    fs::create_dir_all(&f.out)?;
    let b = safety_bound(k.0, k.1, k.2, k.3, horizon).map_err(ProjectError::Bound)?;
    write_json(&f.out, "bound.json", &b)?;
    print!("{}", table::bound(&b));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn synthesize(
    common: &Common,
    subsystem: Option<String>,
    mode: usize,
    degree: Option<u32>,
    budget: Option<usize>,
    seed: Option<u64>,
    kappas: Option<Vec<f64>>,
    lambdas: Option<Vec<f64>>,
) -> Outcome {
    let p = load(common)?;
    let i = match &subsystem {
        Some(id) => p.network.index_of(id).ok_or_else(|| Failure::Input(format!("unknown subsystem `{id}`")))?,
        None => 0,
    };
    let sys = &p.network.subsystems[i];
    if mode >= sys.mode_count() {
        return Err(Failure::Input(format!("mode {mode} out of range for `{}`", sys.id)));
    }
    let mut cfg = p.file.synthesis.clone();
    cfg.degree = degree.unwrap_or(cfg.degree);
    cfg.budget = budget.unwrap_or(cfg.budget);
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.kappas = kappas.unwrap_or(cfg.kappas);
    cfg.lambdas = lambdas.unwrap_or(cfg.lambdas);
    let r = synthesize_cbc(sys, mode, &cfg).map_err(ProjectError::from)?;
    let body = serde_json::json!({
        "subsystem": sys.id,
        "mode": mode,
        "success": r.is_success(),
        "candidate": r.candidate,
        "iterations": r.iterations,
        "best_margin": r.best_margin,
        "certificate": r.certificate.as_ref().map(|c| c.to_desc()),
        "coefficients": r.certificate.as_ref().map(|c| coefficient_table(&c.barrier)),
        "reports": r.reports,
        "log": r.log,
    });
    write_json(&common.out, "synthesis.json", &body)?;
    match &r.certificate {
        Some(c) => {
            println!("synthesized {} mode {mode} in {} iterations", sys.id, r.iterations);
            println!("  B = {}", c.barrier);
            println!(
                "  kappa {}  gamma {:.6}  lambda {}  psi {:.6e}",
                c.constants.kappa, c.constants.gamma, c.constants.lambda, c.constants.psi
            );
            Ok(())
        }
        None => Err(Failure::Refuted(format!(
            "no certificate within budget (best worst-case margin {:.3e})",
            r.best_margin
        ))),
    }
}

struct SimFlags {
    trajectories: Option<usize>,
    horizon: Option<usize>,
    seed: Option<u64>,
    retain: Option<usize>,
    initial_mode: Option<usize>,
    allow_unverified: bool,
    no_check: bool,
}

fn simulate(common: &Common, f: SimFlags) -> Outcome {
    let mut p = load(common)?;
    let s = &mut p.file.simulation;
    s.trajectories = f.trajectories.unwrap_or(s.trajectories);
    s.horizon = f.horizon.unwrap_or(s.horizon);
    s.seed = f.seed.unwrap_or(s.seed);
    s.retain = f.retain.unwrap_or(s.retain);
    s.initial_mode = f.initial_mode.unwrap_or(s.initial_mode);
    s.allow_unverified |= f.allow_unverified;
    let (apbcs, _) = p.lift(!f.no_check)?;
    let (c, _) = p.compose(&apbcs)?;
    let report = match p.simulate(&c) {
        Err(ProjectError::Sim(SimError::Unverified)) => {
            return Err(Failure::Refuted(SimError::Unverified.to_string()));
        }
        r => r?,
    };
    write_sim(&p, &common.out, &report)?;
    print!("{}", table::simulation(&report));
    Ok(())
}

fn write_sim(p: &Project, dir: &Path, report: &bcert_core::sim::SimReport) -> Result<(), Failure> {
    write_json(dir, "simulate.json", report)?;
    if !report.retained.is_empty() {
        let ids: Vec<String> = p.network.subsystems.iter().map(|s| s.id.clone()).collect();
        write_text(dir, "trajectories.csv", &trajectory_csv(report, &ids).map_err(ProjectError::from)?)?;
        write_text(dir, "plot.csv", &plot_data(report, 0, 0).map_err(ProjectError::from)?)?;
    }
    Ok(())
}

fn demo(name: &str, n: usize, out: &Path, trajectories: usize, seed: u64, retain: usize) -> Outcome {
    let kind: FixtureKind = name.parse().map_err(|e: bcert_core::fixtures::FixtureError| Failure::Input(e.to_string()))?;
    let cfg = DemoConfig { trajectories, seed, retain, ..DemoConfig::new(kind, n) };
    let run = run_demo(&cfg)?;
    fs::create_dir_all(out)?;
    write_text(out, "project.json", &(run.project.file.to_json() + "\n"))?;
    write_json(out, "check.json", &run.check)?;
    write_json(out, "lift.json", &run.lift)?;
    write_json(out, "compose.json", &run.report.composition)?;
    write_json(out, "bound.json", &run.report.bound)?;
    write_sim(&run.project, out, &run.report.simulation)?;
    write_json(out, "demo.json", &run.report)?;
    print!("{}", table::demo(&run.report));
    if run.report.certificates_verified() {
        Ok(())
    } else {
        Err(Failure::Refuted("published certificates fail their grid checks (see check.json)".into()))
    }
}

fn init_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("BCERT_THREADS") {
        let n: usize = v.parse().map_err(|_| Failure::Input(format!("BCERT_THREADS must be a number, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Input(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    init_threads()?;
    match cli.command {
        Command::Check(c) => check(&c),
        Command::Lift { common, no_check } => lift(&common, no_check),
        Command::Compose { common, no_check } => compose(&common, no_check),
        Command::Bound { project, out, gamma, lambda, kappa, psi, horizon } => {
            bound(BoundFlags { project, out, gamma, lambda, kappa, psi, horizon })
        }
        Command::Synthesize { common, subsystem, mode, degree, budget, seed, kappa_grid, lambda_grid } => {
            synthesize(&common, subsystem, mode, degree, budget, seed, kappa_grid, lambda_grid)
        }
        Command::Simulate { common, trajectories, horizon, seed, retain, initial_mode, allow_unverified, no_check } => {
            simulate(&common, SimFlags { trajectories, horizon, seed, retain, initial_mode, allow_unverified, no_check })
        }
        Command::Demo { name, n, out, trajectories, seed, retain } => demo(&name, n, &out, trajectories, seed, retain),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Refuted(msg)) => {
            eprintln!("refuted: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
