use std::fs;
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use hpsem::geometry::DEFAULT_MU;
use hpsem::harness::{
    builtin_case_with, case_for_spec, choose_discretization, consistency_check, convergence_run, family_totals,
    rng, solution_json, solve, write_convergence_csv, HarnessError, ManufacturedCase, Problem, ProblemSpec,
    Regularity, SolveOptions, SPOT_CHECKS, WEDGE_ALPHA,
};
use hpsem::harness::{broken_error, error_order};
use hpsem::geometry::BcKind;
use hpsem::solver::LayoutMode;
use hpsem::stability::{growth_report, ln_w_sq_ratio, probe_point, ProbeSetup};

#[derive(Parser)]
#[command(name = "hpsem", version, about = "Least-squares h-p spectral element solver")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Gauss points per direction for element terms.
    #[arg(long, global = true)]
    quad_order: Option<usize>,
    /// Grading ratio of the sector layers, overriding the problem file.
    #[arg(long, global = true)]
    mu: Option<f64>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Build the mesh of a spec and print its summary.
    Mesh {
        spec: PathBuf,
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Print the JSON problem file of a built-in case.
    Case {
        name: String,
        #[arg(long, default_value_t = WEDGE_ALPHA)]
        alpha: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve a spec.
    Solve {
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Sweep the discrete stability constant of a built-in case.
    Stability {
        #[arg(long)]
        case: String,
        #[arg(long, value_enum)]
        mode: StabilityMode,
        /// `a..b`; defaults to following W.
        #[arg(long = "M", value_parser = parse_range)]
        m: Option<RangeInclusive<usize>>,
        #[arg(long = "W", value_parser = parse_range)]
        w: RangeInclusive<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convergence study of a built-in case.
    Convergence {
        #[arg(long)]
        case: String,
        /// `a..b` of W (and of M for analytic schedules).
        #[arg(long, value_parser = parse_range)]
        sweep: RangeInclusive<usize>,
        /// Finite regularity index `m`: uses `M = ceil(c m ln W)`.
        #[arg(long)]
        regularity: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, value_enum, default_value_t = ModeArg::Nonconforming)]
        mode: ModeArg,
        /// Exponent of `wedge_alpha`.
        #[arg(long, default_value_t = WEDGE_ALPHA)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StabilityMode {
    Dirichlet,
    Mixed,
    Pi0,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Nonconforming,
    VertexContinuous,
    Pi0,
}

impl From<ModeArg> for LayoutMode {
    fn from(m: ModeArg) -> LayoutMode {
        match m {
            ModeArg::Nonconforming => LayoutMode::Nonconforming,
            ModeArg::VertexContinuous => LayoutMode::VertexContinuous,
            ModeArg::Pi0 => LayoutMode::Pi0,
        }
    }
}

fn parse_range(s: &str) -> Result<RangeInclusive<usize>, String> {
    let (a, b) = s.split_once("..").unwrap_or((s, s));
    let a: usize = a.trim().parse().map_err(|e| format!("bad range start in `{s}`: {e}"))?;
    let b: usize = b.trim().trim_start_matches('=').parse().map_err(|e| format!("bad range end in `{s}`: {e}"))?;
    if a > b {
        return Err(format!("empty range `{s}`"));
    }
    Ok(a..=b)
}

enum Failure {
    Spec(String),
    Numerical(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Spec(e.to_string())
        }
    }
}

fn io_err(path: &std::path::Path, e: impl std::fmt::Display) -> Failure {
    Failure::Spec(format!("{}: {e}", path.display()))
}

fn write_file(path: &PathBuf, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn load(path: &PathBuf, g: &Global) -> Result<(ProblemSpec, Problem), Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut spec = ProblemSpec::from_json(&text)?;
    if let Some(mu) = g.mu {
        spec.discretization.mu = Some(hpsem::harness::PerVertex::All(mu));
    }
    let problem = spec.build()?;
    Ok((spec, problem))
}

fn load_case(name: &str, alpha: f64, g: &Global) -> Result<ManufacturedCase, Failure> {
    let mut case = builtin_case_with(name, alpha)?;
    if let Some(mu) = g.mu {
        case.spec.discretization.mu = Some(hpsem::harness::PerVertex::All(mu));
    }
    Ok(case)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    let opts = SolveOptions {
        quad_order: g.quad_order,
        seed: g.seed,
    };
    match &cli.command {
        Command::Mesh { spec, dump } => {
            let (_, problem) = load(spec, g)?;
            let mesh = problem.mesh().map_err(Failure::from)?;
            let (inc, want) = mesh.handshake();
            println!(
                "{}",
                json!({
                    "vertices": problem.polygon.len(),
                    "sectors": mesh.sectors.len(),
                    "elements": mesh.elements.len(),
                    "outer": mesh.num_outer(),
                    "edges": mesh.edges.len(),
                    "handshake": [inc, want],
                })
            );
            if let Some(path) = dump {
                let v = mesh.dump().map_err(|e| Failure::from(HarnessError::from(e)))?;
                write_file(path, &serde_json::to_string_pretty(&v).expect("json"))?;
            }
        }
        Command::Case { name, alpha, out } => {
            let case = load_case(name, *alpha, g)?;
            let text = case.spec.to_json();
            match out {
                Some(path) => write_file(path, &text)?,
                None => println!("{text}"),
            }
        }
        Command::Solve { spec, out, report } => {
            let (spec, problem) = load(spec, g)?;
            let case = case_for_spec(&spec)?;
            if let Some(c) = &case {
                consistency_check(&problem, &c.exact, SPOT_CHECKS, &mut rng(g.seed))?;
            }
            let start = std::time::Instant::now();
            let outcome = solve(&problem, opts)?;
            let seconds = start.elapsed().as_secs_f64();
            let error = match &case {
                Some(c) => Some(broken_error(&outcome.mesh, &outcome.solution, &c.exact, error_order(problem.w))?),
                None => None,
            };
            let rep = json!({
                "functional": {
                    "total": outcome.breakdown.total,
                    "families": family_totals(&outcome.breakdown),
                },
                "unknowns": outcome.layout.len(),
                "mode": problem.mode,
                "M": problem.m,
                "W": problem.w,
                "relative_residual": outcome.residual,
                "schur": outcome.schur.as_ref().map(|s| json!({
                    "dimension": s.dimension, "interior": s.interior, "min_eig": s.min_eig,
                })),
                "error": error,
                "seconds": seconds,
            });
            println!(
                "{}",
                json!({
                    "unknowns": outcome.layout.len(),
                    "functional": outcome.breakdown.total,
                    "h1_error": error.as_ref().map(|e| e.h1),
                })
            );
            if let Some(path) = out {
                write_file(path, &serde_json::to_string(&solution_json(&outcome)).expect("json"))?;
            }
            if let Some(path) = report {
                write_file(path, &serde_json::to_string_pretty(&rep).expect("json"))?;
            }
        }
        Command::Stability { case, mode, m, w, out } => {
            let case = load_case(case, WEDGE_ALPHA, g)?;
            let problem = case.spec.build()?;
            let neumann = (0..problem.polygon.len()).any(|a| problem.polygon.bc(a) == BcKind::Neumann);
            let layout = match mode {
                StabilityMode::Dirichlet if neumann => {
                    return Err(Failure::Spec(format!("case {} has Neumann arcs; use --mode mixed", case.name)));
                }
                StabilityMode::Mixed if !neumann => {
                    return Err(Failure::Spec(format!("case {} has no Neumann arcs", case.name)));
                }
                StabilityMode::Dirichlet | StabilityMode::Mixed => LayoutMode::Nonconforming,
                StabilityMode::Pi0 => LayoutMode::Pi0,
            };
            let setup = ProbeSetup {
                polygon: problem.polygon.clone(),
                field: Arc::clone(&problem.field),
                rho: problem.rho,
                mu: problem.mu.first().copied().unwrap_or(DEFAULT_MU),
                mode: layout,
                quad_order: g.quad_order,
            };
            let pairs: Vec<(usize, usize)> = match m {
                None => w.clone().map(|w| (w, w)).collect(),
                Some(ms) => ms.clone().flat_map(|m| w.clone().map(move |w| (m, w))).collect(),
            };
            let points = pairs
                .par_iter()
                .map(|&(m, w)| {
                    probe_point(&setup, m, w).map_err(|e| HarnessError::Point {
                        m,
                        w,
                        source: Box::new(e.into()),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let report = growth_report(points);
            let mut wtr = csv::Writer::from_path(out).map_err(|e| io_err(out, e))?;
            wtr.write_record(["case", "mode", "M", "W", "unknowns", "lambda_max", "lnW_sq_ratio", "fit_exponent"])
                .map_err(|e| io_err(out, e))?;
            let mode_name = match mode {
                StabilityMode::Dirichlet => "dirichlet",
                StabilityMode::Mixed => "mixed",
                StabilityMode::Pi0 => "pi0",
            };
            let fit = report.m_exponent.map(|e| e.to_string()).unwrap_or_default();
            for p in &report.points {
                wtr.write_record([
                    case.name.clone(),
                    mode_name.to_string(),
                    p.m.to_string(),
                    p.w.to_string(),
                    p.unknowns.to_string(),
                    p.lambda_max.to_string(),
                    ln_w_sq_ratio(p).to_string(),
                    fit.clone(),
                ])
                .map_err(|e| io_err(out, e))?;
            }
            wtr.flush().map_err(|e| io_err(out, e))?;
            println!(
                "{}",
                json!({"points": report.points.len(), "ln_w_sq_spread": report.ln_w_sq_spread, "m_exponent": report.m_exponent})
            );
        }
        Command::Convergence {
            case,
            sweep,
            regularity,
            c,
            mode,
            alpha,
            out,
        } => {
            let case = load_case(case, *alpha, g)?;
            let ws: Vec<usize> = sweep.clone().collect();
            let schedule = choose_discretization(*regularity, &ws, *c);
            let algebraic = regularity.is_some();
            let summary = convergence_run(&case, &schedule, (*mode).into(), algebraic, opts)?;
            let mut buf = Vec::new();
            write_convergence_csv(&summary.rows, &mut buf).map_err(|e| io_err(out, e))?;
            fs::write(out, buf).map_err(|e| io_err(out, e))?;
            let regularity = match case.regularity {
                Regularity::Analytic => json!("analytic"),
                Regularity::Singular { alpha } => json!({"singular": alpha}),
            };
            println!(
                "{}",
                json!({
                    "case": case.name,
                    "regularity": regularity,
                    "points": summary.rows.len(),
                    "against": summary.against,
                    "fit": summary.fit,
                    "rate": summary.rate,
                    "strictly_decreasing": summary.strictly_decreasing,
                })
            );
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.render().to_string();
            let head: String = msg.split("\n\n").next().unwrap_or("invalid arguments").into();
            eprintln!("hpsem: usage: {}", one_line(head.trim_start_matches("error: ")));
            return ExitCode::from(1);
        }
    };
    if cli.global.threads > 0 {
        // only fails if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads).build_global();
    }
    let code = match run(cli) {
        Ok(()) => 0,
        Err(Failure::Spec(msg)) => {
            eprintln!("hpsem: spec: {}", one_line(&msg));
            2
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("hpsem: numerical: {}", one_line(&msg));
            3
        }
    };
    let _ = std::io::stdout().flush();
    ExitCode::from(code)
}
