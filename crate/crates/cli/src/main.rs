use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{ArgAction, Parser, Subcommand};

use dcssp_core::aco::{run_aco, AcoParams};
use dcssp_core::exact::{solve_exact, OracleLimits};
use dcssp_core::experiment::{load_manifest, run_batch, write_convergence_csv, write_summary_csv};
use dcssp_core::instance::{
    generate_instance, load_instance, serialize_instance, validate_instance, GeneratorSettings, Profile,
};
use dcssp_core::schedule::ScheduleExpr;
use dcssp_core::structure::{serialize_solution, to_dot};

#[derive(Parser)]
#[command(name = "dcssp", version, about = "Synthesize minimum-cost control-system device trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for a cheap feasible structure with the ant colony.
    Solve {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value_t = 500)]
        iterations: usize,
        #[arg(long, default_value_t = 20)]
        ants: usize,
        #[arg(long, default_value = "2.0")]
        alpha: ScheduleExpr,
        #[arg(long, default_value = "1.0")]
        beta: ScheduleExpr,
        #[arg(long, default_value = "0.25")]
        rho: ScheduleExpr,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, action = ArgAction::Set, default_value_t = true)]
        local_search: bool,
        /// Graphviz rendering of the best tree.
        #[arg(long)]
        out_tree: Option<PathBuf>,
        #[arg(long)]
        out_solution: Option<PathBuf>,
        /// Per-iteration convergence CSV.
        #[arg(long)]
        out_trace: Option<PathBuf>,
    },
    /// Exhaustive optimum for small instances.
    Oracle {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value_t = 12)]
        max_nodes: usize,
        #[arg(long, default_value_t = 60.0)]
        time_budget_s: f64,
        #[arg(long)]
        out_solution: Option<PathBuf>,
    },
    /// Run every parameter set of a manifest several times.
    Experiment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write a generated instance.
    Gen {
        #[arg(long, default_value = "random")]
        profile: Profile,
        #[arg(long, default_value_t = 5)]
        u: usize,
        #[arg(long, default_value_t = 200)]
        a: usize,
        #[arg(long, default_value_t = 4)]
        s: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check an instance file.
    Validate {
        #[arg(long)]
        instance: PathBuf,
    },
}

enum Failure {
    Error(String),
    Infeasible(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Error(e.to_string())
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Error(format!("{}: {e}", path.display())))
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Solve {
            instance,
            iterations,
            ants,
            alpha,
            beta,
            rho,
            seed,
            local_search,
            out_tree,
            out_solution,
            out_trace,
        } => {
            let inst = load_instance(&instance)?;
            let params = AcoParams {
                n_ants: ants,
                n_iterations: iterations,
                alpha,
                beta,
                rho,
                seed,
                local_search,
                ..AcoParams::default()
            };
            let result = run_aco(&inst, &params)?;
            if let Some(p) = &out_trace {
                write(p, &result.trace_csv())?;
            }
            let Some(sol) = &result.best_solution else {
                return Err(Failure::Infeasible(format!(
                    "no feasible solution found in {iterations} iterations"
                )));
            };
            if let Some(p) = &out_solution {
                write(p, &serialize_solution(sol))?;
            }
            if let Some(p) = &out_tree {
                write(p, &to_dot(sol, &inst))?;
            }
            println!("best_cost={}", result.best_cost);
        }
        Command::Oracle {
            instance,
            max_nodes,
            time_budget_s,
            out_solution,
        } => {
            let inst = load_instance(&instance)?;
            if !(time_budget_s.is_finite() && time_budget_s > 0.0) {
                return Err(Failure::Error("time budget must be positive".into()));
            }
            let limits = OracleLimits {
                max_nodes,
                time_budget: Duration::from_secs_f64(time_budget_s),
                prune: true,
            };
            let r = solve_exact(&inst, limits)?;
            eprintln!(
                "trees={} placements={} globally_optimal={}",
                r.trees_enumerated, r.placements_explored, r.globally_optimal
            );
            match (r.cost, &r.solution) {
                (Some(c), Some(sol)) => {
                    if let Some(p) = &out_solution {
                        write(p, &serialize_solution(sol))?;
                    }
                    println!("{c}");
                }
                _ => {
                    println!("infeasible");
                    return Err(Failure::Infeasible(format!("no feasible tree with at most {max_nodes} nodes")));
                }
            }
        }
        Command::Experiment { manifest, out_dir } => {
            let spec = load_manifest(&manifest)?;
            let result = run_batch(&spec)?;
            fs::create_dir_all(&out_dir).map_err(|e| Failure::Error(format!("{}: {e}", out_dir.display())))?;
            write_summary_csv(&result, out_dir.join("summary.csv"))?;
            write_convergence_csv(&result, out_dir.join("convergence.csv"))?;
            for s in &result.sets {
                eprintln!(
                    "set {}: c_min={} c_avg={} cv={}%",
                    s.set.label, s.c_min, s.c_avg, s.cv_percent
                );
            }
        }
        Command::Gen {
            profile,
            u,
            a,
            s,
            seed,
            out,
        } => {
            let settings = GeneratorSettings {
                profile,
                device_types: u,
                loops: a,
                levels: s,
                seed,
                ..GeneratorSettings::default()
            };
            let inst = generate_instance(&settings, seed)?;
            write(&out, &serialize_instance(&inst))?;
        }
        Command::Validate { instance } => {
            let inst = load_instance(&instance)?;
            let bad = validate_instance(&inst);
            if !bad.is_empty() {
                for v in &bad {
                    eprintln!("{v}");
                }
                return Err(Failure::Error(format!("{} violations", bad.len())));
            }
            eprintln!("ok");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Infeasible(m)) => {
            eprintln!("infeasible: {m}");
            ExitCode::from(2)
        }
    }
}
