use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dynbc::config::RunConfig;
use dynbc::output::{self, check_table, num, resolve_output_dir};
use dynbc::scenario::{self, Level, ScenarioError};
use dynbc_core::build_operators;
use log::error;

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "dynbc", version, about = "Regularized solver for degenerate parabolic problems with dynamic boundary conditions")]
struct Cli {
    /// Output directory (overrides `output.directory`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the discrete Poincare constants of the configured geometry.
    #[arg(long, global = true)]
    report_cp: bool,
    /// Write the stiffness matrix triplets to `stiffness.txt` in the output directory.
    #[arg(long, global = true)]
    dump_operators: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one configuration and check every estimate.
    Run { config: PathBuf },
    /// Solve for several lambdas on the same data and tabulate successive distances.
    SweepLambda {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
    },
    /// Solve from two random initial data and check the contraction.
    Contraction {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1, default_value = "1,2")]
        seeds: Vec<u64>,
    },
    /// Error against the single-mode solution over refinement levels `NXxNY:TAU`.
    Converge {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<Level>,
    },
    /// Tabulate graph, resolvent, Yosida map and envelope.
    GraphTable {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,0.1,0.01")]
        lambda: Vec<f64>,
        #[arg(long, default_value_t = -3.0, allow_negative_numbers = true)]
        from: f64,
        #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
        to: f64,
        #[arg(long, default_value_t = 61)]
        points: usize,
    },
    /// Recompute the report of a stored run directory.
    Verify { dir: PathBuf },
}

fn load(path: &Path) -> Result<RunConfig, u8> {
    RunConfig::load(path).map_err(|e| {
        report_config_error(path, &ScenarioError::Config(e));
        EXIT_CONFIG
    })
}

fn report_config_error(path: &Path, e: &ScenarioError) {
    match e {
        ScenarioError::Config(c) if !c.violations().is_empty() => {
            for v in c.violations() {
                match v.line {
                    Some(line) => eprintln!("{}:{line}: {}: {}", path.display(), v.key, v.message),
                    None => eprintln!("{}: {}: {}", path.display(), v.key, v.message),
                }
            }
        }
        _ => eprintln!("{}: {e}", path.display()),
    }
}

fn exit_code(e: &ScenarioError) -> u8 {
    match e {
        ScenarioError::Config(_) | ScenarioError::Setup(_) | ScenarioError::Manufactured(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn out_dir(cli: &Cli, config: &RunConfig) -> PathBuf {
    resolve_output_dir(cli.out.as_deref().unwrap_or(&config.output.directory))
}

fn extras(cli: &Cli, config: &RunConfig, dir: &Path) -> Result<(), ScenarioError> {
    if cli.report_cp {
        let pc = scenario::poincare_report(config)?;
        println!("mu1 = {}", num(pc.mu1));
        println!("c_P = {}", num(pc.c_p));
        println!("C_emb = {}", num(pc.c_emb));
    }
    if cli.dump_operators {
        let ops = build_operators(config.geometry())?;
        std::fs::create_dir_all(dir).map_err(|e| ScenarioError::Setup(format!("{}: {e}", dir.display())))?;
        let path = dir.join("stiffness.txt");
        let file = std::fs::File::create(&path).map_err(|e| ScenarioError::Setup(format!("{}: {e}", path.display())))?;
        ops.dump_stiffness(std::io::BufWriter::new(file))
            .map_err(|e| ScenarioError::Setup(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn fail(path: &Path) -> impl Fn(ScenarioError) -> u8 + '_ {
    move |e| {
        if exit_code(&e) == EXIT_CONFIG {
            report_config_error(path, &e);
        } else {
            error!("{e}");
            eprintln!("error: {e}");
        }
        exit_code(&e)
    }
}

fn execute(cli: &Cli) -> Result<u8, u8> {
    match &cli.command {
        Command::Run { config } => {
            let cfg = load(config)?;
            let dir = out_dir(cli, &cfg);
            extras(cli, &cfg, &dir).map_err(fail(config))?;
            let outcome = scenario::run_config(cfg, Some(&dir)).map_err(fail(config))?;
            print!("{}", check_table(&outcome.report));
            println!("output: {}", dir.display());
            Ok(if outcome.report.all_structural_pass { 0 } else { EXIT_FAIL })
        }
        Command::SweepLambda { config, lambdas } => {
            let cfg = load(config)?;
            let dir = out_dir(cli, &cfg);
            extras(cli, &cfg, &dir).map_err(fail(config))?;
            let outcome = scenario::sweep_lambda(cfg, lambdas, Some(&dir)).map_err(fail(config))?;
            print!("{}", scenario::lambda_table_csv(&outcome.table));
            let structural = outcome.reports.iter().all(|r| r.all_structural_pass);
            println!(
                "distances strictly decreasing: {}",
                if outcome.table.strictly_decreasing { "yes" } else { "no" }
            );
            Ok(if structural && outcome.table.strictly_decreasing { 0 } else { EXIT_FAIL })
        }
        Command::Contraction { config, seeds } => {
            let cfg = load(config)?;
            let [a, b] = seeds.as_slice() else {
                eprintln!("--seeds takes exactly two values");
                return Err(EXIT_CONFIG);
            };
            let dir = out_dir(cli, &cfg);
            extras(cli, &cfg, &dir).map_err(fail(config))?;
            let outcome = scenario::contraction_pair(cfg, (*a, *b), Some(&dir)).map_err(fail(config))?;
            let r = &outcome.record;
            println!(
                "{}: {} measured = {} bound = {}",
                r.name,
                r.status.label(),
                num(r.measured),
                num(r.bound)
            );
            Ok(if r.passed() { 0 } else { EXIT_FAIL })
        }
        Command::Converge { config, levels } => {
            let cfg = load(config)?;
            let dir = out_dir(cli, &cfg);
            extras(cli, &cfg, &dir).map_err(fail(config))?;
            let table = scenario::convergence_study(cfg, levels, Some(&dir)).map_err(fail(config))?;
            print!("{}", scenario::convergence_csv(&table));
            let (lo, hi) = table.kind.band();
            println!("{:?} order band [{lo}, {hi}]: {}", table.kind, if table.pass { "PASS" } else { "FAIL" });
            Ok(if table.pass { 0 } else { EXIT_FAIL })
        }
        Command::GraphTable {
            config,
            lambda,
            from,
            to,
            points,
        } => {
            let cfg = load(config)?;
            let dir = out_dir(cli, &cfg);
            extras(cli, &cfg, &dir).map_err(fail(config))?;
            let table = scenario::graph_table(&cfg, lambda, (*from, *to, *points)).map_err(fail(config))?;
            output::write_file(&dir.join("graph_table.csv"), &table).map_err(|e| fail(config)(e.into()))?;
            println!("output: {}", dir.join("graph_table.csv").display());
            Ok(0)
        }
        Command::Verify { dir } => {
            let outcome = scenario::verify_dir(dir).map_err(fail(dir))?;
            print!("{}", check_table(&outcome.report));
            match &outcome.stored_report {
                Some(_) if outcome.identical => println!("report.json reproduced exactly"),
                Some(_) => println!("report.json differs from the recomputed report"),
                None => println!("no stored report.json"),
            }
            let ok = outcome.report.all_structural_pass && (outcome.identical || outcome.stored_report.is_none());
            Ok(if ok { 0 } else { EXIT_FAIL })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) | Err(code) => ExitCode::from(code),
    }
}
