use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use purex_nmpc::dae::{sweep, SteadyStateSolver};
use purex_nmpc::pipeline::train_pipeline;
use purex_nmpc::scenario::{
    edge_index, run_scenario, RunOptions, Scenario, ScenarioKind, SetPoints,
};
use purex_nmpc::surrogate::load_weights;
use purex_nmpc::{Config, Result};

#[derive(Parser)]
#[command(
    name = "purex-nmpc",
    version,
    about = "Extraction cascade simulator with surrogate MHE/NMPC"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a closed-loop (or open-loop) scenario.
    Run {
        #[arg(long)]
        scenario: ScenarioKind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Apply the steady-state feed flow instead of the controller.
        #[arg(long)]
        open_loop: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate training data and fit the surrogate.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the steady-state output versus feed flow.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 36)]
        points: usize,
        /// Also write the curve as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn run(
    kind: ScenarioKind,
    config: &Path,
    weights: &Path,
    out: &Path,
    opts: RunOptions,
) -> Result<bool> {
    let cfg = Config::from_file(config)?;
    let model = load_weights(weights)?;
    let mut solver = SteadyStateSolver::new(cfg.plant.clone(), cfg.integrator.clone());
    let sp = SetPoints::compute(&mut solver)?;
    let scenario = Scenario::build(kind, &cfg.scenario, &cfg.plant, sp)?;
    log::info!(
        "{kind}: {} h, y_nominal {:.6}, y_plateau {:.6}",
        scenario.duration,
        sp.y_nominal,
        sp.y_plateau
    );
    match run_scenario(&scenario, &cfg, &model, opts) {
        Ok(output) => {
            output.save(out)?;
            print!("{}", output.metrics.to_text());
            Ok(true)
        }
        Err(abort) => {
            abort.partial.save(out)?;
            eprintln!("error: {}", abort.error);
            eprintln!("partial record written to {}", out.display());
            Ok(false)
        }
    }
}

fn sweep_cmd(config: &Path, points: usize, csv: Option<&PathBuf>) -> Result<()> {
    let cfg = Config::from_file(config)?;
    let q = cfg.plant.q_nominal;
    let mut solver = SteadyStateSolver::new(cfg.plant.clone(), cfg.integrator.clone());
    let summary = sweep(&mut solver, q, points)?;
    let mut text = String::from("u,y,z,edge\n");
    for p in &summary.points {
        let edge = edge_index(&solver.solve(p.u, q)?.settler_aq_uranium());
        let edge = edge.map(|e| e.to_string()).unwrap_or_default();
        text.push_str(&format!("{},{},{},{}\n", p.u, p.y, p.z, edge));
    }
    print!("{text}");
    println!("# u_knee = {:.6}", summary.u_knee);
    println!("# y_plateau = {:.6}", summary.y_plateau);
    println!("# y_nominal = {:.6}", summary.y_nominal);
    println!("# nominal_ratio = {:.4}", summary.nominal_ratio);
    if let Some(path) = csv {
        std::fs::write(path, text).map_err(|e| purex_nmpc::Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            scenario,
            config,
            weights,
            out,
            open_loop,
            seed,
        } => run(
            *scenario,
            config,
            weights,
            out,
            RunOptions {
                open_loop: *open_loop,
                seed: *seed,
            },
        ),
        Command::Train { config, out } => {
            let cfg = Config::from_file(config);
            cfg.and_then(|c| train_pipeline(&c, out)).map(|r| {
                print!("{}", r.to_text());
                true
            })
        }
        Command::Sweep {
            config,
            points,
            csv,
        } => sweep_cmd(config, *points, csv.as_ref()).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
