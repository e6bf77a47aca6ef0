use std::fmt::Display;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};
use hitl_sgraph::metrics::{self, MetricsRow, CSV_HEADER};
use hitl_sgraph::simulator::{
    evaluate, load_log, load_scenario, presets, run_pipeline, save_log, simulate, tum, PipelineEngine,
    PipelineOptions, Scenario, SimulationLog,
};
use hitl_sgraph_service::{server, Hub};

#[derive(Parser)]
#[command(name = "hitl-sgraph", version, about = "Semantic SLAM with operator-in-the-loop room creation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write the sensor log.
    Sim {
        /// Preset name (noiseless, occlusion, noisy) or path to a scenario JSON file.
        #[arg(long)]
        scenario: String,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the pipeline headlessly over a log and report metrics.
    Run {
        #[arg(long)]
        log: PathBuf,
        /// Apply the scenario's scripted operator interventions.
        #[arg(long)]
        interventions: bool,
        /// Confidence multiplier for operator rooms (> 1).
        #[arg(long)]
        kappa: Option<f64>,
        /// CSV file for the metrics row; printed to stdout when absent.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Estimated trajectory in TUM format.
        #[arg(long)]
        traj: Option<PathBuf>,
    },
    /// Print the ATE between two TUM trajectories.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        no_align: bool,
    },
    /// Replay a simulated scenario live for browser clients.
    Serve {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = server::DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        /// Replay speed relative to log time; 0 steps only on POST /step.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Directory of static UI assets.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        #[arg(long)]
        kappa: Option<f64>,
        /// Also apply the scenario's scripted interventions.
        #[arg(long)]
        scripted_interventions: bool,
    },
    /// Baseline vs interventions over several seeds, as CSV on stdout.
    Compare {
        #[arg(long)]
        scenario: String,
        /// `1..5` (inclusive) or `1,2,3`.
        #[arg(long, value_parser = parse_seeds)]
        seeds: Seeds,
        #[arg(long)]
        kappa: Option<f64>,
    },
}

#[derive(Debug, Clone)]
struct Seeds(Vec<u64>);

fn parse_seeds(s: &str) -> Result<Seeds, String> {
    let bad = |e: std::num::ParseIntError| format!("bad seed in {s:?}: {e}");
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (a.trim().parse::<u64>().map_err(bad)?, b.trim().parse::<u64>().map_err(bad)?);
        if a > b {
            return Err(format!("empty seed range {s:?}"));
        }
        (a..=b).collect()
    } else {
        s.split(',').map(|x| x.trim().parse::<u64>().map_err(bad)).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(Seeds(seeds))
}

enum Failure {
    Input(String),
    Diverged(String),
}

trait OrInput<T> {
    fn input(self, what: &str) -> Result<T, Failure>;
}

impl<T, E: Display> OrInput<T> for Result<T, E> {
    fn input(self, what: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input(format!("{what}: {e}")))
    }
}

fn scenario(spec: &str, seed: Option<u64>) -> Result<Scenario, Failure> {
    let mut s = match presets::get(spec) {
        Some(text) => Scenario::from_json(text).input(spec)?,
        None => load_scenario(spec).input(spec)?,
    };
    if let Some(seed) = seed {
        s.seed = seed;
    }
    Ok(s)
}

fn options(interventions: bool, kappa: Option<f64>) -> PipelineOptions {
    let mut o = PipelineOptions { interventions, ..PipelineOptions::default() };
    if let Some(k) = kappa {
        o.kappa = k;
    }
    o
}

fn method(interventions: bool) -> &'static str {
    if interventions {
        "hitl"
    } else {
        "baseline"
    }
}

/// Metrics row and trajectory for one log, and whether optimization diverged.
fn run_one(log: &SimulationLog, opts: &PipelineOptions) -> Result<(MetricsRow, Vec<(f64, hitl_sgraph::geometry::Pose)>, bool), Failure> {
    let result = run_pipeline(log, opts).input("pipeline")?;
    let eval = evaluate(log, &result.graph).input("evaluation")?;
    for iv in &result.report.interventions {
        log::info!("intervention at t={}: {:?}", iv.time, iv.status);
    }
    let row = eval.row(&log.scenario.name, log.scenario.seed, method(opts.interventions));
    Ok((row, result.trajectory, result.report.diverged))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).input(&path.display().to_string())
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Sim { scenario: spec, seed, out } => {
            let s = scenario(&spec, seed)?;
            let log = simulate(&s);
            for w in &log.warnings {
                log::warn!("{w}");
            }
            save_log(&log, &out).input("writing log")?;
            eprintln!("{}: {} keyframes, seed {} -> {}", s.name, log.keyframes.len(), s.seed, out.display());
        }
        Command::Run { log, interventions, kappa, metrics, traj } => {
            let log = load_log(&log).input(&log.display().to_string())?;
            let (row, trajectory, diverged) = run_one(&log, &options(interventions, kappa))?;
            let csv = format!("{CSV_HEADER}\n{}\n", row.to_csv());
            match metrics {
                Some(path) => write_file(&path, &csv)?,
                None => print!("{csv}"),
            }
            if let Some(path) = traj {
                tum::write(&path, &trajectory).input("writing trajectory")?;
            }
            if diverged {
                return Err(Failure::Diverged("optimization diverged; outputs hold the last finite estimate".into()));
            }
        }
        Command::Eval { est, gt, no_align } => {
            let e = tum::read(&est).input(&est.display().to_string())?;
            let g = tum::read(&gt).input(&gt.display().to_string())?;
            let value = metrics::ate(&e, &g, !no_align).input("ate")?;
            println!("{value:.6}");
        }
        Command::Serve { scenario: spec, seed, port, bind, speed, ui_dir, kappa, scripted_interventions } => {
            if !(speed >= 0.0 && speed.is_finite()) {
                return Err(Failure::Input(format!("--speed must be a non-negative number, got {speed}")));
            }
            let s = scenario(&spec, seed)?;
            let engine = PipelineEngine::new(simulate(&s), options(scripted_interventions, kappa)).input("session")?;
            let hub = Arc::new(Hub::new(engine));
            let runtime = tokio::runtime::Runtime::new().input("runtime")?;
            runtime.block_on(async move {
                let addr = SocketAddr::new(bind, port);
                let listener = tokio::net::TcpListener::bind(addr).await.input(&format!("binding {addr}"))?;
                eprintln!("serving {} (seed {}) on ws://{addr}/ws, speed {speed}", s.name, s.seed);
                server::serve(listener, hub, ui_dir, speed).await.input("server")
            })?;
        }
        Command::Compare { scenario: spec, seeds, kappa } => {
            let started = Instant::now();
            let base = scenario(&spec, None)?;
            let mut rows = Vec::new();
            let mut diverged = false;
            for seed in &seeds.0 {
                let log = simulate(&Scenario { seed: *seed, ..base.clone() });
                for on in [false, true] {
                    let (row, _, d) = run_one(&log, &options(on, kappa))?;
                    diverged |= d;
                    rows.push(row);
                }
            }
            println!("{CSV_HEADER}");
            for row in &rows {
                println!("{}", row.to_csv());
            }
            summarize(&rows, started.elapsed().as_secs_f64());
            if diverged {
                return Err(Failure::Diverged("at least one run diverged".into()));
            }
        }
    }
    Ok(())
}

fn summarize(rows: &[MetricsRow], seconds: f64) {
    let pick = |m: &str| rows.iter().filter(|r| r.method == m).collect::<Vec<_>>();
    let (base, hitl) = (pick("baseline"), pick("hitl"));
    let n = base.len() as f64;
    let mean = |rs: &[&MetricsRow], f: fn(&MetricsRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
    let better = base.iter().zip(&hitl).filter(|(b, h)| h.ate_m <= b.ate_m).count();
    eprintln!("method    ate_m      map_rmse_m  precision  recall");
    for (name, rs) in [("baseline", &base), ("hitl", &hitl)] {
        eprintln!(
            "{name:<9} {:<10.6} {:<11.6} {:<10.3} {:.3}",
            mean(rs, |r| r.ate_m),
            mean(rs, |r| r.map_rmse_m),
            mean(rs, |r| r.precision),
            mean(rs, |r| r.recall)
        );
    }
    eprintln!("hitl ATE <= baseline on {better}/{} seeds ({seconds:.1} s)", base.len());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HITL_SGRAPH_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Diverged(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
