use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use rwu_core::control::{closed_loop, discrete_blocks, spectral_radius, synthesize, LqrWeights};
use rwu_core::dynamics::linearize_upright;
use rwu_core::params::RobotParams;
use rwu_core::sim::{run_scenario, write_csv, ScenarioConfig};
use rwu_core::standup::{derive_pivot_geometry, simulate_standup, PivotId};

/// Exit code for a run that completed but did not succeed.
const CONTROLLED_FAILURE: u8 = 2;

#[derive(Parser)]
#[command(name = "rwu", version, about = "Reaction-wheel unicycle simulation lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario (or every *.json in a directory) and write CSV logs plus summaries
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// CSV file, or output directory when --config is a directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// parallel scenarios for batch directories
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Discretize the upright model and synthesize balance gains
    Lqr {
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, value_enum, conflicts_with = "weights")]
        preset: Option<Preset>,
        /// JSON file with q_roll, r_roll, q_pitch, r_pitch
        #[arg(long)]
        weights: Option<PathBuf>,
        /// actuation delay, in control periods, for the reported closed-loop spectral radius
        #[arg(long, default_value_t = 1)]
        delay: usize,
    },
    /// Planar stand-up feasibility at constant torque
    StandupCheck {
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        torque: f64,
        #[arg(long, allow_hyphen_values = true)]
        omega0: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Paper,
    Identity,
}

fn load_params(path: Option<&Path>) -> Result<RobotParams, String> {
    match path {
        Some(p) => RobotParams::load(p).map_err(|e| format!("{}: {e}", p.display())),
        None => Ok(RobotParams::default()),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<(), String> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(v).map_err(|e| e.to_string())?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        // a closed pipe (`rwu lqr | head`) is not an error
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.to_string()),
        _ => Ok(()),
    }
}

/// Runs one scenario; Ok(success) or Err(message) for usage and config errors.
fn simulate_one(config: &Path, out: &Path, seed: Option<u64>) -> Result<bool, String> {
    let text = fs::read_to_string(config).map_err(|e| format!("{}: {e}", config.display()))?;
    let mut cfg = ScenarioConfig::from_json_str(&text).map_err(|e| format!("{}: {e}", config.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let run = run_scenario(&cfg).map_err(|e| format!("{}: {e}", config.display()))?;
    let file = fs::File::create(out).map_err(|e| format!("{}: {e}", out.display()))?;
    write_csv(&run.rows, std::io::BufWriter::new(file)).map_err(|e| format!("{}: {e}", out.display()))?;
    let summary_path = summary_path(out);
    let json = serde_json::to_string_pretty(&run.summary).map_err(|e| e.to_string())?;
    fs::write(&summary_path, json + "\n").map_err(|e| format!("{}: {e}", summary_path.display()))?;
    Ok(run.summary.success)
}

/// `run.csv` -> `run.summary.json`
fn summary_path(csv: &Path) -> PathBuf {
    csv.with_extension("summary.json")
}

fn cmd_simulate(config: &Path, out: &Path, seed: Option<u64>, jobs: usize) -> Result<bool, String> {
    if !config.is_dir() {
        let ok = simulate_one(config, out, seed)?;
        eprintln!("{}: {}", out.display(), if ok { "success" } else { "failed" });
        return Ok(ok);
    }
    let mut configs: Vec<PathBuf> = fs::read_dir(config)
        .map_err(|e| format!("{}: {e}", config.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    configs.sort();
    if configs.is_empty() {
        return Err(format!("{}: no *.json scenarios", config.display()));
    }
    fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| e.to_string())?;
    let results: Vec<Result<bool, String>> = pool.install(|| {
        configs
            .par_iter()
            .map(|c| {
                let stem = c.file_stem().unwrap_or_default();
                simulate_one(c, &out.join(stem).with_extension("csv"), seed)
            })
            .collect()
    });
    let mut all_ok = true;
    for (c, r) in configs.iter().zip(results) {
        let ok = r?;
        eprintln!("{}: {}", c.display(), if ok { "success" } else { "failed" });
        all_ok &= ok;
    }
    Ok(all_ok)
}

#[derive(Serialize)]
struct BlockReport {
    ad: Vec<Vec<f64>>,
    bd: Vec<f64>,
    /// `u = +k x`
    k: [f64; 4],
    /// closed-loop spectral radius with the requested actuation delay
    rho: f64,
}

#[derive(Serialize)]
struct LqrReport {
    ts: f64,
    /// states: tilt, tilt rate, wheel angle and rate relative to the frame
    roll: BlockReport,
    pitch: BlockReport,
    k1: [f64; 4],
    k2: [f64; 4],
}

fn rows(m: &rwu_core::control::DiscreteBlock) -> (Vec<Vec<f64>>, Vec<f64>) {
    let ad = (0..m.ad.nrows()).map(|i| m.ad.row(i).iter().copied().collect()).collect();
    (ad, m.bd.iter().copied().collect())
}

fn cmd_lqr(params: Option<&Path>, preset: Option<Preset>, weights: Option<&Path>, delay: usize) -> Result<(), String> {
    let p = load_params(params)?;
    let weights = match (weights, preset) {
        (Some(w), _) => {
            let text = fs::read_to_string(w).map_err(|e| format!("{}: {e}", w.display()))?;
            serde_json::from_str::<LqrWeights>(&text).map_err(|e| format!("{}: {e}", w.display()))?
        }
        (None, Some(Preset::Identity)) => LqrWeights::identity(),
        (None, _) => LqrWeights::paper_like(),
    };
    let ts = p.control_period;
    let model = linearize_upright(&p).map_err(|e| e.to_string())?;
    let design = synthesize(&model, &weights, ts).map_err(|e| e.to_string())?;
    let (roll, pitch) = discrete_blocks(&model, ts);
    let rho = |b, k| spectral_radius(&closed_loop(b, k, 1.0, delay));
    let (ra, rb) = rows(&roll);
    let (pa, pb) = rows(&pitch);
    print_json(&LqrReport {
        ts,
        roll: BlockReport { ad: ra, bd: rb, k: design.gains.k1, rho: rho(&roll, &design.gains.k1) },
        pitch: BlockReport { ad: pa, bd: pb, k: design.gains.k2, rho: rho(&pitch, &design.gains.k2) },
        k1: design.gains.k1,
        k2: design.gains.k2,
    })
}

#[derive(Serialize)]
struct StepReport {
    completed: bool,
    sweep_deg: f64,
    duration: f64,
}

#[derive(Serialize)]
struct StandupReport {
    feasible: bool,
    torque: f64,
    omega0: f64,
    static_torque_bound: f64,
    expected_sweeps_deg: [f64; 2],
    gravity_assist_deg: f64,
    steps: Vec<StepReport>,
    peak_omega: f64,
    duration: f64,
}

fn cmd_standup_check(params: Option<&Path>, torque: f64, omega0: f64) -> Result<bool, String> {
    let p = load_params(params)?;
    let c1 = derive_pivot_geometry(&p, PivotId::C1);
    let c2 = derive_pivot_geometry(&p, PivotId::C2);
    let trace = simulate_standup(&p, &torque, omega0).map_err(|e| e.to_string())?;
    print_json(&StandupReport {
        feasible: trace.success,
        torque,
        omega0,
        static_torque_bound: p.static_torque_bound(),
        expected_sweeps_deg: [c1.sweep().to_degrees(), c2.sweep().to_degrees()],
        gravity_assist_deg: c1.gravity_assist_sweep().to_degrees(),
        steps: trace
            .steps
            .iter()
            .map(|s| StepReport { completed: s.completed, sweep_deg: s.sweep.to_degrees(), duration: s.duration })
            .collect(),
        peak_omega: trace.peak_omega,
        duration: trace.duration,
    })?;
    Ok(trace.success)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.cmd {
        Cmd::Simulate { config, out, seed, jobs } => cmd_simulate(config, out, *seed, *jobs),
        Cmd::Lqr { params, preset, weights, delay } => {
            cmd_lqr(params.as_deref(), *preset, weights.as_deref(), *delay).map(|()| true)
        }
        Cmd::StandupCheck { params, torque, omega0 } => cmd_standup_check(params.as_deref(), *torque, *omega0),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(CONTROLLED_FAILURE),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
