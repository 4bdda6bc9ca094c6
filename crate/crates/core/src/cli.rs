//! Command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{self, LoadedConfig};
use crate::error::Error;
use crate::harness::{run_closed_loop, scenario_bank, Metrics, Noise, SimRow, KELVIN};
use crate::integrator::simulate_open_loop;
use crate::linmodel::LinearModel;

#[derive(Debug, Parser)]
#[command(
    name = "polydmc",
    version,
    about = "Batch MMA reactor simulation, linearization and DMC"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Open-loop simulation under the `[simulate]` power program.
    Simulate(CommonArgs),
    /// Build the model bank and write it as TOML.
    Linearize(CommonArgs),
    /// Write the step response of every bank model.
    StepResponse(CommonArgs),
    /// Closed-loop batch run with metrics.
    Run(CommonArgs),
    /// Parse and check a configuration without running it.
    ValidateConfig(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Noise seed; overrides the one in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable measurement noise.
    #[arg(long)]
    pub no_noise: bool,
}

/// Written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub seed: u64,
    pub version: String,
    pub out_dir: String,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Model(#[from] Error),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Model(e) if e.is_config() => 2,
            CliError::Model(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Run one subcommand; returns the text for stdout.
pub fn execute(command: &Command) -> CliResult<String> {
    let (name, args) = match command {
        Command::Simulate(a) => ("simulate", a),
        Command::Linearize(a) => ("linearize", a),
        Command::StepResponse(a) => ("step-response", a),
        Command::Run(a) => ("run", a),
        Command::ValidateConfig(a) => ("validate-config", a),
    };
    let (cfg, seed) = load(args)?;
    if name == "validate-config" {
        return Ok(format!(
            "{}: ok ({} samples, {} breakpoints)\n",
            args.config.display(),
            cfg.scenario.n_samples(),
            cfg.scenario.breakpoints.len()
        ));
    }
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let summary = match name {
        "simulate" => cmd_simulate(&cfg, &args.out)?,
        "linearize" => cmd_linearize(&cfg, &args.out)?,
        "step-response" => cmd_step_response(&cfg, &args.out)?,
        _ => cmd_run(&cfg, &args.out)?,
    };
    let manifest = RunManifest {
        command: name.into(),
        config: args.config.display().to_string(),
        seed,
        version: env!("CARGO_PKG_VERSION").into(),
        out_dir: args.out.display().to_string(),
    };
    write(&args.out.join("manifest.toml"), &to_toml(&manifest)?)?;
    Ok(summary)
}

/// Load the configuration and apply the command-line overrides.
pub fn load(args: &CommonArgs) -> CliResult<(LoadedConfig, u64)> {
    let mut cfg = config::load(&args.config)?;
    let noise = &mut cfg.scenario.noise;
    let seed = match noise {
        Noise::Gaussian { seed, .. } => {
            if let Some(s) = args.seed {
                *seed = s;
            }
            *seed
        }
        Noise::None => args.seed.unwrap_or(0),
    };
    if args.no_noise {
        *noise = Noise::None;
    }
    Ok((cfg, seed))
}

#[derive(Serialize)]
struct OpenLoopRow {
    t: f64,
    power: f64,
    x: f64,
    i_conc: f64,
    #[serde(rename = "T_reactor")]
    t_reactor: f64,
    #[serde(rename = "T_jacket")]
    t_jacket: f64,
}

pub fn cmd_simulate(cfg: &LoadedConfig, out: &Path) -> CliResult<String> {
    let sc = &cfg.scenario;
    let profile = cfg.open_loop_profile();
    let run = simulate_open_loop(&sc.initial_state, &profile, &sc.plant, &sc.integrator)?;
    let rows: Vec<OpenLoopRow> = run
        .states
        .iter()
        .enumerate()
        .map(|(k, s)| OpenLoopRow {
            t: k as f64 * sc.dmc.ts,
            power: profile[k.min(profile.len() - 1)],
            x: s.x,
            i_conc: s.i_conc,
            t_reactor: s.t_reactor - KELVIN,
            t_jacket: s.t_jacket - KELVIN,
        })
        .collect();
    let path = out.join("simulate.csv");
    write(&path, &to_csv(&rows)?)?;
    let last = run.states.last().expect("at least the initial state");
    let mut s = format!(
        "wrote {} ({} rows); final x = {:.4}, T = {:.3} °C\n",
        path.display(),
        rows.len(),
        last.x,
        last.t_reactor - KELVIN
    );
    if !run.clamp_events.is_empty() {
        let _ = writeln!(s, "state clamped at {} samples", run.clamp_events.len());
    }
    Ok(s)
}

#[derive(Serialize)]
struct BankFile {
    model: Vec<ModelBlock>,
}

#[derive(Serialize)]
struct ModelBlock {
    index: usize,
    time_s: f64,
    /// x, [I] (mol/L), T (K), T_j (K).
    state_s: [f64; 4],
    power_s: f64,
    a: Vec<[f64; 4]>,
    b: [f64; 4],
    c: [f64; 4],
    tf_num: [f64; 4],
    tf_den: [f64; 5],
    #[serde(skip_serializing_if = "Option::is_none")]
    dc_gain: Option<f64>,
    integrating: bool,
    n_settle: usize,
    max_real_eig: f64,
    a33_reaction: f64,
    step_response: Vec<f64>,
}

fn model_block(index: usize, m: &LinearModel) -> ModelBlock {
    let s = m.op.state_s;
    ModelBlock {
        index,
        time_s: m.op.time_s,
        state_s: [s.x, s.i_conc, s.t_reactor, s.t_jacket],
        power_s: m.op.power_s,
        a: (0..4)
            .map(|i| {
                [
                    m.a_mat[(i, 0)],
                    m.a_mat[(i, 1)],
                    m.a_mat[(i, 2)],
                    m.a_mat[(i, 3)],
                ]
            })
            .collect(),
        b: m.b_vec.into(),
        c: [m.c_vec[0], m.c_vec[1], m.c_vec[2], m.c_vec[3]],
        tf_num: m.tf.num,
        tf_den: m.tf.den,
        dc_gain: m.dc_gain,
        integrating: m.is_integrating(),
        n_settle: m.n_settle,
        max_real_eig: m.max_real_eig,
        a33_reaction: m.a33_reaction,
        step_response: m.step_resp.clone(),
    }
}

pub fn cmd_linearize(cfg: &LoadedConfig, out: &Path) -> CliResult<String> {
    let bank = scenario_bank(&cfg.scenario)?;
    let file = BankFile {
        model: bank
            .iter()
            .enumerate()
            .map(|(i, m)| model_block(i, m))
            .collect(),
    };
    let path = out.join("bank.toml");
    write(&path, &to_toml(&file)?)?;
    let mut s = format!("wrote {} ({} models)\n", path.display(), bank.len());
    for (i, m) in bank.iter().enumerate() {
        let _ = writeln!(
            s,
            "model {i}: t = {} s, T_s = {:.2} °C, P_s = {:.1} W, N = {}, max Re(eig) = {:.3e} 1/s",
            m.op.time_s,
            m.op.state_s.t_reactor - KELVIN,
            m.op.power_s,
            m.n_settle,
            m.max_real_eig
        );
    }
    Ok(s)
}

pub fn cmd_step_response(cfg: &LoadedConfig, out: &Path) -> CliResult<String> {
    let bank = scenario_bank(&cfg.scenario)?;
    let len = bank.iter().map(|m| m.step_resp.len()).max().unwrap_or(0);
    let columns: Vec<Vec<f64>> = bank.iter().map(|m| m.discrete.step_samples(len)).collect();
    let ts = cfg.scenario.dmc.ts;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["k".to_string(), "t".to_string()];
    header.extend((0..bank.len()).map(|i| format!("g_model{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for k in 0..len {
        let mut rec = vec![(k + 1).to_string(), ((k + 1) as f64 * ts).to_string()];
        rec.extend(columns.iter().map(|c| c[k].to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let text = String::from_utf8(w.into_inner().map_err(|e| CliError::Io(e.to_string()))?)
        .expect("csv output is UTF-8");
    let path = out.join("step_response.csv");
    write(&path, &text)?;
    Ok(format!(
        "wrote {} ({} models, {len} samples)\n",
        path.display(),
        bank.len()
    ))
}

#[derive(Serialize)]
struct MetricsFile {
    metrics: Metrics,
    samples: usize,
    models: usize,
    switch_times: Vec<f64>,
}

pub fn cmd_run(cfg: &LoadedConfig, out: &Path) -> CliResult<String> {
    let result = run_closed_loop(&cfg.scenario)?;
    let ts = cfg.scenario.dmc.ts;
    write(&out.join("run.csv"), &to_csv(&result.rows)?)?;
    write(&out.join("run.dat"), &gnuplot_table(&result.rows))?;
    let file = MetricsFile {
        metrics: result.metrics,
        samples: result.rows.len(),
        models: result.bank.len(),
        switch_times: result.switches.iter().map(|&k| k as f64 * ts).collect(),
    };
    write(&out.join("metrics.toml"), &to_toml(&file)?)?;
    let m = result.metrics;
    Ok(format!(
        "mae = {:.4} °C, max_err = {:.4} °C, rmse = {:.4} °C, final_err = {:.4} °C, saturated = {:.1} %\n",
        m.mae,
        m.max_err,
        m.rmse,
        m.final_err,
        100.0 * m.saturated_fraction
    ))
}

/// Whitespace-separated columns with a commented header, for gnuplot.
pub fn gnuplot_table(rows: &[SimRow]) -> String {
    let mut s = String::from("# t y_sp y_d T_true T_meas T_jacket u active_model\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {}",
            r.t, r.y_sp, r.y_d, r.t_true, r.t_meas, r.t_jacket, r.u, r.active_model
        );
    }
    s
}

fn to_csv<T: Serialize>(rows: &[T]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn to_toml<T: Serialize>(value: &T) -> CliResult<String> {
    toml::to_string(value).map_err(|e| CliError::Io(format!("serializing output: {e}")))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}
