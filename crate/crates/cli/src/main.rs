//! `ertrans`: transducer simulations and spin-Hamiltonian spectroscopy.

mod commands;
mod config;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::Context;
use config::{RunConfig, SweepParameter};

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or input files; exit code 2.
    Config(String),
    /// Numerical or I/O failure while running; exit code 1.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ertrans_core::Error> for CliError {
    fn from(e: ertrans_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "ertrans", version, about = "Dark-state microwave-optical transduction and 167Er:YSO spin spectroscopy")]
struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides [output] dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Worker threads for sweeps; 0 uses all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override one config key, e.g. `--set protocol.temperature_mK=0`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Transfer protocol simulations.
    Protocol {
        #[command(subcommand)]
        command: ProtocolCommand,
    },
    /// Spin-Hamiltonian spectroscopy.
    Spin {
        #[command(subcommand)]
        command: SpinCommand,
    },
    /// Regenerate the data behind one figure or table.
    Reproduce { target: Target },
}

#[derive(Subcommand, Debug)]
enum ProtocolCommand {
    /// One transfer: efficiency, noise and fidelity plus the trajectory.
    Run,
    /// Sweep one parameter over the [sweep] grid.
    Sweep {
        #[arg(long)]
        param: Option<SweepParameter>,
        #[arg(long)]
        start: Option<f64>,
        #[arg(long)]
        stop: Option<f64>,
        #[arg(long)]
        step: Option<f64>,
        /// Skip the thermal runs.
        #[arg(long)]
        efficiency_only: bool,
    },
}

#[derive(clap::Args, Debug)]
struct FieldArg {
    /// Static field in tesla, `D1,D2,b`.
    #[arg(long = "B", value_name = "BX,BY,BZ", allow_hyphen_values = true)]
    b: Option<String>,
}

#[derive(Subcommand, Debug)]
enum SpinCommand {
    /// The 16 level frequencies, ascending.
    Levels {
        #[command(flatten)]
        field: FieldArg,
    },
    /// Transitions in a frequency window, longest T2 first.
    Transitions {
        #[command(flatten)]
        field: FieldArg,
        /// GHz, `lo:hi`.
        #[arg(long)]
        window: Option<String>,
    },
    /// Levels along a field ramp.
    Sweep {
        /// `D1`, `D2`, `b` or `x,y,z`.
        #[arg(long, allow_hyphen_values = true)]
        axis: Option<String>,
        #[arg(long = "Bmax")]
        b_max: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Transitions with vanishing first-order Zeeman shift.
    Zefoz {
        #[command(flatten)]
        field: FieldArg,
        /// S1 threshold, MHz/T.
        #[arg(long)]
        tol: Option<f64>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Target {
    Fig2,
    Fig3a,
    Fig3b,
    #[value(name = "figA1")]
    FigA1,
    #[value(name = "figA2")]
    FigA2,
    Table1,
    Zefoz,
    Tfinal,
}

fn parse_vector(text: &str, what: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<_> = text.split(',').map(|s| s.trim().parse::<f64>()).collect();
    match parts.as_slice() {
        [Ok(x), Ok(y), Ok(z)] => Ok([*x, *y, *z]),
        _ => Err(CliError::Config(format!("{what} expects three comma-separated numbers, got `{text}`"))),
    }
}

fn parse_axis(text: &str) -> Result<[f64; 3], CliError> {
    match text {
        "D1" | "d1" => Ok([1.0, 0.0, 0.0]),
        "D2" | "d2" => Ok([0.0, 1.0, 0.0]),
        "b" => Ok([0.0, 0.0, 1.0]),
        other => parse_vector(other, "--axis"),
    }
}

fn parse_window(text: &str) -> Result<[f64; 2], CliError> {
    let bad = || CliError::Config(format!("--window expects `lo:hi` in GHz, got `{text}`"));
    let (lo, hi) = text.split_once(':').ok_or_else(bad)?;
    Ok([lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?])
}

/// Apply `section.key=value` overrides by editing the TOML tree, so unknown
/// keys and type errors surface exactly as they would from a file.
fn apply_overrides(cfg: RunConfig, overrides: &[String]) -> Result<RunConfig, CliError> {
    if overrides.is_empty() {
        return Ok(cfg);
    }
    let mut doc: toml::Table = toml::from_str(&cfg.to_toml()).expect("config re-parses");
    for o in overrides {
        let (path, value) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects SECTION.KEY=VALUE, got `{o}`")))?;
        let (section, key) = path
            .split_once('.')
            .ok_or_else(|| CliError::Config(format!("--set key `{path}` needs a section, e.g. protocol.{path}")))?;
        let parsed: toml::Value = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let table = doc
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{section}` is not a section")))?;
        table.insert(key.to_string(), parsed);
    }
    RunConfig::from_toml_str(&toml::to_string(&doc).expect("table serializes"))
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut cfg = apply_overrides(cfg, &cli.overrides)?;
    if let Some(dir) = &cli.out {
        cfg.output.dir = dir.clone();
    }
    if let Some(w) = cli.workers {
        cfg.sweep.workers = w;
    }
    match &cli.command {
        Some(Command::Protocol {
            command:
                ProtocolCommand::Sweep {
                    param,
                    start,
                    stop,
                    step,
                    efficiency_only,
                },
        }) => {
            let s = &mut cfg.sweep;
            if let Some(p) = param {
                s.parameter = *p;
            }
            s.start = start.unwrap_or(s.start);
            s.stop = stop.unwrap_or(s.stop);
            s.step = step.unwrap_or(s.step);
            if *efficiency_only {
                s.noise_and_fidelity = false;
            }
        }
        Some(Command::Spin { command }) => {
            let s = &mut cfg.spin;
            match command {
                SpinCommand::Levels { field } => {
                    if let Some(b) = &field.b {
                        s.B_T = parse_vector(b, "--B")?;
                    }
                }
                SpinCommand::Transitions { field, window } => {
                    if let Some(b) = &field.b {
                        s.B_T = parse_vector(b, "--B")?;
                    }
                    if let Some(w) = window {
                        s.window_GHz = parse_window(w)?;
                    }
                }
                SpinCommand::Sweep { axis, b_max, steps } => {
                    if let Some(a) = axis {
                        s.sweep_axis = parse_axis(a)?;
                    }
                    s.sweep_Bmax_T = b_max.unwrap_or(s.sweep_Bmax_T);
                    s.sweep_steps = steps.unwrap_or(s.sweep_steps);
                }
                SpinCommand::Zefoz { field, tol } => {
                    if let Some(b) = &field.b {
                        s.B_T = parse_vector(b, "--B")?;
                    }
                    s.zefoz_tol_MHz_per_T = tol.unwrap_or(s.zefoz_tol_MHz_per_T);
                }
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Config("no command given; see --help".into()));
    };
    let ctx = Context {
        out: cfg.output.dir.clone(),
        command: std::env::args().collect::<Vec<_>>().join(" "),
        cfg,
    };
    match command {
        Command::Protocol { command } => match command {
            ProtocolCommand::Run => ctx.protocol_run(),
            ProtocolCommand::Sweep { .. } => ctx.protocol_sweep(),
        },
        Command::Spin { command } => match command {
            SpinCommand::Levels { .. } => ctx.spin_levels(),
            SpinCommand::Transitions { .. } => ctx.spin_transitions("transitions.csv", None),
            SpinCommand::Sweep { .. } => ctx.spin_sweep("spin_sweep.csv"),
            SpinCommand::Zefoz { .. } => ctx.spin_zefoz("zefoz.csv"),
        },
        Command::Reproduce { target } => match target {
            Target::Fig2 => ctx.reproduce_fig2(),
            Target::Fig3a => ctx.reproduce_fig3a(),
            Target::Fig3b => ctx.reproduce_fig3b(),
            Target::FigA1 => ctx.reproduce_fig_a1(),
            Target::FigA2 => ctx.spin_sweep("figA2.csv"),
            Target::Table1 => ctx.spin_transitions("table1.csv", Some(commands::TABLE1_ROWS)),
            Target::Zefoz => ctx.spin_zefoz("zefoz.csv"),
            Target::Tfinal => ctx.reproduce_tfinal(),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(match e {
                CliError::Config(_) => 2,
                CliError::Runtime(_) => 1,
            })
        }
    }
}
