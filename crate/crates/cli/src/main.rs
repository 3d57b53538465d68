//! `radfleet`: server, scenario runner, device registry and reports.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::info;
use radfleet_analytics::{ReportTable, YearMonth};
use radfleet_core::wire::{Command, Imei};
use radfleet_server::{
    Clock, DeviceEntry, FleetServer, Listeners, ManualClock, OpenMode, ServerConfig, ServerError, SystemClock,
};
use radfleet_sim::{run_scenario, Scenario, SimError};
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "radfleet", version, about = "Fleet telemetry server, simulator and reports")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Server configuration file.
    #[arg(long, global = true, env = "RADFLEET_CONFIG")]
    config: Option<PathBuf>,
    /// Data directory; overrides the one in the configuration.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run the ingest server (TCP, UDP and HTTP) until interrupted.
    Serve,
    /// Run a scenario file against a fresh store on a virtual clock.
    Simulate(SimulateArgs),
    /// Manage the device registry.
    #[command(subcommand)]
    Device(DeviceCmd),
    /// Print a report from the store.
    #[command(subcommand)]
    Report(ReportCmd),
    /// Rank vehicles by distance from a point.
    Nearest(NearestArgs),
    /// Send a command to a vehicle through the running server.
    Command(CommandArgs),
    /// Load a saved device buffer image (64-byte records) into the store.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the seed in the scenario file.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the per-vehicle report as CSV to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum DeviceCmd {
    Add {
        #[arg(long)]
        imei: String,
        #[arg(long)]
        label: String,
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        tank_l: Option<f64>,
        #[arg(long)]
        speed_limit: Option<f64>,
    },
    List {
        #[arg(long)]
        csv: bool,
    },
    Disable {
        /// Label or IMEI.
        vehicle: String,
    },
    Enable {
        vehicle: String,
    },
}

#[derive(Debug, Args)]
struct Output {
    /// RFC 4180 CSV instead of an aligned table.
    #[arg(long)]
    csv: bool,
}

#[derive(Debug, Subcommand)]
enum ReportCmd {
    /// Kilometres and litres per day of a month.
    Daily {
        #[arg(long)]
        vehicle: String,
        /// YYYY-MM
        #[arg(long)]
        month: YearMonth,
        #[command(flatten)]
        out: Output,
    },
    /// Totals per month over a range of months.
    Monthly {
        #[arg(long)]
        vehicle: String,
        #[arg(long)]
        from: YearMonth,
        #[arg(long)]
        to: YearMonth,
        #[command(flatten)]
        out: Output,
    },
    /// Two months side by side, day by day.
    Compare {
        #[arg(long)]
        vehicle: String,
        #[arg(long = "from", alias = "month-a")]
        month_a: YearMonth,
        #[arg(long = "to", alias = "month-b")]
        month_b: YearMonth,
        #[command(flatten)]
        out: Output,
    },
    /// Fuel use per 10 km/h speed band. Times: epoch ms, RFC 3339 or a local date.
    FuelBySpeed {
        #[arg(long)]
        vehicle: String,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[command(flatten)]
        out: Output,
    },
    /// Trips between stops.
    Trips {
        #[arg(long)]
        vehicle: String,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[command(flatten)]
        out: Output,
    },
    Maintenance {
        #[arg(long)]
        vehicle: String,
        #[command(flatten)]
        out: Output,
    },
    Mission {
        #[arg(long)]
        id: String,
        #[command(flatten)]
        out: Output,
    },
}

#[derive(Debug, Args)]
struct NearestArgs {
    #[arg(long, allow_hyphen_values = true)]
    lat: f64,
    #[arg(long, allow_hyphen_values = true)]
    lon: f64,
    #[arg(long, default_value_t = 10)]
    limit: usize,
    /// Judge staleness as of this time instead of now.
    #[arg(long)]
    at: Option<String>,
    #[command(flatten)]
    out: Output,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("action").required(true).args(["out", "setparam", "getgps"])))]
struct CommandArgs {
    #[arg(long)]
    vehicle: String,
    /// Switch an output line: `LINE=0|1`, e.g. `0=1` engages the immobilizer.
    #[arg(long)]
    out: Option<String>,
    /// Change a tracker parameter: `key=value`.
    #[arg(long)]
    setparam: Option<String>,
    /// Ask for the current position.
    #[arg(long)]
    getgps: bool,
    /// Server HTTP address; defaults to the configured http_listen.
    #[arg(long)]
    server: Option<String>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long)]
    device_buffer_file: PathBuf,
    /// Vehicle the image belongs to (label or IMEI).
    #[arg(long)]
    vehicle: String,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Failed(String),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match (cli.verbose, &cli.command) {
        (0, Cmd::Serve) => log::LevelFilter::Info,
        (0, _) => log::LevelFilter::Warn,
        (1, _) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("RADFLEET_LOG")
        .target(env_logger::Target::Stderr)
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ServerConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => ServerConfig::load(path)?,
        None => ServerConfig::default(),
    };
    if let Some(dir) = &cli.data_dir {
        config.data_dir = dir.clone();
    }
    Ok(config)
}

fn open(cli: &Cli, mode: OpenMode) -> Result<Arc<FleetServer>, CliError> {
    open_at(cli, mode, Arc::new(SystemClock))
}

fn open_at(cli: &Cli, mode: OpenMode, clock: Arc<dyn Clock>) -> Result<Arc<FleetServer>, CliError> {
    let config = load_config(cli)?;
    if mode == OpenMode::ReadOnly && !config.data_dir.is_dir() {
        return Err(CliError::Failed(format!("no data directory at {}", config.data_dir.display())));
    }
    Ok(FleetServer::open(config, clock, mode)?)
}

fn print_table(table: &ReportTable, out: &Output) -> Result<(), CliError> {
    let mut stdout = std::io::stdout().lock();
    if out.csv {
        stdout.write_all(&table.to_csv())?;
    } else {
        stdout.write_all(table.to_text().as_bytes())?;
    }
    stdout.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Cmd::Serve => serve(&cli),
        Cmd::Simulate(args) => simulate(&cli, args),
        Cmd::Device(cmd) => device(&cli, cmd),
        Cmd::Report(cmd) => report(&cli, cmd),
        Cmd::Nearest(args) => nearest(&cli, args),
        Cmd::Command(args) => command(&cli, args),
        Cmd::Replay(args) => replay(&cli, args),
    }
}

fn serve(cli: &Cli) -> Result<(), CliError> {
    let config = load_config(cli)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listeners = Listeners::bind(&config).await?;
        let addrs = listeners.local_addrs()?;
        let server = FleetServer::open(config, Arc::new(SystemClock), OpenMode::ReadWrite)?;
        {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "tcp {}", addrs.tcp)?;
            writeln!(stdout, "udp {}", addrs.udp)?;
            writeln!(stdout, "http {}", addrs.http)?;
            stdout.flush()?;
        }
        info!("serving {} devices from {}", server.devices().len(), server.config().data_dir.display());
        listeners.run(server, shutdown_signal()).await?;
        info!("shut down");
        Ok(())
    })
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

fn simulate(cli: &Cli, args: &SimulateArgs) -> Result<(), CliError> {
    let mut scenario = Scenario::load(&args.scenario)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let scratch;
    let dir: &Path = match &cli.data_dir {
        Some(dir) => {
            if dir.exists() && std::fs::read_dir(dir)?.next().is_some() {
                return Err(CliError::Failed(format!("{} is not empty; scenarios need a fresh store", dir.display())));
            }
            dir
        }
        None => {
            scratch = tempfile::tempdir()?;
            scratch.path()
        }
    };
    let run = run_scenario(&scenario, dir)?;
    let report = run.report;
    if let Some(path) = &args.out {
        let file = std::fs::File::create(path)?;
        report.write_csv(file)?;
    }
    print!("{}", report.summary());
    std::io::stdout().flush()?;
    report.check()?;
    Ok(())
}

fn device(cli: &Cli, cmd: &DeviceCmd) -> Result<(), CliError> {
    let mut table = ReportTable::new(&["imei", "label", "enabled", "class", "tank_l", "speed_limit_kmh"]);
    let row = |d: &DeviceEntry| {
        vec![
            d.imei.clone(),
            d.label.clone(),
            d.enabled.to_string(),
            d.class.clone().unwrap_or_default(),
            d.tank_capacity_l.map(|x| x.to_string()).unwrap_or_default(),
            d.speed_limit_kmh.map(|x| x.to_string()).unwrap_or_default(),
        ]
    };
    let out = match cmd {
        DeviceCmd::Add {
            imei,
            label,
            class,
            tank_l,
            speed_limit,
        } => {
            let imei: Imei = imei.parse().map_err(|e| CliError::Usage(format!("IMEI '{imei}': {e}")))?;
            let server = open(cli, OpenMode::ReadWrite)?;
            let entry = server.add_device(DeviceEntry {
                imei: imei.to_string(),
                label: label.clone(),
                enabled: true,
                class: class.clone(),
                tank_capacity_l: *tank_l,
                speed_limit_kmh: *speed_limit,
                created_at_ms: 0,
            })?;
            table.push(row(&entry));
            Output { csv: false }
        }
        DeviceCmd::List { csv } => {
            let server = open(cli, OpenMode::ReadOnly)?;
            for d in server.devices() {
                table.push(row(&d));
            }
            Output { csv: *csv }
        }
        DeviceCmd::Disable { vehicle } | DeviceCmd::Enable { vehicle } => {
            let server = open(cli, OpenMode::ReadWrite)?;
            let entry = server.set_enabled(vehicle, matches!(cmd, DeviceCmd::Enable { .. }))?;
            table.push(row(&entry));
            Output { csv: false }
        }
    };
    print_table(&table, &out)
}

fn report(cli: &Cli, cmd: &ReportCmd) -> Result<(), CliError> {
    let server = open(cli, OpenMode::ReadOnly)?;
    let (table, out) = match cmd {
        ReportCmd::Daily { vehicle, month, out } => (ReportTable::daily(&server.report_daily(vehicle, *month)?), out),
        ReportCmd::Monthly { vehicle, from, to, out } => {
            (ReportTable::monthly(&server.report_monthly(vehicle, *from, *to)?), out)
        }
        ReportCmd::Compare {
            vehicle,
            month_a,
            month_b,
            out,
        } => (ReportTable::compare(&server.report_compare(vehicle, *month_a, *month_b)?), out),
        ReportCmd::FuelBySpeed { vehicle, from, to, out } => {
            let (from, to) = (time_arg(&server, from)?, time_arg(&server, to)?);
            (ReportTable::fuel_by_speed(&server.report_fuel_by_speed(vehicle, from, to)?), out)
        }
        ReportCmd::Trips { vehicle, from, to, out } => {
            let (from, to) = (time_arg(&server, from)?, time_arg(&server, to)?);
            (ReportTable::trips(&server.report_trips(vehicle, from, to)?.trips), out)
        }
        ReportCmd::Maintenance { vehicle, out } => (ReportTable::maintenance(&server.report_maintenance(vehicle)?), out),
        ReportCmd::Mission { id, out } => (ReportTable::mission(&server.report_mission(id)?), out),
    };
    print_table(&table, out)
}

fn time_arg(server: &FleetServer, s: &str) -> Result<u64, CliError> {
    server.parse_time(s).map_err(|e| CliError::Usage(e.to_string()))
}

fn nearest(cli: &Cli, args: &NearestArgs) -> Result<(), CliError> {
    let server = match &args.at {
        Some(at) => {
            let probe = open(cli, OpenMode::ReadOnly)?;
            let t = time_arg(&probe, at)?;
            drop(probe);
            open_at(cli, OpenMode::ReadOnly, Arc::new(ManualClock::new(t)))?
        }
        None => open(cli, OpenMode::ReadOnly)?,
    };
    let result = server.nearest(args.lat, args.lon, args.limit).map_err(|e| match e {
        ServerError::BadRequest(m) => CliError::Usage(m),
        e => e.into(),
    })?;
    print_table(&ReportTable::nearest(&result), &args.out)
}

fn command(cli: &Cli, args: &CommandArgs) -> Result<(), CliError> {
    let command = if let Some(spec) = &args.out {
        let (line, on) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--out expects LINE=0|1, got '{spec}'")))?;
        format!("OUT {line} {on}")
    } else if let Some(kv) = &args.setparam {
        format!("SETPARAM {kv}")
    } else {
        "GETGPS".to_string()
    };
    command
        .parse::<Command>()
        .map_err(|e| CliError::Usage(format!("command '{command}': {e}")))?;
    let base = match &args.server {
        Some(s) => s.clone(),
        None => load_config(cli)?.http_listen.to_string(),
    };
    let base = if base.starts_with("http://") { base } else { format!("http://{base}") };
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let mut resp = agent
        .post(&format!("{base}/api/commands"))
        .send_json(serde_json::json!({ "vehicle": args.vehicle, "command": command }))
        .map_err(|e| CliError::Failed(format!("server at {base} unreachable: {e}")))?;
    let status = resp.status();
    let body = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| CliError::Failed(format!("reading reply: {e}")))?;
    if !status.is_success() {
        return Err(CliError::Failed(format!("server answered {status}: {body}")));
    }
    println!("{body}");
    Ok(())
}

fn replay(cli: &Cli, args: &ReplayArgs) -> Result<(), CliError> {
    let image = std::fs::read(&args.device_buffer_file)?;
    let server = open(cli, OpenMode::ReadWrite)?;
    let summary = server.ingest_image(&args.vehicle, &image)?;
    println!(
        "records {}, stored {}, duplicates {}",
        summary.records, summary.fresh, summary.duplicates
    );
    Ok(())
}
