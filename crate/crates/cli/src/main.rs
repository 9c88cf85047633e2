mod args;
mod manifest;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::Parser;
use dnut_core::feeder::{load_feeder_dir, FeederFiles, FeederOptions};
use dnut_core::market::{self, Market, OrderRequest};
use dnut_core::power_flow::{self, StateMagnitudes};
use dnut_core::scenario::load_scenario;
use dnut_core::sensitivity;
use dnut_core::simulation::{
    self, labelled_matrix_csv, resolve_constants, write_json, SimulationConfig, TrackedPairs,
};
use dnut_core::tariff::{build_matrix, limit_breaches};
use dnut_core::{BaseCase, Network};
use serde::Serialize;

use args::{Cli, Command, InputArgs, MarketArgs, RunArgs};
use manifest::{digest_file, InputDigest, RunManifest};

/// Misuse of the command line, reported with exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut message = String::new();
            for cause in e.chain() {
                let text = cause.to_string();
                if !message.contains(&text) {
                    if !message.is_empty() {
                        message.push_str(": ");
                    }
                    message.push_str(&text);
                }
            }
            eprintln!("error: {message}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let base_config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Validate(input) => validate(&input),
        Command::Powerflow { input, out } => powerflow(&input, out.as_deref()),
        Command::Sensitivity { input, out_dir } => sensitivity_cmd(&input, &out_dir),
        Command::Dnut {
            input,
            energy,
            decompose,
            auto_tune,
            out,
        } => {
            let mut config = base_config;
            config.auto_tune |= auto_tune;
            if let Some(e) = energy {
                config.reference_energy = e;
            }
            dnut_cmd(&input, &config, decompose, out.as_deref())
        }
        Command::MarketReplay {
            input,
            orders,
            market,
            out,
        } => {
            let mut config = base_config;
            apply_market(&mut config, &market);
            replay(&input, &config, &orders, out.as_deref())
        }
        Command::Case1 {
            run,
            sr_grid,
            consumer,
            suppliers,
        } => {
            let config = run_config(base_config, &run)?;
            let grid = sr_grid.map(|g| g.0).unwrap_or_else(simulation::sr_grid);
            case1(&run, &config, &grid, &consumer, &suppliers)
        }
        Command::Case2 { run, scale_grid } => {
            let config = run_config(base_config, &run)?;
            let grid = scale_grid.map(|g| g.0).unwrap_or_else(simulation::scale_grid);
            case2(&run, &config, &grid)
        }
        Command::Case3 { run, ppr_grid, logs } => {
            let config = run_config(base_config, &run)?;
            let grid = ppr_grid.map(|g| g.0).unwrap_or_else(simulation::ppr_grid);
            case3(&run, &config, &grid, logs)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<SimulationConfig> {
    let Some(path) = path else {
        return Ok(SimulationConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config: SimulationConfig = toml::from_str(&text)
        .map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
    Ok(config)
}

fn apply_market(config: &mut SimulationConfig, m: &MarketArgs) {
    if let Some(mode) = m.mode {
        config.mode = mode.into();
    }
    if let Some(efr) = m.efr {
        config.efr = efr;
    }
    if let Some(k) = m.rebuild_interval {
        config.rebuild_interval = k;
    }
    config.auto_tune |= m.auto_tune;
}

fn run_config(mut config: SimulationConfig, run: &RunArgs) -> Result<SimulationConfig> {
    config.seed = run.seed;
    if let Some(v) = run.runs {
        config.monte_carlo_runs = v;
    }
    if let Some(v) = run.sr {
        config.sr = v;
    }
    if let Some(v) = run.ppr {
        config.ppr = v;
    }
    if let Some(v) = run.par {
        config.par = v;
    }
    if let Some(v) = run.reference_energy {
        config.reference_energy = v;
    }
    if let Some(v) = run.target_dnut_mean {
        config.target_dnut_mean = v;
    }
    if let Some(v) = run.base_case {
        config.base_case = v.into();
    }
    apply_market(&mut config, &run.market);
    config.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(config)
}

struct Loaded {
    network: Network,
    base_case: BaseCase,
    files: Vec<PathBuf>,
}

fn load(input: &InputArgs) -> Result<Loaded> {
    match (&input.network, &input.scenario) {
        (Some(dir), None) => {
            let network = load_feeder_dir(dir, &FeederOptions::default())?;
            let base_case = BaseCase::from_network(&network);
            let files = FeederFiles::in_dir(dir).all().iter().map(|p| p.to_path_buf()).collect();
            Ok(Loaded {
                network,
                base_case,
                files,
            })
        }
        (None, Some(path)) => {
            let (network, base_case) = load_scenario(path)?;
            Ok(Loaded {
                network,
                base_case,
                files: vec![path.clone()],
            })
        }
        _ => Err(UsageError("exactly one of --network or --scenario is required".into()).into()),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn validate(input: &InputArgs) -> Result<()> {
    let loaded = load(input)?;
    let net = &loaded.network;
    let state = power_flow::solve(net, loaded.base_case.injections())?.magnitudes();
    let (vmin, vmax) = extent(&state.voltages);
    println!(
        "ok: {} buses, {} branches, {} prosumers, slack {}",
        net.nn(),
        net.nb(),
        net.np(),
        net.slack_bus()
    );
    println!(
        "base case: voltage {vmin:.2}..{vmax:.2} V, losses {:.1} W, limit breaches {}",
        state.loss_power,
        limit_breaches(net, &state)
    );
    Ok(())
}

fn extent(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

#[derive(Serialize)]
struct BusReport<'a> {
    bus: &'a str,
    /// Phase-to-neutral RMS volts.
    voltage: [f64; 3],
    /// Degrees.
    angle: [f64; 3],
    neutral_voltage: f64,
}

#[derive(Serialize)]
struct BranchReport<'a> {
    branch: &'a str,
    /// Signed RMS amps, positive along from -> to.
    current: [f64; 3],
    neutral_current: f64,
    rating: f64,
}

#[derive(Serialize)]
struct PowerflowReport<'a> {
    iterations: usize,
    loss_power: f64,
    slack_power: f64,
    limit_breaches: usize,
    buses: Vec<BusReport<'a>>,
    branches: Vec<BranchReport<'a>>,
}

fn powerflow(input: &InputArgs, out: Option<&Path>) -> Result<()> {
    let loaded = load(input)?;
    let net = &loaded.network;
    let state = power_flow::solve(net, loaded.base_case.injections())?;
    let m: StateMagnitudes = state.magnitudes();
    let report = PowerflowReport {
        iterations: state.iterations,
        loss_power: state.loss_power,
        slack_power: state.slack_power,
        limit_breaches: limit_breaches(net, &m),
        buses: net
            .buses()
            .iter()
            .enumerate()
            .map(|(k, b)| BusReport {
                bus: &b.id,
                voltage: [0, 1, 2].map(|p| m.voltages[3 * k + p]),
                angle: [0, 1, 2].map(|p| state.node_voltages[k][p].arg().to_degrees()),
                neutral_voltage: m.neutral_voltages[k],
            })
            .collect(),
        branches: net
            .branches()
            .iter()
            .enumerate()
            .map(|(k, br)| BranchReport {
                branch: &br.id,
                current: [0, 1, 2].map(|p| m.currents[3 * k + p]),
                neutral_current: m.neutral_currents[k],
                rating: br.current_rating,
            })
            .collect(),
    };
    emit(out, &(serde_json::to_string_pretty(&report)? + "\n"))
}

fn slot_labels(net: &Network) -> Vec<String> {
    net.prosumers()
        .iter()
        .flat_map(|p| ["a", "b", "c"].map(|ph| format!("{}.{ph}", p.name)))
        .collect()
}

fn sensitivity_cmd(input: &InputArgs, out_dir: &Path) -> Result<()> {
    let loaded = load(input)?;
    let net = &loaded.network;
    let m = sensitivity::build(net, &loaded.base_case)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let cols = slot_labels(net);
    let rows_of = |matrix: &sensitivity::ColumnMatrix, names: Vec<String>| -> Vec<(String, Vec<f64>)> {
        names
            .into_iter()
            .enumerate()
            .map(|(r, name)| (name, (0..matrix.cols()).map(|c| matrix.get(r, c)).collect()))
            .collect()
    };
    let phase_rows = |ids: Vec<&str>| -> Vec<String> {
        ids.into_iter()
            .flat_map(|id| ["a", "b", "c"].map(|ph| format!("{id}.{ph}")))
            .collect()
    };
    let vsf = rows_of(&m.vsf, phase_rows(net.buses().iter().map(|b| b.id.as_str()).collect()));
    let csf = rows_of(&m.csf, phase_rows(net.branches().iter().map(|b| b.id.as_str()).collect()));
    for (name, rows) in [("vsf.csv", vsf), ("csf.csv", csf)] {
        let text = labelled_matrix_csv("row", &cols, rows.iter().map(|(l, v)| (l.clone(), v.as_slice())))?;
        let path = out_dir.join(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct DecomposedMatrix<'a> {
    prosumers: Vec<&'a str>,
    reference_energy: f64,
    constants: dnut_core::tariff::TariffConstants,
    values: &'a [Vec<f64>],
    current: &'a [Vec<f64>],
    voltage: &'a [Vec<f64>],
    loss: &'a [Vec<f64>],
}

fn dnut_cmd(input: &InputArgs, config: &SimulationConfig, decompose: bool, out: Option<&Path>) -> Result<()> {
    let loaded = load(input)?;
    let net = &loaded.network;
    config.constants.validate()?;
    let m = sensitivity::build(net, &loaded.base_case)?;
    let constants = resolve_constants(net, &m, config)?;
    let matrix = build_matrix(net, &m, config.reference_energy, &constants)?;
    let names: Vec<String> = net.prosumers().iter().map(|p| p.name.clone()).collect();
    let text = if decompose {
        let doc = DecomposedMatrix {
            prosumers: names.iter().map(String::as_str).collect(),
            reference_energy: matrix.reference_energy,
            constants,
            values: &matrix.values,
            current: &matrix.current,
            voltage: &matrix.voltage,
            loss: &matrix.loss,
        };
        serde_json::to_string_pretty(&doc)? + "\n"
    } else {
        labelled_matrix_csv(
            "supplier\\consumer",
            &names,
            names.iter().cloned().zip(matrix.values.iter().map(Vec::as_slice)),
        )?
    };
    emit(out, &text)
}

fn replay(input: &InputArgs, config: &SimulationConfig, orders: &Path, out: Option<&Path>) -> Result<()> {
    let loaded = load(input)?;
    let net = &loaded.network;
    config.validate().map_err(|e| UsageError(e.to_string()))?;
    let file = std::fs::File::open(orders).with_context(|| format!("reading {}", orders.display()))?;
    let requests: Vec<OrderRequest> = market::read_jsonl(std::io::BufReader::new(file))
        .with_context(|| format!("parsing {}", orders.display()))?;
    let m = sensitivity::build(net, &loaded.base_case)?;
    let constants = resolve_constants(net, &m, config)?;
    let mut mkt = Market::new(net, &loaded.base_case, &m, constants, config.market())?;
    let log = market::replay(&mut mkt, &requests)?;
    let mut buf = Vec::new();
    market::write_jsonl(&mut buf, &log)?;
    emit(out, &String::from_utf8(buf)?)
}

/// Output naming and manifest bookkeeping shared by the case commands.
struct Outputs {
    dir: PathBuf,
    stem: String,
    manifest: RunManifest,
}

impl Outputs {
    fn new(case: &str, run: &RunArgs, config: &SimulationConfig, grid: &[f64], inputs: &[PathBuf]) -> Result<Self> {
        std::fs::create_dir_all(&run.out_dir).with_context(|| format!("creating {}", run.out_dir.display()))?;
        let tag = match &run.tag {
            Some(t) => t.clone(),
            None => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs().to_string())
                .unwrap_or_default(),
        };
        let digests = inputs.iter().map(|p| digest_file(p)).collect::<Result<Vec<InputDigest>>>()?;
        Ok(Outputs {
            dir: run.out_dir.clone(),
            stem: format!("{case}_{tag}"),
            manifest: RunManifest::new(case, config.seed, config, grid, digests),
        })
    }

    fn path(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("{}{suffix}", self.stem))
    }

    fn csv<T: Serialize>(&mut self, suffix: &str, rows: &[T]) -> Result<()> {
        let path = self.path(suffix);
        simulation::write_csv(&path, rows)?;
        self.manifest.outputs.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, suffix: &str, value: &T) -> Result<()> {
        let path = self.path(suffix);
        write_json(&path, value)?;
        self.manifest.outputs.push(path);
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        let path = self.path("_manifest.json");
        self.manifest.outputs.push(path.clone());
        write_json(&path, &self.manifest)?;
        for p in &self.manifest.outputs {
            println!("{}", p.display());
        }
        Ok(())
    }
}

fn case1(run: &RunArgs, config: &SimulationConfig, grid: &[f64], consumer: &str, suppliers: &[String]) -> Result<()> {
    let loaded = load(&run.input)?;
    let net = &loaded.network;
    let tracked = TrackedPairs::from_names(net, consumer, suppliers)
        .map_err(|e| UsageError(e.to_string()))?;
    let mut out = Outputs::new("case1", run, config, grid, &loaded.files)?;
    let report = simulation::run_case1(net, config, &tracked, grid)?;
    out.csv(".csv", &report.rows)?;
    out.json(".json", &report)?;
    out.finish()
}

fn case2(run: &RunArgs, config: &SimulationConfig, grid: &[f64]) -> Result<()> {
    let loaded = load(&run.input)?;
    let mut out = Outputs::new("case2", run, config, grid, &loaded.files)?;
    let report = simulation::run_case2(&loaded.network, config, grid)?;
    out.csv(".csv", &report.rows)?;
    out.json(".json", &report)?;
    out.finish()
}

fn case3(run: &RunArgs, config: &SimulationConfig, grid: &[f64], logs: bool) -> Result<()> {
    let loaded = load(&run.input)?;
    let mut out = Outputs::new("case3", run, config, grid, &loaded.files)?;
    let report = simulation::run_case3(&loaded.network, config, grid, logs)?;
    out.csv(".csv", &report.rows)?;
    out.csv("_runs.csv", &report.runs)?;
    out.json(".json", &report)?;
    if logs {
        let path = out.path("_trades.jsonl");
        let mut buf = Vec::new();
        for (k, log) in report.logs.iter().enumerate() {
            let (point, run_index) = (k / config.monte_carlo_runs, k % config.monte_carlo_runs);
            for tx in log {
                let record = serde_json::json!({ "ppr": grid[point], "run": run_index, "trade": tx });
                serde_json::to_writer(&mut buf, &record)?;
                buf.push(b'\n');
            }
        }
        std::fs::write(&path, buf).with_context(|| format!("writing {}", path.display()))?;
        out.manifest.outputs.push(path);
    }
    out.finish()
}
