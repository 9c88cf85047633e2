use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dnut_core::market::FlowMode;
use dnut_core::simulation::BaseCaseSource;

#[derive(Debug, Parser)]
#[command(name = "dnut", version, about = "Dynamic network usage tariffs and local market simulation")]
pub struct Cli {
    /// Worker threads, all cores when omitted.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// TOML file with simulation settings; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse the inputs, check topology and solve the base-case load flow.
    Validate(InputArgs),
    /// Solve the base-case load flow and print the state as JSON.
    Powerflow {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the VSF and CSF matrices as CSV.
    Sensitivity {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Compute the prosumer-by-prosumer DNUT matrix.
    Dnut {
        #[command(flatten)]
        input: InputArgs,
        /// Energy per pair, e.g. 0.25kWh, 250Wh or 0.00025MWh; bare numbers are kWh.
        #[arg(long, value_parser = parse_energy)]
        energy: Option<f64>,
        /// Emit JSON with the current, voltage and loss matrices instead of CSV.
        #[arg(long)]
        decompose: bool,
        #[arg(long)]
        auto_tune: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stream a JSON-lines order file through the market and print the trade log.
    MarketReplay {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        orders: PathBuf,
        #[command(flatten)]
        market: MarketArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tracked-pair DNUT over a supply-ratio sweep.
    Case1 {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = parse_grid)]
        sr_grid: Option<Grid>,
        #[arg(long, default_value = "LOAD19")]
        consumer: String,
        #[arg(long, value_delimiter = ',', default_values_t = ["LOAD1".to_string(), "LOAD23".to_string(), "LOAD39".to_string()])]
        suppliers: Vec<String>,
    },
    /// Market surplus with one tariff component at a time, scaled over a grid.
    Case2 {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = parse_grid)]
        scale_grid: Option<Grid>,
    },
    /// Monte Carlo market runs over a participation-ratio grid.
    Case3 {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = parse_grid)]
        ppr_grid: Option<Grid>,
        /// Also write every trade log as JSON lines.
        #[arg(long)]
        logs: bool,
    },
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct InputArgs {
    /// Directory with Lines.csv, LineCodes.csv, Loads.csv and Buscoords.csv.
    #[arg(long)]
    pub network: Option<PathBuf>,
    /// JSON scenario file.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Excessive,
    Nominated,
    Mixed,
}

impl From<ModeArg> for FlowMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Excessive => FlowMode::Excessive,
            ModeArg::Nominated => FlowMode::Nominated,
            ModeArg::Mixed => FlowMode::Mixed,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BaseArg {
    Random,
    Snapshot,
}

impl From<BaseArg> for BaseCaseSource {
    fn from(b: BaseArg) -> Self {
        match b {
            BaseArg::Random => BaseCaseSource::Random,
            BaseArg::Snapshot => BaseCaseSource::Snapshot,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct MarketArgs {
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub efr: Option<f64>,
    #[arg(long)]
    pub rebuild_interval: Option<usize>,
    #[arg(long)]
    pub auto_tune: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub sr: Option<f64>,
    #[arg(long)]
    pub ppr: Option<f64>,
    #[arg(long)]
    pub par: Option<f64>,
    #[arg(long, value_parser = parse_energy)]
    pub reference_energy: Option<f64>,
    #[arg(long)]
    pub target_dnut_mean: Option<f64>,
    #[arg(long, value_enum)]
    pub base_case: Option<BaseArg>,
    #[command(flatten)]
    pub market: MarketArgs,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Replaces the wall-clock timestamp in output file names.
    #[arg(long)]
    pub tag: Option<String>,
}

/// Inclusive range `start:stop:step` or an explicit comma list.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid(pub Vec<f64>);

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

pub fn parse_grid(s: &str) -> Result<Grid, String> {
    let number = |t: &str| {
        t.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("'{t}' is not a number"))
    };
    if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        let [start, stop, step] = parts[..] else {
            return Err(format!("expected start:stop:step, got '{s}'"));
        };
        let (start, stop, step) = (number(start)?, number(stop)?, number(step)?);
        if !(step > 0.0) || stop < start {
            return Err(format!("empty or unbounded grid '{s}'"));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        // rounding keeps 0.1-step grids on their decimal values
        let values = (0..=n)
            .map(|k| ((start + k as f64 * step) * 1e12).round() / 1e12)
            .collect();
        Ok(Grid(values))
    } else {
        let values = s.split(',').map(number).collect::<Result<Vec<_>, _>>()?;
        if values.is_empty() {
            return Err("empty grid".into());
        }
        Ok(Grid(values))
    }
}

/// Energy with an optional Wh, kWh or MWh suffix, returned in MWh.
pub fn parse_energy(s: &str) -> Result<f64, String> {
    let t = s.trim();
    let lower = t.to_ascii_lowercase();
    let (digits, to_mwh) = if let Some(v) = lower.strip_suffix("mwh") {
        (v, 1.0)
    } else if let Some(v) = lower.strip_suffix("kwh") {
        (v, 1e-3)
    } else if let Some(v) = lower.strip_suffix("wh") {
        (v, 1e-6)
    } else {
        (lower.as_str(), 1e-3)
    };
    let value: f64 = digits
        .trim()
        .parse()
        .map_err(|_| format!("'{t}' is not an energy such as 0.25kWh"))?;
    if !(value > 0.0) || !value.is_finite() {
        return Err(format!("energy must be positive, got '{t}'"));
    }
    Ok(value * to_mwh)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(parse_grid("0:1:0.1").unwrap().0.len(), 11);
        assert_eq!(parse_grid("0:1:0.1").unwrap().0[3], 0.3);
        assert_eq!(parse_grid("0.1:2:0.1").unwrap().0.len(), 20);
        assert_eq!(parse_grid("0.2,0.5").unwrap().0, vec![0.2, 0.5]);
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("0:1:0").is_err());
    }

    #[test]
    fn energies() {
        assert!((parse_energy("0.25kWh").unwrap() - 2.5e-4).abs() < 1e-18);
        assert!((parse_energy("250Wh").unwrap() - 2.5e-4).abs() < 1e-18);
        assert_eq!(parse_energy("0.001MWh").unwrap(), 0.001);
        assert!((parse_energy("0.4").unwrap() - 4e-4).abs() < 1e-18);
        assert!(parse_energy("-1kWh").is_err());
        assert!(parse_energy("lots").is_err());
    }
}
