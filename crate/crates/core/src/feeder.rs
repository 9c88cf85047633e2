//! Reader for the IEEE European LV test feeder CSV family.
//!
//! Four files are read, header order is free and column names are matched
//! case-insensitively. Lines starting with `#` are skipped.
//!
//! | file            | required columns                                   |
//! |-----------------|----------------------------------------------------|
//! | `Lines.csv`     | `Name`, `Bus1`, `Bus2`, `Length`, `Units`, `LineCode` |
//! | `LineCodes.csv` | `Name`, `R1`, `X1`, `R0`, `X0`, `Units`, `Rating`   |
//! | `Loads.csv`     | `Name`, `Bus`, `phases`, and one of `kW` or `kWh`   |
//! | `Buscoords.csv` | `Busname`, `x`, `y`                                 |
//!
//! Line-code impedances are per `Units` (`km` or `m`), ratings in amps. Load
//! `kW` is constant over the quarter-hour; `kWh` is energy per quarter-hour.
//! A `Phases` column in `Lines.csv` is accepted and ignored: every line is
//! modelled as three phases plus neutral.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::network::{
    kwh_to_mwh, Branch, Bus, Connection, ImpedanceMatrix, Network, Prosumer, DEFAULT_EARTHING_RESISTANCE,
    DEFAULT_NOMINAL_VOLTAGE, QUARTER_HOUR,
};

pub const LINES_FILE: &str = "Lines.csv";
pub const LINE_CODES_FILE: &str = "LineCodes.csv";
pub const LOADS_FILE: &str = "Loads.csv";
pub const BUSCOORDS_FILE: &str = "Buscoords.csv";

#[derive(Debug, Clone)]
pub struct FeederOptions {
    /// Defaults to `Bus1` of the first line, the transformer secondary in the published feeder.
    pub slack_bus: Option<String>,
    pub nominal_phase_voltage: f64,
    /// Applied to every bus that hosts a load.
    pub earthing_resistance: f64,
}

impl Default for FeederOptions {
    fn default() -> Self {
        FeederOptions {
            slack_bus: None,
            nominal_phase_voltage: DEFAULT_NOMINAL_VOLTAGE,
            earthing_resistance: DEFAULT_EARTHING_RESISTANCE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeederFiles {
    pub lines: PathBuf,
    pub line_codes: PathBuf,
    pub loads: PathBuf,
    pub buscoords: PathBuf,
}

impl FeederFiles {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        FeederFiles {
            lines: dir.join(LINES_FILE),
            line_codes: dir.join(LINE_CODES_FILE),
            loads: dir.join(LOADS_FILE),
            buscoords: dir.join(BUSCOORDS_FILE),
        }
    }

    pub fn all(&self) -> [&Path; 4] {
        [&self.lines, &self.line_codes, &self.loads, &self.buscoords]
    }
}

pub fn load_feeder_dir(dir: impl AsRef<Path>, options: &FeederOptions) -> Result<Network> {
    load_feeder(&FeederFiles::in_dir(dir), options)
}

pub fn load_feeder(files: &FeederFiles, options: &FeederOptions) -> Result<Network> {
    let read = |p: &Path| {
        std::fs::read_to_string(p).map_err(|source| Error::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    parse_feeder(
        &read(&files.lines)?,
        &read(&files.line_codes)?,
        &read(&files.loads)?,
        &read(&files.buscoords)?,
        options,
    )
}

struct Table {
    file: &'static str,
    columns: HashMap<String, usize>,
    rows: Vec<(usize, csv::StringRecord)>,
}

impl Table {
    fn parse(file: &'static str, text: &str, required: &[&str]) -> Result<Table> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::Parse {
            file: file.into(),
            row: 1,
            message: e.to_string(),
        })?;
        let columns: HashMap<String, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.to_ascii_lowercase(), i))
            .collect();
        for col in required {
            if !columns.contains_key(&col.to_ascii_lowercase()) {
                return Err(Error::Parse {
                    file: file.into(),
                    row: 1,
                    message: format!("missing column '{col}'"),
                });
            }
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::Parse {
                file: file.into(),
                row: e.position().map(|p| p.line() as usize).unwrap_or(0),
                message: e.to_string(),
            })?;
            let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
            if record.iter().all(str::is_empty) {
                continue;
            }
            rows.push((line, record));
        }
        Ok(Table {
            file,
            columns,
            rows,
        })
    }

    fn has(&self, col: &str) -> bool {
        self.columns.contains_key(&col.to_ascii_lowercase())
    }

    fn str<'a>(&self, row: &'a (usize, csv::StringRecord), col: &str) -> Result<&'a str> {
        let idx = self.columns[&col.to_ascii_lowercase()];
        match row.1.get(idx) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(Error::Parse {
                file: self.file.into(),
                row: row.0,
                message: format!("empty value in column '{col}'"),
            }),
        }
    }

    fn num(&self, row: &(usize, csv::StringRecord), col: &str) -> Result<f64> {
        let raw = self.str(row, col)?;
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Parse {
                file: self.file.into(),
                row: row.0,
                message: format!("column '{col}': '{raw}' is not a number"),
            })
    }
}

fn length_unit(table: &Table, row: &(usize, csv::StringRecord), col: &str) -> Result<f64> {
    let unit = table.str(row, col)?;
    match unit.to_ascii_lowercase().as_str() {
        "m" => Ok(1.0),
        "km" => Ok(1000.0),
        "ft" => Ok(0.3048),
        "kft" => Ok(304.8),
        "mi" => Ok(1609.344),
        other => Err(Error::Parse {
            file: table.file.into(),
            row: row.0,
            message: format!("unknown length unit '{other}'"),
        }),
    }
}

struct LineCode {
    /// Ohms per meter.
    impedance: ImpedanceMatrix,
    rating: f64,
}

pub fn parse_feeder(
    lines: &str,
    line_codes: &str,
    loads: &str,
    buscoords: &str,
    options: &FeederOptions,
) -> Result<Network> {
    let codes_table = Table::parse(
        "LineCodes.csv",
        line_codes,
        &["Name", "R1", "X1", "R0", "X0", "Units", "Rating"],
    )?;
    let mut codes = HashMap::new();
    for row in &codes_table.rows {
        // impedances are given per unit length; normalise to per km
        let per_km = 1000.0 / length_unit(&codes_table, row, "Units")?;
        let z = ImpedanceMatrix::from_sequence(
            codes_table.num(row, "R1")? * per_km,
            codes_table.num(row, "X1")? * per_km,
            codes_table.num(row, "R0")? * per_km,
            codes_table.num(row, "X0")? * per_km,
        );
        let name = codes_table.str(row, "Name")?.to_string();
        let rating = codes_table.num(row, "Rating")?;
        codes.insert(
            name.to_ascii_lowercase(),
            LineCode {
                impedance: z,
                rating,
            },
        );
    }

    let coords_table = Table::parse("Buscoords.csv", buscoords, &["Busname", "x", "y"])?;
    let mut buses: Vec<Bus> = Vec::new();
    let mut known: HashSet<String> = HashSet::new();
    for row in &coords_table.rows {
        let id = coords_table.str(row, "Busname")?.to_string();
        if !known.insert(id.clone()) {
            return Err(Error::Parse {
                file: "Buscoords.csv".into(),
                row: row.0,
                message: format!("duplicate bus '{id}'"),
            });
        }
        let mut bus = Bus::new(id);
        bus.coordinates = Some((coords_table.num(row, "x")?, coords_table.num(row, "y")?));
        bus.nominal_phase_voltage = options.nominal_phase_voltage;
        buses.push(bus);
    }

    let lines_table = Table::parse(
        "Lines.csv",
        lines,
        &["Name", "Bus1", "Bus2", "Length", "Units", "LineCode"],
    )?;
    let mut branches = Vec::with_capacity(lines_table.rows.len());
    let mut add_bus = |id: &str, buses: &mut Vec<Bus>| {
        if known.insert(id.to_string()) {
            let mut bus = Bus::new(id);
            bus.nominal_phase_voltage = options.nominal_phase_voltage;
            buses.push(bus);
        }
    };
    for row in &lines_table.rows {
        let code_name = lines_table.str(row, "LineCode")?;
        let code = codes.get(&code_name.to_ascii_lowercase()).ok_or_else(|| {
            Error::Reference(format!(
                "Lines.csv row {}: unknown line code '{code_name}'",
                row.0
            ))
        })?;
        let length = lines_table.num(row, "Length")? * length_unit(&lines_table, row, "Units")?;
        let from = lines_table.str(row, "Bus1")?;
        let to = lines_table.str(row, "Bus2")?;
        add_bus(from, &mut buses);
        add_bus(to, &mut buses);
        branches.push(Branch {
            id: lines_table.str(row, "Name")?.to_string(),
            from_bus: from.to_string(),
            to_bus: to.to_string(),
            length,
            impedance: code.impedance.clone(),
            current_rating: code.rating,
        });
    }

    let loads_table = Table::parse("Loads.csv", loads, &["Name", "Bus", "phases"])?;
    let energy_col = if loads_table.has("kWh") {
        "kWh"
    } else if loads_table.has("kW") {
        "kW"
    } else {
        return Err(Error::Parse {
            file: "Loads.csv".into(),
            row: 1,
            message: "missing column 'kW' (or 'kWh')".into(),
        });
    };
    let mut prosumers = Vec::with_capacity(loads_table.rows.len());
    let mut earthed = HashSet::new();
    for row in &loads_table.rows {
        let bus = loads_table.str(row, "Bus")?.to_string();
        if !known.contains(&bus) {
            return Err(Error::Reference(format!(
                "Loads.csv row {}: unknown bus '{bus}'",
                row.0
            )));
        }
        let connection: Connection =
            loads_table
                .str(row, "phases")?
                .parse()
                .map_err(|e: Error| Error::Parse {
                    file: "Loads.csv".into(),
                    row: row.0,
                    message: e.to_string(),
                })?;
        let magnitude = loads_table.num(row, energy_col)?;
        let kwh = if energy_col == "kW" {
            magnitude * QUARTER_HOUR
        } else {
            magnitude
        };
        earthed.insert(bus.clone());
        prosumers.push(Prosumer {
            name: loads_table.str(row, "Name")?.to_string(),
            bus,
            connection,
            base_injection: kwh_to_mwh(-kwh),
        });
    }
    for bus in buses.iter_mut() {
        if earthed.contains(&bus.id) {
            bus.earthing_resistance = Some(options.earthing_resistance);
        }
    }

    let slack = match &options.slack_bus {
        Some(s) => s.clone(),
        None => branches
            .first()
            .map(|b| b.from_bus.clone())
            .or_else(|| buses.first().map(|b| b.id.clone()))
            .ok_or_else(|| Error::Structure("feeder has no buses".into()))?,
    };
    Network::new(buses, branches, prosumers, slack)
}
