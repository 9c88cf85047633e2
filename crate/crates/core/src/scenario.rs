//! Self-contained JSON scenario format for small hand-authored networks.
//!
//! ```json
//! {
//!   "slack_bus": "N0",
//!   "buses": [{ "id": "N0", "nominal_phase_voltage": 231.0 },
//!             { "id": "N1", "x": 50.0, "y": 0.0, "earthing_resistance": 30.0 }],
//!   "branches": [{ "id": "L1", "from_bus": "N0", "to_bus": "N1", "length": 50.0,
//!                  "current_rating": 200.0,
//!                  "sequence": { "r1": 0.2, "x1": 0.07, "r0": 0.6, "x0": 0.08 } }],
//!   "prosumers": [{ "name": "P1", "bus": "N1", "phase": "abc" }],
//!   "base_case": { "injections": [0.5, 0.5, 0.5] }
//! }
//! ```
//!
//! Lengths in meters, sequence impedances in ohms per km, an explicit
//! `impedance` object (`r`, `x`: 4x4 ohms per meter) may replace `sequence`.
//! Base-case injections are kWh per quarter-hour, one per prosumer-phase slot.

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{
    kwh_to_mwh, mwh_to_kwh, BaseCase, Branch, Bus, Connection, ImpedanceMatrix, Network,
    Prosumer, DEFAULT_NOMINAL_VOLTAGE,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub slack_bus: String,
    pub buses: Vec<BusRecord>,
    pub branches: Vec<BranchRecord>,
    pub prosumers: Vec<ProsumerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_case: Option<BaseCaseRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BusRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
    #[serde(default = "default_voltage")]
    pub nominal_phase_voltage: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub earthing_resistance: Option<f64>,
}

fn default_voltage() -> f64 {
    DEFAULT_NOMINAL_VOLTAGE
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub r1: f64,
    pub x1: f64,
    pub r0: f64,
    pub x0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub r: [[f64; 4]; 4],
    pub x: [[f64; 4]; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchRecord {
    pub id: String,
    pub from_bus: String,
    pub to_bus: String,
    pub length: f64,
    pub current_rating: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<SequenceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impedance: Option<MatrixRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProsumerRecord {
    pub name: String,
    pub bus: String,
    pub phase: Connection,
    /// kWh per quarter-hour; ignored when `base_case` is present.
    #[serde(default)]
    pub base_injection: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseCaseRecord {
    /// kWh per quarter-hour for every prosumer-phase slot (length 3np).
    pub injections: Vec<f64>,
}

impl ScenarioFile {
    pub fn into_network(self) -> Result<(Network, BaseCase)> {
        let buses = self
            .buses
            .into_iter()
            .map(|b| {
                let coordinates = match (b.x, b.y) {
                    (Some(x), Some(y)) => Some((x, y)),
                    (None, None) => None,
                    _ => {
                        return Err(Error::Consistency(format!(
                            "bus {} has only one coordinate",
                            b.id
                        )))
                    }
                };
                Ok(Bus {
                    id: b.id,
                    coordinates,
                    nominal_phase_voltage: b.nominal_phase_voltage,
                    earthing_resistance: b.earthing_resistance,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let branches = self
            .branches
            .into_iter()
            .map(|b| {
                let impedance = match (&b.impedance, &b.sequence) {
                    (Some(m), _) => {
                        let mut z = [[Complex64::new(0.0, 0.0); 4]; 4];
                        for i in 0..4 {
                            for j in 0..4 {
                                z[i][j] = Complex64::new(m.r[i][j], m.x[i][j]);
                            }
                        }
                        ImpedanceMatrix(z)
                    }
                    (None, Some(s)) => ImpedanceMatrix::from_sequence(s.r1, s.x1, s.r0, s.x0),
                    (None, None) => {
                        return Err(Error::Consistency(format!(
                            "branch {} needs either 'impedance' or 'sequence'",
                            b.id
                        )))
                    }
                };
                Ok(Branch {
                    id: b.id,
                    from_bus: b.from_bus,
                    to_bus: b.to_bus,
                    length: b.length,
                    impedance,
                    current_rating: b.current_rating,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let prosumers: Vec<Prosumer> = self
            .prosumers
            .into_iter()
            .map(|p| Prosumer {
                name: p.name,
                bus: p.bus,
                connection: p.phase,
                base_injection: kwh_to_mwh(p.base_injection),
            })
            .collect();

        let network = Network::new(buses, branches, prosumers, self.slack_bus)?;
        let base_case = match self.base_case {
            Some(bc) => {
                let mwh = bc.injections.iter().copied().map(kwh_to_mwh).collect();
                let base_case = BaseCase::new(&network, mwh)?;
                // keep the per-prosumer totals in sync with the explicit vector
                let prosumers = network
                    .prosumers()
                    .iter()
                    .enumerate()
                    .map(|(i, p)| Prosumer {
                        base_injection: base_case.prosumer_total(i),
                        ..p.clone()
                    })
                    .collect();
                (network.with_prosumers(prosumers)?, base_case)
            }
            None => {
                let bc = BaseCase::from_network(&network);
                (network, bc)
            }
        };
        Ok(base_case)
    }

    /// Serialises a network with explicit 4x4 impedances so that reloading is lossless.
    pub fn from_network(network: &Network, base_case: Option<&BaseCase>) -> ScenarioFile {
        ScenarioFile {
            slack_bus: network.slack_bus().to_string(),
            buses: network
                .buses()
                .iter()
                .map(|b| BusRecord {
                    id: b.id.clone(),
                    x: b.coordinates.map(|c| c.0),
                    y: b.coordinates.map(|c| c.1),
                    nominal_phase_voltage: b.nominal_phase_voltage,
                    earthing_resistance: b.earthing_resistance,
                })
                .collect(),
            branches: network
                .branches()
                .iter()
                .map(|b| {
                    let mut r = [[0.0; 4]; 4];
                    let mut x = [[0.0; 4]; 4];
                    for i in 0..4 {
                        for j in 0..4 {
                            r[i][j] = b.impedance.0[i][j].re;
                            x[i][j] = b.impedance.0[i][j].im;
                        }
                    }
                    BranchRecord {
                        id: b.id.clone(),
                        from_bus: b.from_bus.clone(),
                        to_bus: b.to_bus.clone(),
                        length: b.length,
                        current_rating: b.current_rating,
                        sequence: None,
                        impedance: Some(MatrixRecord { r, x }),
                    }
                })
                .collect(),
            prosumers: network
                .prosumers()
                .iter()
                .map(|p| ProsumerRecord {
                    name: p.name.clone(),
                    bus: p.bus.clone(),
                    phase: p.connection,
                    base_injection: mwh_to_kwh(p.base_injection),
                })
                .collect(),
            base_case: base_case.map(|bc| BaseCaseRecord {
                injections: bc.injections().iter().copied().map(mwh_to_kwh).collect(),
            }),
        }
    }
}

pub fn parse_scenario(json: &str) -> Result<(Network, BaseCase)> {
    let file: ScenarioFile = serde_json::from_str(json)?;
    file.into_network()
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<(Network, BaseCase)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text)
}

pub fn to_json(network: &Network, base_case: Option<&BaseCase>) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ScenarioFile::from_network(
        network, base_case,
    ))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"{
        "slack_bus": "S",
        "buses": [{"id": "S"}, {"id": "A", "earthing_resistance": 30.0}],
        "branches": [{"id": "L", "from_bus": "S", "to_bus": "A", "length": 20.0,
                      "current_rating": 100.0,
                      "sequence": {"r1": 0.3, "x1": 0.07, "r0": 0.9, "x0": 0.1}}],
        "prosumers": [{"name": "p", "bus": "A", "phase": "b"}],
        "base_case": {"injections": [0.0, -0.8, 0.0]}
    }"#;

    #[test]
    fn kwh_converted_to_mwh() {
        let (net, bc) = parse_scenario(SMALL).unwrap();
        assert_eq!(net.np(), 1);
        assert_eq!(bc.injections(), &[0.0, kwh_to_mwh(-0.8), 0.0]);
        assert_eq!(net.prosumers()[0].base_injection, kwh_to_mwh(-0.8));
    }

    #[test]
    fn dimension_and_phase_errors() {
        let short = SMALL.replace("[0.0, -0.8, 0.0]", "[0.0, -0.8]");
        assert!(matches!(
            parse_scenario(&short),
            Err(Error::Dimension { expected: 3, actual: 2 })
        ));
        let foreign = SMALL.replace("[0.0, -0.8, 0.0]", "[0.1, -0.8, 0.0]");
        assert!(matches!(parse_scenario(&foreign), Err(Error::Consistency(_))));
    }

    #[test]
    fn zero_injections_are_valid() {
        let zero = SMALL.replace("[0.0, -0.8, 0.0]", "[0.0, 0.0, 0.0]");
        let (_, bc) = parse_scenario(&zero).unwrap();
        assert!(bc.injections().iter().all(|&e| e == 0.0));
    }
}
