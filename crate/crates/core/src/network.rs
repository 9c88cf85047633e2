//! Four-wire LV network model: buses, branches, prosumers and base-case injections.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nominal phase-to-neutral RMS voltage used when a source does not state one.
pub const DEFAULT_NOMINAL_VOLTAGE: f64 = 231.0;
/// Earthing resistance at prosumer buses of the European LV feeder.
pub const DEFAULT_EARTHING_RESISTANCE: f64 = 30.0;
/// Length of one traded product in hours.
pub const QUARTER_HOUR: f64 = 0.25;

pub fn kwh_to_mwh(kwh: f64) -> f64 {
    kwh / 1000.0
}

/// Inverse of [`kwh_to_mwh`] that reproduces `mwh` exactly whenever it was
/// produced by that function.
pub fn mwh_to_kwh(mwh: f64) -> f64 {
    let guess = mwh * 1000.0;
    let mut up = guess;
    let mut down = guess;
    for _ in 0..8 {
        if kwh_to_mwh(up) == mwh {
            return up;
        }
        if kwh_to_mwh(down) == mwh {
            return down;
        }
        up = up.next_up();
        down = down.next_down();
    }
    guess
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn offset(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn from_offset(offset: usize) -> Option<Phase> {
        Phase::ALL.get(offset).copied()
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::A => "a",
            Phase::B => "b",
            Phase::C => "c",
        };
        f.write_str(s)
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" | "1" => Ok(Phase::A),
            "b" | "2" => Ok(Phase::B),
            "c" | "3" => Ok(Phase::C),
            other => Err(Error::Consistency(format!("unknown phase '{other}'"))),
        }
    }
}

/// How a prosumer is attached to the phase conductors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Connection {
    Single(Phase),
    ThreePhase,
}

impl Connection {
    pub fn phases(self) -> &'static [Phase] {
        match self {
            Connection::Single(Phase::A) => &[Phase::A],
            Connection::Single(Phase::B) => &[Phase::B],
            Connection::Single(Phase::C) => &[Phase::C],
            Connection::ThreePhase => &Phase::ALL,
        }
    }

    pub fn occupies(self, phase: Phase) -> bool {
        match self {
            Connection::Single(p) => p == phase,
            Connection::ThreePhase => true,
        }
    }
}

impl fmt::Display for Connection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Connection::Single(p) => write!(f, "{p}"),
            Connection::ThreePhase => f.write_str("abc"),
        }
    }
}

impl FromStr for Connection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "abc" | "3ph" | "three" => Ok(Connection::ThreePhase),
            other => other.parse().map(Connection::Single),
        }
    }
}

impl Serialize for Connection {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Connection {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Series impedance of a four-conductor line in ohms per meter.
///
/// Conductor order is phases a, b, c followed by the neutral.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpedanceMatrix(pub [[Complex64; 4]; 4]);

impl ImpedanceMatrix {
    /// Builds a phase-domain matrix from sequence data given per kilometre.
    ///
    /// All four conductors get the positive-sequence resistance on the diagonal and
    /// no mutual resistance, so the ohmic loss of a branch is exactly the sum of
    /// per-conductor `I^2 R` terms. Mutual coupling is purely reactive,
    /// `(X0 - X1) / 3` when positive, and the self reactance is raised by the
    /// same amount so the positive-sequence reactance is preserved.
    pub fn from_sequence(r1: f64, x1: f64, _r0: f64, x0: f64) -> Self {
        let per_m = 1e-3;
        let xm = ((x0 - x1) / 3.0).max(0.0);
        let mut z = [[Complex64::new(0.0, 0.0); 4]; 4];
        for (i, row) in z.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = if i == j {
                    Complex64::new(r1 * per_m, (x1 + xm) * per_m)
                } else {
                    Complex64::new(0.0, xm * per_m)
                };
            }
        }
        ImpedanceMatrix(z)
    }

    /// Uncoupled conductors with identical resistance and reactance per meter.
    pub fn uniform(r: f64, x: f64) -> Self {
        let mut z = [[Complex64::new(0.0, 0.0); 4]; 4];
        for (i, row) in z.iter_mut().enumerate() {
            row[i] = Complex64::new(r, x);
        }
        ImpedanceMatrix(z)
    }

    pub fn scaled(&self, factor: f64) -> [[Complex64; 4]; 4] {
        let mut out = self.0;
        for row in out.iter_mut() {
            for cell in row.iter_mut() {
                *cell *= factor;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: String,
    pub coordinates: Option<(f64, f64)>,
    pub nominal_phase_voltage: f64,
    pub earthing_resistance: Option<f64>,
}

impl Bus {
    pub fn new(id: impl Into<String>) -> Self {
        Bus {
            id: id.into(),
            coordinates: None,
            nominal_phase_voltage: DEFAULT_NOMINAL_VOLTAGE,
            earthing_resistance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub id: String,
    pub from_bus: String,
    pub to_bus: String,
    /// Meters.
    pub length: f64,
    pub impedance: ImpedanceMatrix,
    /// Amps RMS.
    pub current_rating: f64,
}

impl Branch {
    /// Total series impedance of the branch in ohms.
    pub fn total_impedance(&self) -> [[Complex64; 4]; 4] {
        self.impedance.scaled(self.length)
    }

    /// Total resistance of each conductor (a, b, c, neutral) in ohms.
    pub fn resistance(&self) -> [f64; 4] {
        let mut r = [0.0; 4];
        for (k, slot) in r.iter_mut().enumerate() {
            *slot = self.impedance.0[k][k].re * self.length;
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prosumer {
    pub name: String,
    pub bus: String,
    pub connection: Connection,
    /// Signed energy per quarter-hour in MWh, positive for generation.
    pub base_injection: f64,
}

#[derive(Debug, Clone)]
struct Topology {
    bus_index: HashMap<String, usize>,
    /// Buses in breadth-first order from the slack.
    order: Vec<usize>,
    /// For every non-slack bus: the branch to its parent and whether the branch
    /// reference direction (from -> to) points away from the slack.
    parent: Vec<Option<(usize, bool)>>,
    parent_bus: Vec<Option<usize>>,
    prosumer_bus: Vec<usize>,
    prosumers_at: Vec<Vec<usize>>,
    slack: usize,
}

/// A validated radial four-wire network.
#[derive(Debug, Clone)]
pub struct Network {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    prosumers: Vec<Prosumer>,
    slack_bus: String,
    topo: Topology,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.buses == other.buses
            && self.branches == other.branches
            && self.prosumers == other.prosumers
            && self.slack_bus == other.slack_bus
    }
}

impl Network {
    pub fn new(
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        prosumers: Vec<Prosumer>,
        slack_bus: impl Into<String>,
    ) -> Result<Self> {
        let slack_bus = slack_bus.into();
        let topo = build_topology(&buses, &branches, &prosumers, &slack_bus)?;
        Ok(Network {
            buses,
            branches,
            prosumers,
            slack_bus,
            topo,
        })
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn prosumers(&self) -> &[Prosumer] {
        &self.prosumers
    }

    pub fn slack_bus(&self) -> &str {
        &self.slack_bus
    }

    pub fn slack_index(&self) -> usize {
        self.topo.slack
    }

    /// Number of buses (nn).
    pub fn nn(&self) -> usize {
        self.buses.len()
    }

    /// Number of branches (nb).
    pub fn nb(&self) -> usize {
        self.branches.len()
    }

    /// Number of prosumers (np).
    pub fn np(&self) -> usize {
        self.prosumers.len()
    }

    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.topo.bus_index.get(id).copied()
    }

    pub fn prosumer_index(&self, name: &str) -> Option<usize> {
        self.prosumers.iter().position(|p| p.name == name)
    }

    pub fn prosumer_bus_index(&self, prosumer: usize) -> usize {
        self.topo.prosumer_bus[prosumer]
    }

    pub fn prosumers_at(&self, bus: usize) -> &[usize] {
        &self.topo.prosumers_at[bus]
    }

    /// Bus indices in breadth-first order starting at the slack.
    pub fn sweep_order(&self) -> &[usize] {
        &self.topo.order
    }

    /// Parent branch of a bus and whether its reference direction points downstream.
    pub fn parent_branch(&self, bus: usize) -> Option<(usize, bool)> {
        self.topo.parent[bus]
    }

    pub fn parent_bus(&self, bus: usize) -> Option<usize> {
        self.topo.parent_bus[bus]
    }

    /// Column index of a prosumer-phase pair in injection vectors and sensitivity matrices.
    pub fn injection_slot(&self, prosumer: usize, phase: Phase) -> Result<usize> {
        let p = self
            .prosumers
            .get(prosumer)
            .ok_or_else(|| Error::Reference(format!("prosumer {prosumer} does not exist")))?;
        if !p.connection.occupies(phase) {
            return Err(Error::Consistency(format!(
                "prosumer {prosumer} ({}) is connected to phase {} only, not {phase}",
                p.name, p.connection
            )));
        }
        Ok(3 * prosumer + phase.offset())
    }

    /// Slots a prosumer may inject into.
    pub fn occupied_slots(&self, prosumer: usize) -> Vec<usize> {
        self.prosumers[prosumer]
            .connection
            .phases()
            .iter()
            .map(|ph| 3 * prosumer + ph.offset())
            .collect()
    }

    pub fn slot_is_occupied(&self, slot: usize) -> bool {
        let prosumer = slot / 3;
        prosumer < self.np()
            && Phase::from_offset(slot % 3)
                .map(|ph| self.prosumers[prosumer].connection.occupies(ph))
                .unwrap_or(false)
    }

    /// Copy of the network with different base injections on the prosumers.
    pub fn with_prosumers(&self, prosumers: Vec<Prosumer>) -> Result<Network> {
        Network::new(
            self.buses.clone(),
            self.branches.clone(),
            prosumers,
            self.slack_bus.clone(),
        )
    }
}

fn build_topology(
    buses: &[Bus],
    branches: &[Branch],
    prosumers: &[Prosumer],
    slack_bus: &str,
) -> Result<Topology> {
    let mut bus_index = HashMap::with_capacity(buses.len());
    for (i, bus) in buses.iter().enumerate() {
        if !(bus.nominal_phase_voltage > 0.0) {
            return Err(Error::Structure(format!(
                "bus {} has non-positive nominal voltage",
                bus.id
            )));
        }
        if let Some(r) = bus.earthing_resistance {
            if !(r > 0.0) {
                return Err(Error::Structure(format!(
                    "bus {} has non-positive earthing resistance",
                    bus.id
                )));
            }
        }
        if bus_index.insert(bus.id.clone(), i).is_some() {
            return Err(Error::Structure(format!("duplicate bus id {}", bus.id)));
        }
    }
    let slack = *bus_index
        .get(slack_bus)
        .ok_or_else(|| Error::Reference(format!("slack bus {slack_bus} is not a bus")))?;

    if buses.is_empty() || branches.len() + 1 != buses.len() {
        return Err(Error::Structure(format!(
            "a radial network needs nb = nn - 1 (nn = {}, nb = {})",
            buses.len(),
            branches.len()
        )));
    }

    let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); buses.len()];
    for (k, br) in branches.iter().enumerate() {
        let from = *bus_index
            .get(&br.from_bus)
            .ok_or_else(|| Error::Reference(format!("branch {} from-bus {}", br.id, br.from_bus)))?;
        let to = *bus_index
            .get(&br.to_bus)
            .ok_or_else(|| Error::Reference(format!("branch {} to-bus {}", br.id, br.to_bus)))?;
        if from == to {
            return Err(Error::Structure(format!("branch {} is a self-loop", br.id)));
        }
        if !(br.length > 0.0) || !(br.current_rating > 0.0) {
            return Err(Error::Structure(format!(
                "branch {} needs positive length and current rating",
                br.id
            )));
        }
        adjacency[from].push((to, k));
        adjacency[to].push((from, k));
    }

    let mut parent = vec![None; buses.len()];
    let mut parent_bus = vec![None; buses.len()];
    let mut seen = vec![false; buses.len()];
    let mut order = Vec::with_capacity(buses.len());
    let mut queue = VecDeque::from([slack]);
    seen[slack] = true;
    while let Some(b) = queue.pop_front() {
        order.push(b);
        for &(next, k) in &adjacency[b] {
            if Some(k) == parent[b].map(|(pk, _)| pk) {
                continue;
            }
            if seen[next] {
                return Err(Error::Structure(format!(
                    "branch {} closes a loop",
                    branches[k].id
                )));
            }
            seen[next] = true;
            let downstream = bus_index[&branches[k].to_bus] == next;
            parent[next] = Some((k, downstream));
            parent_bus[next] = Some(b);
            queue.push_back(next);
        }
    }
    if order.len() != buses.len() {
        let missing = seen.iter().position(|s| !s).unwrap_or(0);
        return Err(Error::Structure(format!(
            "bus {} is not reachable from the slack",
            buses[missing].id
        )));
    }

    let mut prosumer_bus = Vec::with_capacity(prosumers.len());
    let mut prosumers_at = vec![Vec::new(); buses.len()];
    for (i, p) in prosumers.iter().enumerate() {
        let b = *bus_index
            .get(&p.bus)
            .ok_or_else(|| Error::Reference(format!("prosumer {} on unknown bus {}", p.name, p.bus)))?;
        prosumer_bus.push(b);
        prosumers_at[b].push(i);
    }

    Ok(Topology {
        bus_index,
        order,
        parent,
        parent_bus,
        prosumer_bus,
        prosumers_at,
        slack,
    })
}

/// Forecast injections for one quarter-hour, one entry per prosumer-phase slot.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseCase {
    injections: Vec<f64>,
    quarter_hour_duration: f64,
}

impl BaseCase {
    /// Validates a 3np injection vector (MWh) against the network's phase occupancy.
    pub fn new(network: &Network, injections: Vec<f64>) -> Result<Self> {
        check_injections(network, &injections)?;
        Ok(BaseCase {
            injections,
            quarter_hour_duration: QUARTER_HOUR,
        })
    }

    /// Spreads each prosumer's `base_injection` over its occupied phases.
    pub fn from_network(network: &Network) -> Self {
        let mut injections = vec![0.0; 3 * network.np()];
        for (i, p) in network.prosumers().iter().enumerate() {
            let phases = p.connection.phases();
            let share = p.base_injection / phases.len() as f64;
            for ph in phases {
                injections[3 * i + ph.offset()] = share;
            }
        }
        BaseCase {
            injections,
            quarter_hour_duration: QUARTER_HOUR,
        }
    }

    pub fn zeros(network: &Network) -> Self {
        BaseCase {
            injections: vec![0.0; 3 * network.np()],
            quarter_hour_duration: QUARTER_HOUR,
        }
    }

    pub fn injections(&self) -> &[f64] {
        &self.injections
    }

    pub fn quarter_hour_duration(&self) -> f64 {
        self.quarter_hour_duration
    }

    /// Total injection of one prosumer over all its phases.
    pub fn prosumer_total(&self, prosumer: usize) -> f64 {
        self.injections[3 * prosumer..3 * prosumer + 3].iter().sum()
    }
}

pub(crate) fn check_injections(network: &Network, injections: &[f64]) -> Result<()> {
    if injections.len() != 3 * network.np() {
        return Err(Error::Dimension {
            expected: 3 * network.np(),
            actual: injections.len(),
        });
    }
    for (slot, &e) in injections.iter().enumerate() {
        if !e.is_finite() {
            return Err(Error::Consistency(format!("injection slot {slot} is not finite")));
        }
        if e != 0.0 && !network.slot_is_occupied(slot) {
            let p = &network.prosumers()[slot / 3];
            return Err(Error::Consistency(format!(
                "prosumer {} ({}) has an injection on phase {} which it does not occupy",
                slot / 3,
                p.name,
                Phase::from_offset(slot % 3).unwrap()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Slack plus one load bus on a single branch.
    pub fn two_bus(r_per_m: f64, length: f64, connection: Connection) -> Network {
        let mut load = Bus::new("load");
        load.earthing_resistance = Some(DEFAULT_EARTHING_RESISTANCE);
        Network::new(
            vec![Bus::new("slack"), load],
            vec![Branch {
                id: "L1".into(),
                from_bus: "slack".into(),
                to_bus: "load".into(),
                length,
                impedance: ImpedanceMatrix::uniform(r_per_m, 0.0),
                current_rating: 200.0,
            }],
            vec![Prosumer {
                name: "P0".into(),
                bus: "load".into(),
                connection,
                base_injection: 0.0,
            }],
            "slack",
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixed() -> Network {
        let buses = vec![Bus::new("s"), Bus::new("x"), Bus::new("y")];
        let branch = |id: &str, f: &str, t: &str| Branch {
            id: id.into(),
            from_bus: f.into(),
            to_bus: t.into(),
            length: 10.0,
            impedance: ImpedanceMatrix::uniform(1e-3, 1e-4),
            current_rating: 100.0,
        };
        let prosumer = |name: &str, bus: &str, c: Connection| Prosumer {
            name: name.into(),
            bus: bus.into(),
            connection: c,
            base_injection: 0.0,
        };
        Network::new(
            buses,
            vec![branch("l1", "s", "x"), branch("l2", "y", "x")],
            vec![
                prosumer("p0", "x", Connection::ThreePhase),
                prosumer("p1", "y", Connection::Single(Phase::A)),
            ],
            "s",
        )
        .unwrap()
    }

    #[test]
    fn slots() {
        let net = mixed();
        assert_eq!(net.injection_slot(0, Phase::A).unwrap(), 0);
        assert_eq!(net.injection_slot(0, Phase::C).unwrap(), 2);
        assert_eq!(net.injection_slot(1, Phase::A).unwrap(), 3);
        assert!(matches!(
            net.injection_slot(1, Phase::B),
            Err(Error::Consistency(_))
        ));
        assert!(matches!(net.injection_slot(7, Phase::A), Err(Error::Reference(_))));
        assert_eq!(net.occupied_slots(0), vec![0, 1, 2]);
        assert_eq!(net.occupied_slots(1), vec![3]);
    }

    #[test]
    fn slot_formula_for_larger_index() {
        let buses: Vec<Bus> = (0..21).map(|i| Bus::new(format!("b{i}"))).collect();
        let branches = (1..21)
            .map(|i| Branch {
                id: format!("l{i}"),
                from_bus: format!("b{}", i - 1),
                to_bus: format!("b{i}"),
                length: 1.0,
                impedance: ImpedanceMatrix::uniform(1e-3, 0.0),
                current_rating: 10.0,
            })
            .collect();
        let prosumers = (0..20)
            .map(|i| Prosumer {
                name: format!("p{i}"),
                bus: format!("b{}", i + 1),
                connection: Connection::ThreePhase,
                base_injection: 0.0,
            })
            .collect();
        let net = Network::new(buses, branches, prosumers, "b0").unwrap();
        assert_eq!(net.injection_slot(19, Phase::C).unwrap(), 59);
    }

    #[test]
    fn reversed_branch_orientation_is_tracked() {
        let net = mixed();
        let y = net.bus_index("y").unwrap();
        let x = net.bus_index("x").unwrap();
        assert_eq!(net.parent_branch(x), Some((0, true)));
        assert_eq!(net.parent_branch(y), Some((1, false)));
        assert_eq!(net.parent_bus(y), Some(x));
        assert_eq!(net.sweep_order()[0], net.slack_index());
    }

    #[test]
    fn rejects_loops_and_islands() {
        let buses = vec![Bus::new("s"), Bus::new("x"), Bus::new("y")];
        let br = |id: &str, f: &str, t: &str| Branch {
            id: id.into(),
            from_bus: f.into(),
            to_bus: t.into(),
            length: 1.0,
            impedance: ImpedanceMatrix::uniform(1e-3, 0.0),
            current_rating: 10.0,
        };
        // doubled s-x line leaves y isolated
        let err = Network::new(
            buses.clone(),
            vec![br("a", "s", "x"), br("b", "x", "s")],
            vec![],
            "s",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Structure(_)));
        let err = Network::new(buses.clone(), vec![br("a", "s", "x")], vec![], "s").unwrap_err();
        assert!(matches!(err, Error::Structure(_)));
        let err = Network::new(buses, vec![br("a", "s", "x"), br("b", "x", "zz")], vec![], "s")
            .unwrap_err();
        assert!(matches!(err, Error::Reference(_)));
    }

    #[test]
    fn base_case_validation() {
        let net = mixed();
        assert!(BaseCase::new(&net, vec![0.0; 6]).is_ok());
        assert!(matches!(
            BaseCase::new(&net, vec![0.0; 5]),
            Err(Error::Dimension { expected: 6, actual: 5 })
        ));
        let mut inj = vec![0.0; 6];
        inj[4] = -1e-4;
        assert!(matches!(BaseCase::new(&net, inj), Err(Error::Consistency(_))));
    }

    #[test]
    fn sequence_conversion_keeps_positive_sequence() {
        let z = ImpedanceMatrix::from_sequence(0.446, 0.071, 1.505, 0.083);
        let zs = z.0[0][0];
        let zm = z.0[0][1];
        let z1 = zs - zm;
        assert!((z1.re - 0.446e-3).abs() < 1e-15);
        assert!((z1.im - 0.071e-3).abs() < 1e-15);
        assert_eq!(zm.re, 0.0);
        assert_eq!(z.0[3][3], zs);
    }
}
