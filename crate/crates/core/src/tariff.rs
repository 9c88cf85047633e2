//! Distribution network usage tariff (DNUT): current, voltage and loss charges
//! of a candidate transaction, the prosumer-by-prosumer DNUT matrix and the
//! normalisation used to tune the linear constants.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, QUARTER_HOUR};
use crate::power_flow::StateMagnitudes;
use crate::sensitivity::{transaction_delta, LinearState, SensitivityMatrices};

/// Smallest tradable energy, 1 Wh in MWh.
pub const MIN_ENERGY: f64 = 1e-6;

/// How a branch current that changes direction is charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixedSignRule {
    /// `|I_at - I_bt|`
    #[default]
    Literal,
    /// `|I_at| - |I_bt|`
    MagnitudeChange,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TariffConstants {
    /// EUR per violating branch-phase.
    pub c_i_limit: f64,
    /// EUR per (A·m).
    pub c_i_linear: f64,
    /// EUR per violating node-phase.
    pub c_u_limit: f64,
    /// EUR per V.
    pub c_u_linear: f64,
    /// EUR per MWh.
    pub c_loss: f64,
    pub mixed_sign: MixedSignRule,
}

impl Default for TariffConstants {
    fn default() -> Self {
        TariffConstants {
            c_i_limit: 10.0,
            c_i_linear: 3.588e-6,
            c_u_limit: 10.0,
            c_u_linear: 1.538e-4,
            c_loss: 197.461,
            mixed_sign: MixedSignRule::Literal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Current,
    Voltage,
    Loss,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Current, Component::Voltage, Component::Loss];

    pub fn name(self) -> &'static str {
        match self {
            Component::Current => "current",
            Component::Voltage => "voltage",
            Component::Loss => "loss",
        }
    }
}

impl TariffConstants {
    /// Constants used for the component-isolation runs.
    pub fn isolation_reference() -> Self {
        TariffConstants {
            c_i_linear: 1.3952e-5,
            c_u_linear: 2.3786e-4,
            c_loss: 2047.99,
            ..Default::default()
        }
    }

    /// Unit linear constants and no limit charges.
    pub fn unit() -> Self {
        TariffConstants {
            c_i_limit: 0.0,
            c_i_linear: 1.0,
            c_u_limit: 0.0,
            c_u_linear: 1.0,
            c_loss: 1.0,
            mixed_sign: MixedSignRule::Literal,
        }
    }

    pub fn zero() -> Self {
        TariffConstants {
            c_i_limit: 0.0,
            c_i_linear: 0.0,
            c_u_limit: 0.0,
            c_u_linear: 0.0,
            c_loss: 0.0,
            mixed_sign: MixedSignRule::Literal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("c_i_limit", self.c_i_limit),
            ("c_i_linear", self.c_i_linear),
            ("c_u_limit", self.c_u_limit),
            ("c_u_linear", self.c_u_linear),
            ("c_loss", self.c_loss),
        ];
        for (name, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    /// Keeps only the constants of one component, the rest are zeroed.
    pub fn only(&self, component: Component) -> Self {
        let mut c = TariffConstants {
            mixed_sign: self.mixed_sign,
            ..TariffConstants::zero()
        };
        match component {
            Component::Current => {
                c.c_i_limit = self.c_i_limit;
                c.c_i_linear = self.c_i_linear;
            }
            Component::Voltage => {
                c.c_u_limit = self.c_u_limit;
                c.c_u_linear = self.c_u_linear;
            }
            Component::Loss => c.c_loss = self.c_loss,
        }
        c
    }

    pub fn linear(&self, component: Component) -> f64 {
        match component {
            Component::Current => self.c_i_linear,
            Component::Voltage => self.c_u_linear,
            Component::Loss => self.c_loss,
        }
    }

    pub fn set_linear(&mut self, component: Component, value: f64) {
        match component {
            Component::Current => self.c_i_linear = value,
            Component::Voltage => self.c_u_linear = value,
            Component::Loss => self.c_loss = value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChargeBreakdown {
    pub ic_limit: f64,
    pub ic_linear: f64,
    pub uc_limit: f64,
    pub uc_linear: f64,
    pub pc: f64,
    pub total: f64,
}

impl ChargeBreakdown {
    pub fn new(ic_limit: f64, ic_linear: f64, uc_limit: f64, uc_linear: f64, pc: f64) -> Self {
        ChargeBreakdown {
            ic_limit,
            ic_linear,
            uc_limit,
            uc_linear,
            pc,
            total: ic_limit + ic_linear + uc_limit + uc_linear + pc,
        }
    }

    pub fn component(&self, component: Component) -> f64 {
        match component {
            Component::Current => self.ic_limit + self.ic_linear,
            Component::Voltage => self.uc_limit + self.uc_linear,
            Component::Loss => self.pc,
        }
    }

    pub fn limit_fired(&self) -> bool {
        self.ic_limit > 0.0 || self.uc_limit > 0.0
    }
}

/// Change of traffic on a branch for signed currents before and after a trade.
/// Zero counts as positive.
pub fn delta_current(before: f64, after: f64, rule: MixedSignRule) -> f64 {
    match (after >= 0.0, before >= 0.0) {
        (true, true) => after - before,
        (false, false) => -(after - before),
        _ => match rule {
            MixedSignRule::Literal => (after - before).abs(),
            MixedSignRule::MagnitudeChange => after.abs() - before.abs(),
        },
    }
}

/// Change of distance from nominal voltage. Positive when moving away from it.
///
/// Cells are evaluated on the deviations from nominal, which are exact for
/// voltages within a factor two of it, so each cell is a single rounding of
/// its exact value.
pub fn delta_voltage(before: f64, after: f64, nominal: f64) -> f64 {
    let (a, b) = (after - nominal, before - nominal);
    match (a >= 0.0, b >= 0.0) {
        // U_at - U_bt
        (true, true) => a - b,
        // U_at + U_bt - 2 U_nom
        (true, false) => a + b,
        // 2 U_nom - U_at - U_bt
        (false, true) => -a - b,
        // -(U_at - U_bt)
        (false, false) => -(a - b),
    }
}

/// `(ic_limit, ic_linear)` in EUR.
pub fn current_charge(
    network: &Network,
    before: &StateMagnitudes,
    after: &StateMagnitudes,
    constants: &TariffConstants,
) -> (f64, f64) {
    let mut limit = 0.0;
    let mut linear = 0.0;
    for (l, br) in network.branches().iter().enumerate() {
        for ph in 0..3 {
            let k = 3 * l + ph;
            let (bt, at) = (before.currents[k], after.currents[k]);
            if at.abs() >= br.current_rating {
                limit += constants.c_i_limit;
            }
            linear += constants.c_i_linear * delta_current(bt, at, constants.mixed_sign) * br.length;
        }
    }
    (limit, linear)
}

/// `(uc_limit, uc_linear)` in EUR.
pub fn voltage_charge(
    network: &Network,
    before: &StateMagnitudes,
    after: &StateMagnitudes,
    constants: &TariffConstants,
) -> (f64, f64) {
    let mut limit = 0.0;
    let mut linear = 0.0;
    for (n, bus) in network.buses().iter().enumerate() {
        let nom = bus.nominal_phase_voltage;
        for ph in 0..3 {
            let k = 3 * n + ph;
            let (bt, at) = (before.voltages[k], after.voltages[k]);
            if !(0.9 * nom <= at.abs() && at.abs() <= 1.1 * nom) {
                limit += constants.c_u_limit;
            }
            linear += constants.c_u_linear * delta_voltage(bt, at, nom);
        }
    }
    (limit, linear)
}

/// EUR for a change of loss power held over `qh_hours`.
pub fn loss_charge(before_loss: f64, after_loss: f64, constants: &TariffConstants, qh_hours: f64) -> f64 {
    constants.c_loss * (after_loss - before_loss) * qh_hours * 1e-6
}

pub fn charges(
    network: &Network,
    before: &StateMagnitudes,
    after: &StateMagnitudes,
    constants: &TariffConstants,
) -> ChargeBreakdown {
    let (ic_limit, ic_linear) = current_charge(network, before, after, constants);
    let (uc_limit, uc_linear) = voltage_charge(network, before, after, constants);
    let pc = loss_charge(before.loss_power, after.loss_power, constants, QUARTER_HOUR);
    ChargeBreakdown::new(ic_limit, ic_linear, uc_limit, uc_linear, pc)
}

/// Evaluates DNUT for candidate trades against a fixed pre-trade state.
pub struct DnutEvaluator<'a> {
    network: &'a Network,
    matrices: &'a SensitivityMatrices,
    before_linear: LinearState,
    before: StateMagnitudes,
    constants: TariffConstants,
    earthing_loss: f64,
}

impl<'a> DnutEvaluator<'a> {
    pub fn new(
        network: &'a Network,
        matrices: &'a SensitivityMatrices,
        before: LinearState,
        constants: TariffConstants,
    ) -> Self {
        let magnitudes = before.to_magnitudes(network);
        let earthing_loss = network
            .buses()
            .iter()
            .zip(&before.neutral_voltages)
            .filter_map(|(b, u)| b.earthing_resistance.map(|r| u * u / r))
            .sum();
        DnutEvaluator {
            network,
            matrices,
            before_linear: before,
            before: magnitudes,
            constants,
            earthing_loss,
        }
    }

    /// Evaluator around the linearisation point itself.
    pub fn at_base(
        network: &'a Network,
        matrices: &'a SensitivityMatrices,
        constants: TariffConstants,
    ) -> Self {
        Self::new(network, matrices, matrices.base_linear(), constants)
    }

    pub fn before(&self) -> &StateMagnitudes {
        &self.before
    }

    pub fn constants(&self) -> &TariffConstants {
        &self.constants
    }

    fn check(&self, supplier: usize, consumer: usize, energy: f64) -> Result<bool> {
        if !(energy >= MIN_ENERGY) {
            return Err(Error::InvalidEnergy(format!(
                "traded energy {energy} MWh is below the 1 Wh minimum"
            )));
        }
        for p in [supplier, consumer] {
            if p >= self.network.np() {
                return Err(Error::Reference(format!("prosumer {p} does not exist")));
            }
        }
        let prosumers = self.network.prosumers();
        Ok(prosumers[supplier].bus == prosumers[consumer].bus)
    }

    /// `(EUR/MWh, breakdown in EUR)` for `supplier` selling `energy` MWh to `consumer`.
    ///
    /// Streams over the affected sensitivity columns without materialising
    /// the post-trade state.
    pub fn pair(&self, supplier: usize, consumer: usize, energy: f64) -> Result<(f64, ChargeBreakdown)> {
        if self.check(supplier, consumer, energy)? {
            return Ok((0.0, ChargeBreakdown::default()));
        }
        let mut cols: Vec<(usize, f64)> = Vec::with_capacity(6);
        for (p, e) in [(supplier, energy), (consumer, -energy)] {
            let slots = self.network.occupied_slots(p);
            let share = e / slots.len() as f64;
            cols.extend(slots.into_iter().map(|s| (s, share)));
        }
        let m = self.matrices;
        let lin = &self.before_linear;
        let c = &self.constants;

        let (mut ic_limit, mut ic_linear, mut loss) = (0.0, 0.0, self.earthing_loss);
        for (l, br) in self.network.branches().iter().enumerate() {
            let r = br.resistance();
            for (ph, r_ph) in r.iter().take(3).enumerate() {
                let k = 3 * l + ph;
                let at = cols
                    .iter()
                    .fold(lin.currents[k], |acc, &(j, d)| acc + m.csf.get(k, j) * d);
                if at.abs() >= br.current_rating {
                    ic_limit += c.c_i_limit;
                }
                ic_linear += c.c_i_linear * delta_current(self.before.currents[k], at, c.mixed_sign) * br.length;
                loss += at * at * r_ph;
            }
            let (mut re, mut im) = (lin.neutral_phasors[2 * l], lin.neutral_phasors[2 * l + 1]);
            for &(j, d) in &cols {
                re += m.neutral_csf.get(2 * l, j) * d;
                im += m.neutral_csf.get(2 * l + 1, j) * d;
            }
            loss += (re * re + im * im) * r[3];
        }

        let (mut uc_limit, mut uc_linear) = (0.0, 0.0);
        for (n, bus) in self.network.buses().iter().enumerate() {
            let nom = bus.nominal_phase_voltage;
            for ph in 0..3 {
                let k = 3 * n + ph;
                let at = cols
                    .iter()
                    .fold(lin.voltages[k], |acc, &(j, d)| acc + m.vsf.get(k, j) * d);
                if !(0.9 * nom <= at.abs() && at.abs() <= 1.1 * nom) {
                    uc_limit += c.c_u_limit;
                }
                uc_linear += c.c_u_linear * delta_voltage(self.before.voltages[k], at, nom);
            }
        }
        let pc = loss_charge(self.before.loss_power, loss, c, QUARTER_HOUR);
        let breakdown = ChargeBreakdown::new(ic_limit, ic_linear, uc_limit, uc_linear, pc);
        Ok((breakdown.total / energy, breakdown))
    }

    /// Estimated post-trade state, evaluated through the full linear map.
    pub fn after_state(&self, supplier: usize, consumer: usize, energy: f64) -> Result<StateMagnitudes> {
        if self.check(supplier, consumer, energy)? {
            return Ok(self.before.clone());
        }
        let delta = transaction_delta(self.network, supplier, consumer, energy)?;
        let mut after = self.before_linear.clone();
        self.matrices.apply(&mut after, delta.as_slice());
        Ok(after.to_magnitudes(self.network))
    }

    /// Charges computed from the materialised post-trade state.
    pub fn evaluate(&self, supplier: usize, consumer: usize, energy: f64) -> Result<PairEvaluation> {
        let after = self.after_state(supplier, consumer, energy)?;
        let breakdown = if self.check(supplier, consumer, energy)? {
            ChargeBreakdown::default()
        } else {
            charges(self.network, &self.before, &after, &self.constants)
        };
        Ok(PairEvaluation {
            dnut: breakdown.total / energy,
            breakdown,
            after,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PairEvaluation {
    /// EUR/MWh.
    pub dnut: f64,
    pub breakdown: ChargeBreakdown,
    pub after: StateMagnitudes,
}

/// Number of branch-phases at or above rating plus node-phases outside the
/// ±10% band.
pub fn limit_breaches(network: &Network, state: &StateMagnitudes) -> usize {
    let mut count = 0;
    for (l, br) in network.branches().iter().enumerate() {
        count += (0..3)
            .filter(|ph| state.currents[3 * l + ph].abs() >= br.current_rating)
            .count();
    }
    for (n, bus) in network.buses().iter().enumerate() {
        let nom = bus.nominal_phase_voltage;
        count += (0..3)
            .filter(|ph| {
                let u = state.voltages[3 * n + ph].abs();
                !(0.9 * nom <= u && u <= 1.1 * nom)
            })
            .count();
    }
    count
}

pub fn pair_dnut(
    network: &Network,
    matrices: &SensitivityMatrices,
    supplier: usize,
    consumer: usize,
    energy: f64,
    constants: &TariffConstants,
) -> Result<(f64, ChargeBreakdown)> {
    DnutEvaluator::at_base(network, matrices, *constants).pair(supplier, consumer, energy)
}

/// Square matrix indexed `[supplier][consumer]`.
pub type Square = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DnutMatrix {
    /// EUR/MWh.
    pub values: Square,
    pub current: Square,
    pub voltage: Square,
    pub loss: Square,
    /// Per-pair breakdowns in EUR.
    pub breakdowns: Vec<Vec<ChargeBreakdown>>,
    /// MWh.
    pub reference_energy: f64,
}

impl DnutMatrix {
    pub fn size(&self) -> usize {
        self.values.len()
    }

    pub fn component(&self, component: Component) -> &Square {
        match component {
            Component::Current => &self.current,
            Component::Voltage => &self.voltage,
            Component::Loss => &self.loss,
        }
    }

    /// Pairs (supplier, consumer) whose limit charges fired.
    pub fn limit_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (s, row) in self.breakdowns.iter().enumerate() {
            for (d, b) in row.iter().enumerate() {
                if b.limit_fired() {
                    out.push((s, d));
                }
            }
        }
        out
    }
}

pub fn build_matrix(
    network: &Network,
    matrices: &SensitivityMatrices,
    energy: f64,
    constants: &TariffConstants,
) -> Result<DnutMatrix> {
    build_matrix_with(&DnutEvaluator::at_base(network, matrices, *constants), energy)
}

pub fn build_matrix_with(evaluator: &DnutEvaluator<'_>, energy: f64) -> Result<DnutMatrix> {
    let np = evaluator.network.np();
    let rows: Vec<Vec<ChargeBreakdown>> = (0..np)
        .into_par_iter()
        .map(|s| {
            (0..np)
                .map(|d| {
                    if s == d {
                        if !(energy >= MIN_ENERGY) {
                            return Err(Error::InvalidEnergy(format!(
                                "reference energy {energy} MWh is below the 1 Wh minimum"
                            )));
                        }
                        Ok(ChargeBreakdown::default())
                    } else {
                        evaluator.pair(s, d, energy).map(|(_, b)| b)
                    }
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let per_mwh = |f: &dyn Fn(&ChargeBreakdown) -> f64| -> Square {
        rows.iter()
            .map(|r| r.iter().map(|b| f(b) / energy).collect())
            .collect()
    };
    Ok(DnutMatrix {
        values: per_mwh(&|b| b.total),
        current: per_mwh(&|b| b.component(Component::Current)),
        voltage: per_mwh(&|b| b.component(Component::Voltage)),
        loss: per_mwh(&|b| b.component(Component::Loss)),
        breakdowns: rows,
        reference_energy: energy,
    })
}

pub fn off_diagonal(m: &Square) -> impl Iterator<Item = f64> + '_ {
    m.iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().enumerate().filter(move |(j, _)| *j != i).map(|(_, v)| *v))
}

pub fn mean_abs_off_diagonal(m: &Square) -> f64 {
    let (sum, n) = off_diagonal(m).fold((0.0, 0usize), |(s, n), v| (s + v.abs(), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Population standard deviation of the off-diagonal entries.
pub fn std_off_diagonal(m: &Square) -> f64 {
    let vals: Vec<f64> = off_diagonal(m).collect();
    if vals.is_empty() {
        return 0.0;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Scales the three linear constants so that every component matrix has the
/// same off-diagonal spread and the summed matrix has the requested mean
/// absolute off-diagonal value.
///
/// `unit` must have been built with [`TariffConstants::unit`].
pub fn tune_constants(unit: &DnutMatrix, target_mean: f64, limit: f64) -> TariffConstants {
    let n = unit.size();
    let mut scales = [0.0; 3];
    for (k, c) in Component::ALL.iter().enumerate() {
        let sigma = std_off_diagonal(unit.component(*c));
        if sigma > 0.0 {
            scales[k] = 1.0 / sigma;
        } else {
            warn!("{} component matrix is identically flat, constant left at zero", c.name());
        }
    }
    let mut normalised = vec![vec![0.0; n]; n];
    for (k, c) in Component::ALL.iter().enumerate() {
        for (row, src) in normalised.iter_mut().zip(unit.component(*c)) {
            for (v, s) in row.iter_mut().zip(src) {
                *v += scales[k] * s;
            }
        }
    }
    let mean = mean_abs_off_diagonal(&normalised);
    let multiplier = if mean > 0.0 { target_mean / mean } else { 0.0 };
    TariffConstants {
        c_i_limit: limit,
        c_i_linear: multiplier * scales[0],
        c_u_limit: limit,
        c_u_linear: multiplier * scales[1],
        c_loss: multiplier * scales[2],
        mixed_sign: MixedSignRule::Literal,
    }
}
