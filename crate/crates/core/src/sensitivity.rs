//! Voltage and current sensitivity factors (VSF / CSF) around a base case.
//!
//! Column `j` holds the response of every RMS quantity to one extra MWh injected
//! at prosumer-phase slot `j` and absorbed by the slack, obtained by finite
//! differences of exact load flows (central by default). Rows follow the flattening of
//! [`StateMagnitudes`]: node-phase for VSF, branch-phase for CSF. Neutral
//! conductor currents are linearised as phasors (real and imaginary row per
//! branch) since their magnitude has a kink at the balanced operating point.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{check_injections, BaseCase, Network};
use crate::power_flow::{self, losses, NetworkState, SolverOptions, StateMagnitudes};

/// 250 Wh, i.e. 1 kW held over a quarter-hour.
pub const DEFAULT_PERTURBATION: f64 = 250e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifferenceScheme {
    /// `(f(x + e) - f(x)) / e`, one load flow per slot.
    Forward,
    /// `(f(x + e) - f(x - e)) / 2e`, two load flows per slot.
    #[default]
    Central,
}

/// Dense column-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ColumnMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ColumnMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    fn column_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[col * self.rows + row]
    }

    /// `target += scale * column(j)`
    pub fn axpy_column(&self, j: usize, scale: f64, target: &mut [f64]) {
        for (t, c) in target.iter_mut().zip(self.column(j)) {
            *t += scale * c;
        }
    }

    pub fn is_zero_column(&self, j: usize) -> bool {
        self.column(j).iter().all(|&x| x == 0.0)
    }
}

/// Signed per-slot energy deviation from the base case, MWh.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InjectionDelta(pub Vec<f64>);

impl InjectionDelta {
    pub fn zeros(network: &Network) -> Self {
        InjectionDelta(vec![0.0; 3 * network.np()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn add(&mut self, other: &InjectionDelta) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scaled(&self, factor: f64) -> InjectionDelta {
        InjectionDelta(self.0.iter().map(|x| x * factor).collect())
    }

    /// Adds `energy` spread equally over the prosumer's occupied phases.
    pub fn add_prosumer(&mut self, network: &Network, prosumer: usize, energy: f64) {
        let slots = network.occupied_slots(prosumer);
        let share = energy / slots.len() as f64;
        for s in slots {
            self.0[s] += share;
        }
    }
}

/// Injection change of a supplier-to-consumer trade of `energy` MWh.
///
/// The supplier injects more and the consumer draws more; each side is a
/// transaction with the slack, so the network effect is their superposition.
pub fn transaction_delta(
    network: &Network,
    supplier: usize,
    consumer: usize,
    energy: f64,
) -> Result<InjectionDelta> {
    if !(energy >= 0.0) || !energy.is_finite() {
        return Err(Error::InvalidEnergy(format!(
            "transaction energy must be non-negative, got {energy}"
        )));
    }
    for p in [supplier, consumer] {
        if p >= network.np() {
            return Err(Error::Reference(format!("prosumer {p} does not exist")));
        }
    }
    let mut delta = InjectionDelta::zeros(network);
    delta.add_prosumer(network, supplier, energy);
    delta.add_prosumer(network, consumer, -energy);
    Ok(delta)
}

/// Linear state before flooring and loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearState {
    pub voltages: Vec<f64>,
    pub currents: Vec<f64>,
    /// Interleaved real and imaginary parts of the neutral conductor currents.
    pub neutral_phasors: Vec<f64>,
    pub neutral_voltages: Vec<f64>,
}

impl LinearState {
    pub fn to_magnitudes(&self, network: &Network) -> StateMagnitudes {
        let neutral_currents: Vec<f64> = self
            .neutral_phasors
            .chunks_exact(2)
            .map(|c| c[0].hypot(c[1]))
            .collect();
        let loss_power = losses(
            network,
            &self.currents,
            &neutral_currents,
            &self.neutral_voltages,
        )
        .expect("linear state dimensioned to its network");
        StateMagnitudes {
            voltages: self.voltages.clone(),
            currents: self.currents.clone(),
            neutral_currents,
            neutral_voltages: self.neutral_voltages.clone(),
            loss_power,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SensitivityMatrices {
    /// 3nn x 3np, volts per MWh.
    pub vsf: ColumnMatrix,
    /// 3nb x 3np, amps per MWh on signed phase currents.
    pub csf: ColumnMatrix,
    /// 2nb x 3np, amps per MWh on neutral current phasors (re, im).
    pub neutral_csf: ColumnMatrix,
    pub base_state: StateMagnitudes,
    base_neutral_phasors: Vec<f64>,
    pub base_injections: Vec<f64>,
    /// MWh.
    pub perturbation: f64,
    pub scheme: DifferenceScheme,
}

pub fn build(network: &Network, base_case: &BaseCase) -> Result<SensitivityMatrices> {
    build_at(network, base_case.injections(), DEFAULT_PERTURBATION)
}

/// Linearises around an arbitrary injection vector.
pub fn build_at(
    network: &Network,
    injections: &[f64],
    perturbation: f64,
) -> Result<SensitivityMatrices> {
    build_with(network, injections, perturbation, DifferenceScheme::default())
}

type Sample = (StateMagnitudes, Vec<f64>);

pub fn build_with(
    network: &Network,
    injections: &[f64],
    perturbation: f64,
    scheme: DifferenceScheme,
) -> Result<SensitivityMatrices> {
    check_injections(network, injections)?;
    if !(perturbation > 0.0) {
        return Err(Error::InvalidEnergy(format!(
            "perturbation must be positive, got {perturbation}"
        )));
    }
    let options = SolverOptions::default();
    let base_flow = power_flow::solve_with(network, injections, &options)?;
    let base = base_flow.magnitudes();
    let base_phasors = phasor_parts(&base_flow);
    let slots = 3 * network.np();

    let sample = |j: usize, step: f64| -> Result<Sample> {
        let mut perturbed = injections.to_vec();
        perturbed[j] += step;
        power_flow::solve_with(network, &perturbed, &options)
            .map(|st: NetworkState| (st.magnitudes(), phasor_parts(&st)))
            .map_err(|e| Error::SensitivityBuild {
                slot: j,
                source: Box::new(e),
            })
    };
    let columns: Vec<(usize, Sample, Option<Sample>)> = (0..slots)
        .into_par_iter()
        .filter(|&j| network.slot_is_occupied(j))
        .map(|j| {
            let up = sample(j, perturbation)?;
            let down = match scheme {
                DifferenceScheme::Forward => None,
                DifferenceScheme::Central => Some(sample(j, -perturbation)?),
            };
            Ok((j, up, down))
        })
        .collect::<Result<_>>()?;

    let mut vsf = ColumnMatrix::zeros(3 * network.nn(), slots);
    let mut csf = ColumnMatrix::zeros(3 * network.nb(), slots);
    let mut neutral_csf = ColumnMatrix::zeros(2 * network.nb(), slots);
    let base_sample = (base.clone(), base_phasors.clone());
    for (j, up, down) in columns {
        let (low, span) = match &down {
            Some(d) => (d, 2.0 * perturbation),
            None => (&base_sample, perturbation),
        };
        let fill = |col: &mut [f64], after: &[f64], before: &[f64]| {
            for ((c, a), b) in col.iter_mut().zip(after).zip(before) {
                *c = (a - b) / span;
            }
        };
        fill(vsf.column_mut(j), &up.0.voltages, &low.0.voltages);
        fill(csf.column_mut(j), &up.0.currents, &low.0.currents);
        fill(neutral_csf.column_mut(j), &up.1, &low.1);
    }

    Ok(SensitivityMatrices {
        vsf,
        csf,
        neutral_csf,
        base_state: base,
        base_neutral_phasors: base_phasors,
        base_injections: injections.to_vec(),
        perturbation,
        scheme,
    })
}

fn phasor_parts(state: &NetworkState) -> Vec<f64> {
    state
        .neutral_currents
        .iter()
        .flat_map(|c| [c.re, c.im])
        .collect()
}

impl SensitivityMatrices {
    pub fn base_linear(&self) -> LinearState {
        LinearState {
            voltages: self.base_state.voltages.clone(),
            currents: self.base_state.currents.clone(),
            neutral_phasors: self.base_neutral_phasors.clone(),
            neutral_voltages: self.base_state.neutral_voltages.clone(),
        }
    }

    /// Adds the linear response to `delta` onto `state` in place.
    pub fn apply(&self, state: &mut LinearState, delta: &[f64]) {
        for (j, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            self.vsf.axpy_column(j, d, &mut state.voltages);
            self.csf.axpy_column(j, d, &mut state.currents);
            self.neutral_csf.axpy_column(j, d, &mut state.neutral_phasors);
        }
    }

    pub fn linear(&self, delta: &InjectionDelta) -> Result<LinearState> {
        if delta.0.len() != self.vsf.cols() {
            return Err(Error::Dimension {
                expected: self.vsf.cols(),
                actual: delta.0.len(),
            });
        }
        let mut state = self.base_linear();
        self.apply(&mut state, &delta.0);
        Ok(state)
    }

    /// Estimated RMS state after `delta`, with losses re-evaluated from the
    /// estimated currents and the base-case neutral voltages.
    pub fn estimate(&self, network: &Network, delta: &InjectionDelta) -> Result<StateMagnitudes> {
        Ok(self.linear(delta)?.to_magnitudes(network))
    }

    pub fn nonzero_columns(&self) -> usize {
        (0..self.vsf.cols())
            .filter(|&j| !(self.vsf.is_zero_column(j) && self.csf.is_zero_column(j)))
            .count()
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SampleError {
    pub max_voltage_error: f64,
    pub mean_voltage_error: f64,
    pub max_current_error: f64,
    pub mean_current_error: f64,
    /// Voltage entries whose estimated and exact deltas disagree in sign.
    pub voltage_sign_mismatches: usize,
    pub current_sign_mismatches: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AccuracyReport {
    pub samples: Vec<SampleError>,
    /// Exact deltas smaller than this are excluded from sign comparison.
    pub sign_threshold: f64,
}

impl AccuracyReport {
    pub fn max_voltage_error(&self) -> f64 {
        self.samples.iter().map(|s| s.max_voltage_error).fold(0.0, f64::max)
    }

    pub fn mean_voltage_error(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.mean_voltage_error).sum::<f64>() / self.samples.len() as f64
    }

    pub fn max_current_error(&self) -> f64 {
        self.samples.iter().map(|s| s.max_current_error).fold(0.0, f64::max)
    }

    pub fn voltage_sign_mismatches(&self) -> usize {
        self.samples.iter().map(|s| s.voltage_sign_mismatches).sum()
    }

    pub fn current_sign_mismatches(&self) -> usize {
        self.samples.iter().map(|s| s.current_sign_mismatches).sum()
    }
}

/// Compares linear estimates with exact load flows for each sample delta.
pub fn accuracy_report(
    network: &Network,
    base_case: &BaseCase,
    matrices: &SensitivityMatrices,
    deltas: &[InjectionDelta],
) -> Result<AccuracyReport> {
    let options = SolverOptions::default();
    let slack_voltage = network.buses()[network.slack_index()].nominal_phase_voltage;
    let sign_threshold = 10.0 * options.tolerance * slack_voltage;
    let base = &matrices.base_state;
    let samples = deltas
        .par_iter()
        .map(|delta| {
            let estimate = matrices.estimate(network, delta)?;
            let injections: Vec<f64> = base_case
                .injections()
                .iter()
                .zip(&delta.0)
                .map(|(b, d)| b + d)
                .collect();
            let exact = power_flow::solve_with(network, &injections, &options)?.magnitudes();
            let compare = |est: &[f64], ex: &[f64], b: &[f64]| {
                let mut max: f64 = 0.0;
                let mut sum = 0.0;
                let mut mismatches = 0;
                for ((e, x), b0) in est.iter().zip(ex).zip(b) {
                    let err = (e - x).abs();
                    max = max.max(err);
                    sum += err;
                    let exact_delta = x - b0;
                    let est_delta = e - b0;
                    if exact_delta.abs() > sign_threshold && exact_delta * est_delta <= 0.0 {
                        mismatches += 1;
                    }
                }
                let mean = if est.is_empty() { 0.0 } else { sum / est.len() as f64 };
                (max, mean, mismatches)
            };
            let (mv, av, sv) = compare(&estimate.voltages, &exact.voltages, &base.voltages);
            let (mc, ac, sc) = compare(&estimate.currents, &exact.currents, &base.currents);
            Ok(SampleError {
                max_voltage_error: mv,
                mean_voltage_error: av,
                max_current_error: mc,
                mean_current_error: ac,
                voltage_sign_mismatches: sv,
                current_sign_mismatches: sc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AccuracyReport {
        samples,
        sign_threshold,
    })
}
