//! Unbalanced four-wire load flow by backward/forward sweep.
//!
//! Every bus carries three phase potentials and a neutral potential relative to
//! remote earth. Prosumers are constant-power, unity power factor elements
//! connected phase-to-neutral; buses with an earthing resistance leak
//! `V_neutral / R_earth` to earth. The slack bus holds a balanced phase set at
//! its nominal voltage with a solidly earthed neutral.

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{check_injections, Network, QUARTER_HOUR};

type C = Complex64;

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Convergence threshold on the largest potential update, in per-unit of the slack voltage.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Phase-to-neutral voltage (per-unit of bus nominal) below which the case is infeasible.
    pub collapse_floor: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-6,
            max_iterations: 100,
            collapse_floor: 0.5,
        }
    }
}

/// Converged load-flow solution.
#[derive(Debug, Clone, Serialize)]
pub struct NetworkState {
    /// Phase-to-neutral voltage phasors, one row per bus.
    pub node_voltages: Vec<[C; 3]>,
    /// Neutral potential phasors relative to remote earth.
    pub neutral_potentials: Vec<C>,
    /// Phase currents in each branch's reference direction (from -> to).
    pub branch_currents: Vec<[C; 3]>,
    pub neutral_currents: Vec<C>,
    /// Watts, branch conductors plus earthing resistances.
    pub loss_power: f64,
    /// Active power delivered by the slack bus in watts.
    pub slack_power: f64,
    pub iterations: usize,
    /// Phase-to-neutral voltage at the from-bus of each branch.
    pub from_voltages: Vec<[C; 3]>,
}

/// RMS view of a network state, shared by the exact solver and the linear estimator.
///
/// Phase quantities are flattened as `3 * index + phase`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateMagnitudes {
    /// Phase-to-neutral RMS voltages (3nn).
    pub voltages: Vec<f64>,
    /// Signed phase current magnitudes (3nb): RMS value carrying the sign of the
    /// active-power flow along the branch reference direction.
    pub currents: Vec<f64>,
    /// Neutral conductor RMS currents (nb).
    pub neutral_currents: Vec<f64>,
    /// Neutral-to-earth RMS voltages (nn).
    pub neutral_voltages: Vec<f64>,
    /// Watts.
    pub loss_power: f64,
}

impl NetworkState {
    pub fn neutral_voltages(&self) -> Vec<f64> {
        self.neutral_potentials.iter().map(|v| v.norm()).collect()
    }

    pub fn magnitudes(&self) -> StateMagnitudes {
        let voltages = self
            .node_voltages
            .iter()
            .flat_map(|v| v.iter().map(|p| p.norm()))
            .collect();
        let currents = self
            .branch_currents
            .iter()
            .enumerate()
            .flat_map(|(k, i)| (0..3).map(move |p| (k, p, i[p])))
            .map(|(k, p, i)| {
                // sign of the active power leaving the from-bus on this phase
                let v = self.from_voltages[k][p];
                let power = (v * i.conj()).re;
                if power < 0.0 {
                    -i.norm()
                } else {
                    i.norm()
                }
            })
            .collect();
        StateMagnitudes {
            voltages,
            currents,
            neutral_currents: self.neutral_currents.iter().map(|i| i.norm()).collect(),
            neutral_voltages: self.neutral_voltages(),
            loss_power: self.loss_power,
        }
    }
}

/// Active power per slot in watts from quarter-hour energies in MWh.
pub fn energy_to_power(mwh: f64) -> f64 {
    mwh * 1e6 / QUARTER_HOUR
}

/// Branch and earthing losses in watts.
///
/// `currents` and `neutral_currents` are RMS magnitudes (sign ignored).
pub fn losses(
    network: &Network,
    currents: &[f64],
    neutral_currents: &[f64],
    neutral_voltages: &[f64],
) -> Result<f64> {
    if currents.len() != 3 * network.nb() {
        return Err(Error::Dimension {
            expected: 3 * network.nb(),
            actual: currents.len(),
        });
    }
    if neutral_currents.len() != network.nb() {
        return Err(Error::Dimension {
            expected: network.nb(),
            actual: neutral_currents.len(),
        });
    }
    if neutral_voltages.len() != network.nn() {
        return Err(Error::Dimension {
            expected: network.nn(),
            actual: neutral_voltages.len(),
        });
    }
    let mut total = 0.0;
    for (k, br) in network.branches().iter().enumerate() {
        let r = br.resistance();
        for p in 0..3 {
            let i = currents[3 * k + p];
            total += i * i * r[p];
        }
        total += neutral_currents[k] * neutral_currents[k] * r[3];
    }
    for (bus, &u) in network.buses().iter().zip(neutral_voltages) {
        if let Some(re) = bus.earthing_resistance {
            total += u * u / re;
        }
    }
    Ok(total)
}

pub fn state_losses(network: &Network, m: &StateMagnitudes) -> Result<f64> {
    losses(network, &m.currents, &m.neutral_currents, &m.neutral_voltages)
}

fn slack_phasors(u: f64) -> [C; 4] {
    let a = C::from_polar(1.0, -2.0 * std::f64::consts::PI / 3.0);
    [C::new(u, 0.0), a * u, a * a * u, C::new(0.0, 0.0)]
}

fn mul4(z: &[[C; 4]; 4], i: &[C; 4]) -> [C; 4] {
    let mut out = [C::new(0.0, 0.0); 4];
    for (r, row) in z.iter().enumerate() {
        out[r] = row.iter().zip(i).map(|(a, b)| a * b).sum();
    }
    out
}

pub fn solve(network: &Network, injections: &[f64]) -> Result<NetworkState> {
    solve_with(network, injections, &SolverOptions::default())
}

pub fn solve_with(
    network: &Network,
    injections: &[f64],
    options: &SolverOptions,
) -> Result<NetworkState> {
    check_injections(network, injections)?;
    let nn = network.nn();
    let slack = network.slack_index();
    let slack_set = slack_phasors(network.buses()[slack].nominal_phase_voltage);
    let tolerance = options.tolerance * network.buses()[slack].nominal_phase_voltage;
    let impedances: Vec<[[C; 4]; 4]> = network
        .branches()
        .iter()
        .map(|b| b.total_impedance())
        .collect();
    let powers: Vec<f64> = injections.iter().map(|&e| energy_to_power(e)).collect();
    let zero = C::new(0.0, 0.0);

    let mut v = vec![slack_set; nn];
    let mut acc = vec![[zero; 4]; nn];
    let mut converged_at = None;
    let mut mismatch = f64::INFINITY;
    let mut iteration = 0;
    // keep sweeping after convergence so currents and potentials agree to rounding
    let polish_limit = 1e-6 * tolerance;
    let mut limit = options.max_iterations;

    while iteration < limit {
        iteration += 1;
        bus_draws(network, &powers, &v, &mut acc);
        for &b in network.sweep_order().iter().rev() {
            if let Some(parent) = network.parent_bus(b) {
                let child = acc[b];
                for (c, x) in acc[parent].iter_mut().zip(child) {
                    *c += x;
                }
            }
        }
        mismatch = 0.0;
        let mut next = v.clone();
        next[slack] = slack_set;
        for &b in network.sweep_order().iter().skip(1) {
            let parent = network.parent_bus(b).expect("non-slack bus has a parent");
            let (k, _) = network.parent_branch(b).expect("non-slack bus has a branch");
            let drop = mul4(&impedances[k], &acc[b]);
            for c in 0..4 {
                next[b][c] = next[parent][c] - drop[c];
            }
        }
        for (new, old) in next.iter().zip(&v) {
            for c in 0..4 {
                let d = (new[c] - old[c]).norm();
                if !d.is_finite() {
                    return Err(Error::Divergence {
                        iterations: iteration,
                        mismatch: f64::INFINITY,
                    });
                }
                mismatch = mismatch.max(d);
            }
        }
        v = next;
        for (bus, pot) in network.buses().iter().zip(&v) {
            for p in 0..3 {
                let u = (pot[p] - pot[3]).norm();
                if u < options.collapse_floor * bus.nominal_phase_voltage {
                    return Err(Error::Infeasible {
                        bus: bus.id.clone(),
                        voltage: u,
                    });
                }
            }
        }
        if converged_at.is_none() && mismatch < tolerance {
            converged_at = Some(iteration);
            limit = iteration + 20;
        }
        if converged_at.is_some() && mismatch <= polish_limit {
            break;
        }
    }
    let Some(converged_at) = converged_at else {
        return Err(Error::Divergence {
            iterations: iteration,
            mismatch,
        });
    };

    // currents consistent with the final potentials
    bus_draws(network, &powers, &v, &mut acc);
    for &b in network.sweep_order().iter().rev() {
        if let Some(parent) = network.parent_bus(b) {
            let child = acc[b];
            for (c, x) in acc[parent].iter_mut().zip(child) {
                *c += x;
            }
        }
    }

    let nb = network.nb();
    let mut branch_currents = vec![[zero; 3]; nb];
    let mut neutral_currents = vec![zero; nb];
    let mut from_voltage = vec![[zero; 3]; nb];
    for &b in network.sweep_order().iter().skip(1) {
        let (k, downstream) = network.parent_branch(b).unwrap();
        let parent = network.parent_bus(b).unwrap();
        let sign = if downstream { 1.0 } else { -1.0 };
        let from = if downstream { parent } else { b };
        for p in 0..3 {
            branch_currents[k][p] = acc[b][p] * sign;
            from_voltage[k][p] = v[from][p] - v[from][3];
        }
        neutral_currents[k] = acc[b][3] * sign;
    }
    let slack_power: f64 = (0..4).map(|c| (v[slack][c] * acc[slack][c].conj()).re).sum();

    let node_voltages: Vec<[C; 3]> = v
        .iter()
        .map(|pot| [pot[0] - pot[3], pot[1] - pot[3], pot[2] - pot[3]])
        .collect();
    let neutral_potentials: Vec<C> = v.iter().map(|pot| pot[3]).collect();

    let abs_currents: Vec<f64> = branch_currents
        .iter()
        .flat_map(|i| i.iter().map(|x| x.norm()))
        .collect();
    let abs_neutral: Vec<f64> = neutral_currents.iter().map(|i| i.norm()).collect();
    let neutral_rms: Vec<f64> = neutral_potentials.iter().map(|x| x.norm()).collect();
    let loss_power = losses(network, &abs_currents, &abs_neutral, &neutral_rms)?;

    Ok(NetworkState {
        node_voltages,
        neutral_potentials,
        branch_currents,
        neutral_currents,
        loss_power,
        slack_power,
        iterations: converged_at,
        from_voltages: from_voltage,
    })
}

/// Currents drawn at each bus from the phase and neutral conductors.
fn bus_draws(network: &Network, powers: &[f64], v: &[[C; 4]], out: &mut [[C; 4]]) {
    let zero = C::new(0.0, 0.0);
    for (b, bus) in network.buses().iter().enumerate() {
        let mut draw = [zero; 4];
        for &pid in network.prosumers_at(b) {
            for ph in network.prosumers()[pid].connection.phases() {
                let p = ph.offset();
                let demand = -powers[3 * pid + p];
                if demand == 0.0 {
                    continue;
                }
                let vpn = v[b][p] - v[b][3];
                let i = (C::new(demand, 0.0) / vpn).conj();
                draw[p] += i;
                draw[3] -= i;
            }
        }
        if let Some(r) = bus.earthing_resistance {
            if b != network.slack_index() {
                draw[3] += v[b][3] / r;
            }
        }
        out[b] = draw;
    }
}
