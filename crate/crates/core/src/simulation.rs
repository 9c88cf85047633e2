//! Randomised market scenarios on a feeder and the three experiment sweeps:
//! supply ratio (Case I), isolated tariff components (Case II) and
//! participation ratio (Case III).

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{FlowMode, Market, MarketConfig, Side, Transaction, RETAIL_BUY, RETAIL_SELL};
use crate::network::{kwh_to_mwh, BaseCase, Network};
use crate::power_flow::StateMagnitudes;
use crate::sensitivity::{self, SensitivityMatrices};
use crate::tariff::{
    build_matrix, limit_breaches, mean_abs_off_diagonal, tune_constants, Component, DnutEvaluator,
    TariffConstants,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseCaseSource {
    /// Consumption drawn uniformly from [0, 1] kWh per prosumer.
    #[default]
    Random,
    /// The feeder's own load snapshot.
    Snapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub sr: f64,
    pub ppr: f64,
    pub par: f64,
    pub efr: f64,
    pub mode: FlowMode,
    pub retail_buy: f64,
    pub retail_sell: f64,
    pub price_low: f64,
    pub price_high: f64,
    pub target_dnut_mean: f64,
    pub constants: TariffConstants,
    /// Replace the linear constants by ones normalised to `target_dnut_mean`.
    pub auto_tune: bool,
    pub seed: u64,
    pub monte_carlo_runs: usize,
    /// MWh traded per pair when building DNUT matrices.
    pub reference_energy: f64,
    pub rebuild_interval: usize,
    pub base_case: BaseCaseSource,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            sr: 0.1,
            ppr: 0.3,
            par: 0.3,
            efr: 0.2,
            mode: FlowMode::Mixed,
            retail_buy: RETAIL_BUY,
            retail_sell: RETAIL_SELL,
            price_low: RETAIL_SELL,
            price_high: RETAIL_BUY,
            target_dnut_mean: 15.0,
            constants: TariffConstants::default(),
            auto_tune: false,
            seed: 0,
            monte_carlo_runs: 50,
            reference_energy: 4e-4,
            rebuild_interval: 0,
            base_case: BaseCaseSource::Random,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sr", self.sr), ("ppr", self.ppr), ("par", self.par), ("efr", self.efr)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.price_low <= self.price_high) || !self.price_low.is_finite() || !self.price_high.is_finite() {
            return Err(Error::Config(format!(
                "price interval [{}, {}] is invalid",
                self.price_low, self.price_high
            )));
        }
        if !(self.reference_energy >= crate::tariff::MIN_ENERGY) {
            return Err(Error::Config("reference energy must be at least 1 Wh".into()));
        }
        self.constants.validate()
    }

    pub fn market(&self) -> MarketConfig {
        MarketConfig {
            mode: self.mode,
            efr: self.efr,
            retail_buy: self.retail_buy,
            retail_sell: self.retail_sell,
            rebuild_interval: self.rebuild_interval,
        }
    }
}

/// Independent random stream derived from the master seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const BASE_STREAM: u64 = 0;
const PERMUTATION_STREAM: u64 = 1;

fn run_stream(point: usize, run: usize) -> u64 {
    (1u64 << 40) | ((point as u64) << 20) | run as u64
}

/// `ceil(ratio * n)`, tolerant of representation error in the product.
pub fn ceil_count(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let c = (x - 1e-9).ceil().max(0.0) as usize;
    c.min(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedBase {
    pub base_case: BaseCase,
    /// Sorted prosumer indices.
    pub producers: Vec<usize>,
}

impl GeneratedBase {
    pub fn consumers(&self, np: usize) -> Vec<usize> {
        (0..np).filter(|p| self.producers.binary_search(p).is_err()).collect()
    }
}

fn spread(network: &Network, injections: &mut [f64], prosumer: usize, mwh: f64) {
    let slots = network.occupied_slots(prosumer);
    let share = mwh / slots.len() as f64;
    for s in slots {
        injections[s] = share;
    }
}

fn draw_consumption(network: &Network, source: BaseCaseSource, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..network.np())
        .map(|p| match source {
            BaseCaseSource::Random => -kwh_to_mwh(rng.gen::<f64>()),
            BaseCaseSource::Snapshot => network.prosumers()[p].base_injection.min(0.0),
        })
        .collect()
}

fn assemble(network: &Network, consumption: &[f64], generation: &[(usize, f64)]) -> Result<GeneratedBase> {
    let mut injections = vec![0.0; 3 * network.np()];
    for (p, &c) in consumption.iter().enumerate() {
        spread(network, &mut injections, p, c);
    }
    let mut producers = Vec::with_capacity(generation.len());
    for &(p, g) in generation {
        spread(network, &mut injections, p, g);
        producers.push(p);
    }
    producers.sort_unstable();
    Ok(GeneratedBase {
        base_case: BaseCase::new(network, injections)?,
        producers,
    })
}

/// Base case with `ceil(sr * np)` random consumers turned into producers.
pub fn generate_base_case(
    network: &Network,
    config: &SimulationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratedBase> {
    let np = network.np();
    let n_prod = ceil_count(config.sr, np);
    if np > 0 && n_prod >= np {
        return Err(Error::Config(format!(
            "supply ratio {} turns all {np} prosumers into producers",
            config.sr
        )));
    }
    let consumption = draw_consumption(network, config.base_case, rng);
    let mut order: Vec<usize> = (0..np).collect();
    order.shuffle(rng);
    let generation: Vec<(usize, f64)> = order[..n_prod]
        .iter()
        .map(|&p| (p, kwh_to_mwh(rng.gen::<f64>())))
        .collect();
    assemble(network, &consumption, &generation)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduledOrder {
    pub owner: usize,
    pub side: Side,
    pub price: f64,
    /// MWh.
    pub quantity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderPlan {
    /// Active prosumers in submission order.
    pub participants: Vec<usize>,
    /// Orders of participants whose quantity reaches the 1 Wh minimum.
    pub orders: Vec<ScheduledOrder>,
}

/// Picks participants, sizes their orders and shuffles the submission order.
pub fn generate_orders(
    network: &Network,
    base: &GeneratedBase,
    config: &SimulationConfig,
    rng: &mut ChaCha8Rng,
) -> OrderPlan {
    let np = network.np();
    let n_active = ceil_count(config.ppr, np);
    if n_active == 0 {
        return OrderPlan {
            participants: Vec::new(),
            orders: Vec::new(),
        };
    }
    let mut producers = base.producers.clone();
    let mut consumers = base.consumers(np);
    let n_prod = if producers.is_empty() {
        0
    } else {
        ceil_count(config.ppr, producers.len()).max(1).min(producers.len())
    };
    let n_cons = n_active.saturating_sub(n_prod).min(consumers.len());
    producers.shuffle(rng);
    consumers.shuffle(rng);
    let mut participants: Vec<usize> = producers[..n_prod]
        .iter()
        .chain(&consumers[..n_cons])
        .copied()
        .collect();
    participants.shuffle(rng);

    let orders = participants
        .iter()
        .filter_map(|&p| {
            let total = base.base_case.prosumer_total(p);
            let side = if total > 0.0 { Side::Supply } else { Side::Demand };
            let price = rng.gen_range(config.price_low..=config.price_high);
            let quantity = crate::market::quantize(config.par * total.abs());
            (quantity >= crate::tariff::MIN_ENERGY).then_some(ScheduledOrder {
                owner: p,
                side,
                price,
                quantity,
            })
        })
        .collect();
    OrderPlan {
        participants,
        orders,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DnutCost {
    pub voltage: f64,
    pub current: f64,
    pub loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    /// EUR.
    pub welfare: f64,
    /// EUR per active prosumer.
    pub relative_surplus: f64,
    pub n_active: usize,
    pub n_orders: usize,
    pub n_transactions: usize,
    /// MWh.
    pub traded_energy: f64,
    /// Sum over transactions of the DNUT paid, EUR.
    pub dnut_cost: DnutCost,
    /// Mean DNUT paid per transaction, EUR.
    pub mean_dnut_cost: DnutCost,
    /// Transactions whose estimated post-trade state breaches a limit.
    pub limit_violations: usize,
}

pub fn metrics(log: &[Transaction], n_active: usize, n_orders: usize) -> MetricsReport {
    let mut m = MetricsReport {
        n_active,
        n_orders,
        n_transactions: log.len(),
        ..Default::default()
    };
    for tx in log {
        m.welfare += tx.buyer_surplus + tx.seller_surplus;
        m.traded_energy += tx.energy;
        m.dnut_cost.voltage += tx.charges.component(Component::Voltage);
        m.dnut_cost.current += tx.charges.component(Component::Current);
        m.dnut_cost.loss += tx.charges.component(Component::Loss);
        m.dnut_cost.total += tx.charges.total;
        if tx.limit_breaches > 0 {
            m.limit_violations += 1;
        }
    }
    if n_active > 0 {
        m.relative_surplus = m.welfare / n_active as f64;
    }
    if !log.is_empty() {
        let n = log.len() as f64;
        m.mean_dnut_cost = DnutCost {
            voltage: m.dnut_cost.voltage / n,
            current: m.dnut_cost.current / n,
            loss: m.dnut_cost.loss / n,
            total: m.dnut_cost.total / n,
        };
    }
    m
}

/// Everything that stays fixed across the Monte Carlo runs of one sweep point.
pub struct RunContext<'a> {
    pub network: &'a Network,
    pub base: GeneratedBase,
    pub matrices: SensitivityMatrices,
    pub constants: TariffConstants,
    pub config: SimulationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub metrics: MetricsReport,
    pub transactions: Vec<Transaction>,
}

impl<'a> RunContext<'a> {
    pub fn new(network: &'a Network, base: GeneratedBase, config: &SimulationConfig) -> Result<Self> {
        let matrices = sensitivity::build(network, &base.base_case)?;
        let constants = resolve_constants(network, &matrices, config)?;
        let breaches = limit_breaches(network, &matrices.base_state);
        if breaches > 0 {
            warn!("base case already breaches {breaches} limits");
        }
        Ok(RunContext {
            network,
            base,
            matrices,
            constants,
            config: config.clone(),
        })
    }

    pub fn with_constants(&self, constants: TariffConstants) -> RunContext<'a> {
        RunContext {
            network: self.network,
            base: self.base.clone(),
            matrices: self.matrices.clone(),
            constants,
            config: self.config.clone(),
        }
    }

    pub fn base_state(&self) -> &StateMagnitudes {
        &self.matrices.base_state
    }

    /// Streams one order plan through a fresh order book.
    pub fn run(&self, plan: &OrderPlan) -> Result<RunResult> {
        self.run_with(plan, &self.constants)
    }

    pub fn run_with(&self, plan: &OrderPlan, constants: &TariffConstants) -> Result<RunResult> {
        let mut market = Market::new(
            self.network,
            &self.base.base_case,
            &self.matrices,
            *constants,
            self.config.market(),
        )?;
        for o in &plan.orders {
            market.submit(o.owner, o.side, o.price, o.quantity)?;
        }
        let transactions = market.into_transactions();
        Ok(RunResult {
            metrics: metrics(&transactions, plan.participants.len(), plan.orders.len()),
            transactions,
        })
    }
}

/// Fixed constants, or auto-tuned linear constants when requested.
pub fn resolve_constants(
    network: &Network,
    matrices: &SensitivityMatrices,
    config: &SimulationConfig,
) -> Result<TariffConstants> {
    if !config.auto_tune {
        return Ok(config.constants);
    }
    let unit = build_matrix(
        network,
        matrices,
        config.reference_energy,
        &TariffConstants {
            mixed_sign: config.constants.mixed_sign,
            ..TariffConstants::unit()
        },
    )?;
    let mut tuned = tune_constants(&unit, config.target_dnut_mean, config.constants.c_i_limit);
    tuned.c_u_limit = config.constants.c_u_limit;
    tuned.mixed_sign = config.constants.mixed_sign;
    info!("auto-tuned constants {tuned:?}");
    Ok(tuned)
}

/// One market run: base case, sensitivities, constants and orders all from `config.seed`.
pub fn run_single(network: &Network, config: &SimulationConfig) -> Result<RunResult> {
    config.validate()?;
    let base = generate_base_case(network, config, &mut stream_rng(config.seed, BASE_STREAM))?;
    let ctx = RunContext::new(network, base, config)?;
    let plan = generate_orders(network, &ctx.base, config, &mut stream_rng(config.seed, run_stream(0, 0)));
    ctx.run(&plan)
}

/// Aggregate of Monte Carlo runs at one sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub mean_relative_surplus: f64,
    pub std_relative_surplus: f64,
    pub mean_welfare: f64,
    pub mean_active: f64,
    pub mean_transactions: f64,
    /// EUR per transaction over all transactions of all runs.
    pub mean_dnut_cost: f64,
    pub mean_voltage_cost: f64,
    pub mean_current_cost: f64,
    pub mean_loss_cost: f64,
    pub limit_violations: usize,
}

/// Declares a sweep-point row: its key columns followed by the [`Aggregate`] columns.
macro_rules! aggregate_row {
    ($(#[$meta:meta])* $name:ident { $($(#[$fmeta:meta])* $field:ident: $ty:ty),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            $($(#[$fmeta])* pub $field: $ty,)*
            pub runs: usize,
            pub mean_relative_surplus: f64,
            pub std_relative_surplus: f64,
            pub mean_welfare: f64,
            pub mean_active: f64,
            pub mean_transactions: f64,
            pub mean_dnut_cost: f64,
            pub mean_voltage_cost: f64,
            pub mean_current_cost: f64,
            pub mean_loss_cost: f64,
            pub limit_violations: usize,
        }

        impl $name {
            pub fn new($($field: $ty,)* a: Aggregate) -> Self {
                $name {
                    $($field,)*
                    runs: a.runs,
                    mean_relative_surplus: a.mean_relative_surplus,
                    std_relative_surplus: a.std_relative_surplus,
                    mean_welfare: a.mean_welfare,
                    mean_active: a.mean_active,
                    mean_transactions: a.mean_transactions,
                    mean_dnut_cost: a.mean_dnut_cost,
                    mean_voltage_cost: a.mean_voltage_cost,
                    mean_current_cost: a.mean_current_cost,
                    mean_loss_cost: a.mean_loss_cost,
                    limit_violations: a.limit_violations,
                }
            }

            pub fn aggregate(&self) -> Aggregate {
                Aggregate {
                    runs: self.runs,
                    mean_relative_surplus: self.mean_relative_surplus,
                    std_relative_surplus: self.std_relative_surplus,
                    mean_welfare: self.mean_welfare,
                    mean_active: self.mean_active,
                    mean_transactions: self.mean_transactions,
                    mean_dnut_cost: self.mean_dnut_cost,
                    mean_voltage_cost: self.mean_voltage_cost,
                    mean_current_cost: self.mean_current_cost,
                    mean_loss_cost: self.mean_loss_cost,
                    limit_violations: self.limit_violations,
                }
            }
        }
    };
}

pub fn aggregate(reports: &[MetricsReport]) -> Aggregate {
    let n = reports.len();
    if n == 0 {
        return Aggregate::default();
    }
    let nf = n as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / nf;
    let mean_rs = mean(&|r| r.relative_surplus);
    let var = reports
        .iter()
        .map(|r| (r.relative_surplus - mean_rs).powi(2))
        .sum::<f64>()
        / nf;
    let txs: usize = reports.iter().map(|r| r.n_transactions).sum();
    let per_tx = |f: &dyn Fn(&DnutCost) -> f64| {
        if txs == 0 {
            0.0
        } else {
            reports.iter().map(|r| f(&r.dnut_cost)).sum::<f64>() / txs as f64
        }
    };
    Aggregate {
        runs: n,
        mean_relative_surplus: mean_rs,
        std_relative_surplus: var.sqrt(),
        mean_welfare: mean(&|r| r.welfare),
        mean_active: mean(&|r| r.n_active as f64),
        mean_transactions: mean(&|r| r.n_transactions as f64),
        mean_dnut_cost: per_tx(&|c| c.total),
        mean_voltage_cost: per_tx(&|c| c.voltage),
        mean_current_cost: per_tx(&|c| c.current),
        mean_loss_cost: per_tx(&|c| c.loss),
        limit_violations: reports.iter().map(|r| r.limit_violations).sum(),
    }
}

// ---------------------------------------------------------------- Case I

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedPairs {
    pub consumer: usize,
    pub suppliers: Vec<usize>,
}

impl TrackedPairs {
    /// Consumer LOAD19 against suppliers LOAD1, LOAD23 and LOAD39, falling
    /// back to the same positions when the names are absent.
    pub fn default_for(network: &Network) -> Result<Self> {
        let find = |name: &str, fallback: usize| {
            network
                .prosumer_index(name)
                .or_else(|| (fallback < network.np()).then_some(fallback))
                .ok_or_else(|| Error::Config(format!("cannot resolve tracked prosumer {name}")))
        };
        Ok(TrackedPairs {
            consumer: find("LOAD19", 18)?,
            suppliers: vec![find("LOAD1", 0)?, find("LOAD23", 22)?, find("LOAD39", 38)?],
        })
    }

    pub fn from_names(network: &Network, consumer: &str, suppliers: &[String]) -> Result<Self> {
        let find = |n: &str| {
            network
                .prosumer_index(n)
                .ok_or_else(|| Error::Reference(format!("unknown prosumer '{n}'")))
        };
        Ok(TrackedPairs {
            consumer: find(consumer)?,
            suppliers: suppliers.iter().map(|s| find(s)).collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case1Row {
    pub sr: f64,
    pub producers: usize,
    pub supplier: String,
    pub consumer: String,
    /// EUR/MWh.
    pub dnut: f64,
    pub current: f64,
    pub voltage: f64,
    pub loss: f64,
    pub limit_breaches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Case1Report {
    pub rows: Vec<Case1Row>,
    /// Conversion order of consumers into producers.
    pub conversion_order: Vec<String>,
    pub limit_violations: usize,
}

/// Producers after converting `ceil(0.1 * np)` consumers per 0.1 of supply ratio.
pub fn case1_producer_count(sr: f64, np: usize) -> usize {
    let steps = (sr * 10.0 - 1e-9).ceil().max(0.0) as usize;
    (steps * ceil_count(0.1, np)).min(np.saturating_sub(1))
}

pub fn sr_grid() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

pub fn run_case1(
    network: &Network,
    config: &SimulationConfig,
    tracked: &TrackedPairs,
    sr_values: &[f64],
) -> Result<Case1Report> {
    config.validate()?;
    let np = network.np();
    if tracked.suppliers.contains(&tracked.consumer) {
        return Err(Error::Config("tracked consumer is also a tracked supplier".into()));
    }
    let mut rng = stream_rng(config.seed, BASE_STREAM);
    let consumption = draw_consumption(network, config.base_case, &mut rng);
    let generation: Vec<f64> = (0..np).map(|_| kwh_to_mwh(rng.gen::<f64>())).collect();

    let mut rest: Vec<usize> = (0..np)
        .filter(|p| *p != tracked.consumer && !tracked.suppliers.contains(p))
        .collect();
    rest.shuffle(&mut stream_rng(config.seed, PERMUTATION_STREAM));
    let order: Vec<usize> = tracked.suppliers.iter().copied().chain(rest).collect();

    let points: Vec<Result<Vec<Case1Row>>> = sr_values
        .par_iter()
        .map(|&sr| {
            let n = case1_producer_count(sr, np).max(tracked.suppliers.len()).min(order.len());
            let gen: Vec<(usize, f64)> = order[..n].iter().map(|&p| (p, generation[p])).collect();
            let base = assemble(network, &consumption, &gen)?;
            let matrices = sensitivity::build(network, &base.base_case)?;
            let constants = resolve_constants(network, &matrices, config)?;
            let ev = DnutEvaluator::at_base(network, &matrices, constants);
            tracked
                .suppliers
                .iter()
                .map(|&s| {
                    let (dnut, b) = ev.pair(s, tracked.consumer, config.reference_energy)?;
                    let after = ev.after_state(s, tracked.consumer, config.reference_energy)?;
                    let e = config.reference_energy;
                    Ok(Case1Row {
                        sr,
                        producers: n,
                        supplier: network.prosumers()[s].name.clone(),
                        consumer: network.prosumers()[tracked.consumer].name.clone(),
                        dnut,
                        current: b.component(Component::Current) / e,
                        voltage: b.component(Component::Voltage) / e,
                        loss: b.component(Component::Loss) / e,
                        limit_breaches: limit_breaches(network, &after),
                    })
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    for p in points {
        rows.extend(p?);
    }
    let limit_violations = rows.iter().filter(|r| r.limit_breaches > 0).count();
    Ok(Case1Report {
        rows,
        conversion_order: order
            .iter()
            .map(|&p| network.prosumers()[p].name.clone())
            .collect(),
        limit_violations,
    })
}

// ---------------------------------------------------------------- Case II

aggregate_row!(Case2Row {
    component: String,
    scale: f64,
    c_linear: f64,
});

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Case2Report {
    pub rows: Vec<Case2Row>,
    /// Per-component constants whose DNUT matrix mean matches the full one.
    pub isolation: Vec<(Component, TariffConstants)>,
    pub reference_mean: f64,
}

pub fn scale_grid() -> Vec<f64> {
    (1..=20).map(|k| k as f64 / 10.0).collect()
}

/// For each component, constants with only that component active and its
/// linear constant scaled so the mean absolute off-diagonal DNUT equals the
/// one obtained with `reference`.
pub fn isolation_constants(
    network: &Network,
    matrices: &SensitivityMatrices,
    reference: &TariffConstants,
    energy: f64,
) -> Result<(f64, Vec<(Component, TariffConstants)>)> {
    let target = mean_abs_off_diagonal(&build_matrix(network, matrices, energy, reference)?.values);
    let mut out = Vec::new();
    for c in Component::ALL {
        let only = reference.only(c);
        let linear_only = TariffConstants {
            c_i_limit: 0.0,
            c_u_limit: 0.0,
            ..only
        };
        let mean = mean_abs_off_diagonal(&build_matrix(network, matrices, energy, &linear_only)?.values);
        let mut iso = only;
        if mean > 0.0 {
            iso.set_linear(c, only.linear(c) * target / mean);
        } else {
            warn!("{} component is identically zero", c.name());
        }
        out.push((c, iso));
    }
    Ok((target, out))
}

pub fn run_case2(network: &Network, config: &SimulationConfig, scales: &[f64]) -> Result<Case2Report> {
    config.validate()?;
    let base = generate_base_case(network, config, &mut stream_rng(config.seed, BASE_STREAM))?;
    let ctx = RunContext::new(network, base, config)?;
    let (reference_mean, isolation) =
        isolation_constants(network, &ctx.matrices, &ctx.constants, config.reference_energy)?;
    let plans: Vec<OrderPlan> = (0..config.monte_carlo_runs)
        .map(|r| generate_orders(network, &ctx.base, config, &mut stream_rng(config.seed, run_stream(0, r))))
        .collect();

    let jobs: Vec<(Component, TariffConstants, f64)> = isolation
        .iter()
        .flat_map(|(c, iso)| scales.iter().map(move |&s| (*c, *iso, s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|(c, iso, scale)| {
            let mut constants = *iso;
            constants.set_linear(*c, iso.linear(*c) * scale);
            let reports = plans
                .iter()
                .map(|p| ctx.run_with(p, &constants).map(|r| r.metrics))
                .collect::<Result<Vec<_>>>()?;
            Ok(Case2Row::new(
                c.name().to_string(),
                *scale,
                constants.linear(*c),
                aggregate(&reports),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Case2Report {
        rows,
        isolation,
        reference_mean,
    })
}

// ---------------------------------------------------------------- Case III

aggregate_row!(Case3Row { ppr: f64 });

/// One Monte Carlo run of Case III.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub ppr: f64,
    pub run: usize,
    pub welfare: f64,
    pub relative_surplus: f64,
    pub n_active: usize,
    pub n_orders: usize,
    pub n_transactions: usize,
    pub traded_energy: f64,
    pub dnut_total: f64,
    pub dnut_voltage: f64,
    pub dnut_current: f64,
    pub dnut_loss: f64,
    pub limit_violations: usize,
}

impl RunRecord {
    pub fn new(ppr: f64, run: usize, m: &MetricsReport) -> Self {
        RunRecord {
            ppr,
            run,
            welfare: m.welfare,
            relative_surplus: m.relative_surplus,
            n_active: m.n_active,
            n_orders: m.n_orders,
            n_transactions: m.n_transactions,
            traded_energy: m.traded_energy,
            dnut_total: m.dnut_cost.total,
            dnut_voltage: m.dnut_cost.voltage,
            dnut_current: m.dnut_cost.current,
            dnut_loss: m.dnut_cost.loss,
            limit_violations: m.limit_violations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Case3Report {
    pub rows: Vec<Case3Row>,
    pub runs: Vec<RunRecord>,
    pub constants: TariffConstants,
    /// Trade logs per (ppr index, run) when requested.
    #[serde(skip)]
    pub logs: Vec<Vec<Transaction>>,
}

pub fn ppr_grid() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

pub fn run_case3(
    network: &Network,
    config: &SimulationConfig,
    ppr_values: &[f64],
    keep_logs: bool,
) -> Result<Case3Report> {
    config.validate()?;
    let base = generate_base_case(network, config, &mut stream_rng(config.seed, BASE_STREAM))?;
    let ctx = RunContext::new(network, base, config)?;
    let runs = config.monte_carlo_runs;
    let jobs: Vec<(usize, usize)> = (0..ppr_values.len())
        .flat_map(|i| (0..runs).map(move |r| (i, r)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(i, r)| {
            let cfg = SimulationConfig {
                ppr: ppr_values[i],
                ..config.clone()
            };
            cfg.validate()?;
            let plan = generate_orders(network, &ctx.base, &cfg, &mut stream_rng(config.seed, run_stream(i, r)));
            ctx.run(&plan)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(ppr_values.len());
    let mut records = Vec::with_capacity(results.len());
    for (i, &ppr) in ppr_values.iter().enumerate() {
        let slice = &results[i * runs..(i + 1) * runs];
        let reports: Vec<MetricsReport> = slice.iter().map(|r| r.metrics.clone()).collect();
        rows.push(Case3Row::new(ppr, aggregate(&reports)));
        for (r, m) in reports.iter().enumerate() {
            records.push(RunRecord::new(ppr, r, m));
        }
    }
    let logs = if keep_logs {
        results.into_iter().map(|r| r.transactions).collect()
    } else {
        Vec::new()
    };
    Ok(Case3Report {
        rows,
        runs: records,
        constants: ctx.constants,
        logs,
    })
}

/// Writes serialisable rows as CSV with a header line.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
}

/// CSV with a header of column labels and one labelled row per matrix row.
pub fn labelled_matrix_csv<'r, I>(corner: &str, columns: &[String], rows: I) -> Result<String>
where
    I: IntoIterator<Item = (String, &'r [f64])>,
{
    let err = |e: csv::Error| Error::Config(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(std::iter::once(corner).chain(columns.iter().map(String::as_str)))
        .map_err(err)?;
    for (label, values) in rows {
        let mut record = Vec::with_capacity(values.len() + 1);
        record.push(label);
        record.extend(values.iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = std::fs::File::create(path).map_err(io)?;
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n").map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Branch, Bus, Connection, ImpedanceMatrix, Phase, Prosumer};

    /// Radial chain of single-phase prosumers rotating over the phases.
    fn chain(np: usize) -> Network {
        let mut buses = vec![Bus::new("S")];
        let mut branches = Vec::new();
        let mut prosumers = Vec::new();
        for k in 0..np {
            let mut b = Bus::new(format!("B{k}"));
            b.earthing_resistance = Some(30.0);
            buses.push(b);
            branches.push(Branch {
                id: format!("L{k}"),
                from_bus: if k == 0 { "S".into() } else { format!("B{}", k - 1) },
                to_bus: format!("B{k}"),
                length: 20.0,
                impedance: ImpedanceMatrix::uniform(0.3e-3, 0.08e-3),
                current_rating: 400.0,
            });
            prosumers.push(Prosumer {
                name: format!("LOAD{}", k + 1),
                bus: format!("B{k}"),
                connection: Connection::Single(Phase::from_offset(k % 3).unwrap()),
                base_injection: -1e-4,
            });
        }
        Network::new(buses, branches, prosumers, "S").unwrap()
    }

    #[test]
    fn ceiling_counts_match_feeder_examples() {
        assert_eq!(ceil_count(0.1, 55), 6);
        assert_eq!(ceil_count(0.2, 55), 11);
        assert_eq!(ceil_count(0.3, 55), 17);
        assert_eq!(ceil_count(0.0, 55), 0);
        assert_eq!(ceil_count(1.0, 55), 55);
        assert_eq!(case1_producer_count(0.1, 55), 6);
        assert_eq!(case1_producer_count(0.9, 55), 54);
    }

    #[test]
    fn participant_split_at_low_ppr() {
        let net = chain(55);
        let config = SimulationConfig {
            ppr: 0.1,
            ..Default::default()
        };
        let base = generate_base_case(&net, &config, &mut stream_rng(1, 0)).unwrap();
        assert_eq!(base.producers.len(), 6);
        let plan = generate_orders(&net, &base, &config, &mut stream_rng(1, 5));
        let producers = plan
            .participants
            .iter()
            .filter(|p| base.producers.contains(p))
            .count();
        assert_eq!(plan.participants.len(), 6);
        assert_eq!(producers, 1);
    }

    #[test]
    fn zero_activity_gives_no_orders() {
        let net = chain(10);
        let config = SimulationConfig {
            par: 0.0,
            ..Default::default()
        };
        let base = generate_base_case(&net, &config, &mut stream_rng(3, 0)).unwrap();
        let plan = generate_orders(&net, &base, &config, &mut stream_rng(3, 1));
        assert!(plan.orders.is_empty());
        assert!(!plan.participants.is_empty());
    }

    #[test]
    fn all_producers_rejected() {
        let net = chain(10);
        let config = SimulationConfig {
            sr: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            generate_base_case(&net, &config, &mut stream_rng(0, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_run_is_deterministic_and_consistent() {
        let net = chain(20);
        let config = SimulationConfig {
            seed: 11,
            ppr: 0.8,
            ..Default::default()
        };
        let a = run_single(&net, &config).unwrap();
        let b = run_single(&net, &config).unwrap();
        assert_eq!(a, b);
        let welfare: f64 = a
            .transactions
            .iter()
            .map(|t| {
                let (b, s) = crate::market::surplus(t, config.retail_buy, config.retail_sell);
                b + s
            })
            .sum();
        assert!((welfare - a.metrics.welfare).abs() < 1e-15);
    }

    #[test]
    fn ppr_zero_runs_are_empty() {
        let net = chain(12);
        let config = SimulationConfig {
            monte_carlo_runs: 3,
            ..Default::default()
        };
        let rep = run_case3(&net, &config, &[0.0, 0.5], false).unwrap();
        assert_eq!(rep.rows[0].mean_transactions, 0.0);
        assert_eq!(rep.rows[0].mean_welfare, 0.0);
        assert_eq!(rep.runs.len(), 6);
    }

    #[test]
    fn producer_always_participates() {
        let net = chain(30);
        let config = SimulationConfig::default();
        let base = generate_base_case(&net, &config, &mut stream_rng(9, 0)).unwrap();
        for k in 1..=10 {
            let cfg = SimulationConfig {
                ppr: k as f64 / 10.0,
                ..config.clone()
            };
            let plan = generate_orders(&net, &base, &cfg, &mut stream_rng(9, k));
            assert!(plan.participants.iter().any(|p| base.producers.contains(p)));
        }
    }

    #[test]
    fn case1_same_bus_pair_is_flat_zero() {
        let mut net = chain(12);
        let mut ps = net.prosumers().to_vec();
        ps[0].bus = "B5".into();
        ps[5].bus = "B5".into();
        net = net.with_prosumers(ps).unwrap();
        let tracked = TrackedPairs {
            consumer: 5,
            suppliers: vec![0],
        };
        let rep = run_case1(&net, &SimulationConfig::default(), &tracked, &sr_grid()).unwrap();
        assert!(rep.rows.iter().all(|r| r.dnut == 0.0));
        assert_eq!(rep.rows.len(), 9);
    }
}
