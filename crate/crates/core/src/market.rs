//! Continuous order book for a single quarter-hour product with DNUT-aware
//! matching and the excessive / nominated / mixed flow accounting modes.
//!
//! Quantities are snapped to a grid of 2^-40 MWh (about 1 mWh) so that every
//! split and decrement is exact in floating point.

use std::borrow::Cow;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{BaseCase, Network};
use crate::sensitivity::{build_at, InjectionDelta, LinearState, SensitivityMatrices, DEFAULT_PERTURBATION};
use crate::tariff::{limit_breaches, ChargeBreakdown, DnutEvaluator, TariffConstants, MIN_ENERGY};

pub const RETAIL_BUY: f64 = 84.46;
pub const RETAIL_SELL: f64 = 39.03;

const GRID: f64 = (1u64 << 40) as f64;

/// Rounds an energy in MWh to the quantity grid.
pub fn quantize(mwh: f64) -> f64 {
    (mwh * GRID).round() / GRID
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Supply,
    Demand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMode {
    Excessive,
    Nominated,
    #[default]
    Mixed,
}

impl std::str::FromStr for FlowMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "excessive" => Ok(FlowMode::Excessive),
            "nominated" => Ok(FlowMode::Nominated),
            "mixed" => Ok(FlowMode::Mixed),
            other => Err(Error::Config(format!("unknown flow mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Order {
    pub id: u64,
    pub owner: usize,
    pub side: Side,
    /// EUR/MWh.
    pub price: f64,
    /// Remaining unfilled MWh.
    pub quantity: f64,
    pub timestamp: u64,
}

/// Order as it appears in a replay file, owner given by prosumer name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRequest {
    pub owner: String,
    pub side: Side,
    pub price: f64,
    /// MWh.
    pub quantity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub id: u64,
    pub timestamp: u64,
    pub supplier: usize,
    pub consumer: usize,
    pub supplier_name: String,
    pub consumer_name: String,
    pub supply_order: u64,
    pub demand_order: u64,
    /// MWh.
    pub energy: f64,
    pub supply_price: f64,
    pub demand_price: f64,
    pub energy_price: f64,
    /// EUR/MWh, evaluated at `energy` against the state at match time.
    pub dnut: f64,
    /// EUR.
    pub charges: ChargeBreakdown,
    pub nominated_energy: f64,
    pub excessive_energy: f64,
    pub buyer_surplus: f64,
    pub seller_surplus: f64,
    /// Limit breaches in the estimated post-trade state.
    pub limit_breaches: usize,
    pub state_changed: bool,
}

impl Transaction {
    /// Buyer's all-in price per MWh.
    pub fn buyer_price(&self) -> f64 {
        self.energy_price + self.dnut
    }

    pub fn welfare(&self) -> f64 {
        self.buyer_surplus + self.seller_surplus
    }
}

/// Whether a demand at `p_d` can pair with a supply at `p_s` under `dnut`.
pub fn crosses(p_d: f64, p_s: f64, dnut: f64) -> bool {
    p_d >= p_s + dnut
}

/// `(buyer, seller)` surplus in EUR against retail prices.
pub fn surplus(tx: &Transaction, retail_buy: f64, retail_sell: f64) -> (f64, f64) {
    (
        (retail_buy - tx.energy_price - tx.dnut) * tx.energy,
        (tx.energy_price - retail_sell) * tx.energy,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowAccounting {
    pub mode: FlowMode,
    pub efr: f64,
    /// Untraded base-case energy per prosumer-phase slot, MWh.
    pub remaining_nomination: Vec<f64>,
    /// Accumulated excessive injections per slot, MWh.
    pub overlay: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settlement {
    pub nominated: f64,
    pub excessive: f64,
    pub state_changed: bool,
}

impl FlowAccounting {
    pub fn new(base_case: &BaseCase, mode: FlowMode, efr: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&efr) {
            return Err(Error::Config(format!("efr must lie in [0, 1], got {efr}")));
        }
        Ok(FlowAccounting {
            mode,
            efr,
            remaining_nomination: base_case.injections().iter().map(|e| quantize(e.abs())).collect(),
            overlay: vec![0.0; base_case.injections().len()],
        })
    }

    fn excessive_ratio(&self) -> f64 {
        match self.mode {
            FlowMode::Excessive => 1.0,
            FlowMode::Nominated => 0.0,
            FlowMode::Mixed => self.efr,
        }
    }

    /// Draws up to `amount` from a prosumer's nominations, returns the spill.
    fn draw(&mut self, slots: &[usize], amount: f64) -> f64 {
        let mut need = amount;
        for &s in slots {
            let take = need.min(self.remaining_nomination[s]);
            self.remaining_nomination[s] -= take;
            need -= take;
        }
        need
    }

    fn add_overlay(&mut self, slots: &[usize], amount: f64) {
        let share = amount / slots.len() as f64;
        for &s in slots {
            self.overlay[s] += share;
        }
    }

    /// Books a trade of `energy` (on the quantity grid), returning the split and
    /// whether the network state moved away from the base case.
    pub fn settle(
        &mut self,
        network: &Network,
        supplier: usize,
        consumer: usize,
        energy: f64,
    ) -> Settlement {
        let extra = quantize(self.excessive_ratio() * energy).min(energy);
        let nominal = energy - extra;
        let supplier_slots = network.occupied_slots(supplier);
        let consumer_slots = network.occupied_slots(consumer);
        let spill_s = self.draw(&supplier_slots, nominal);
        let spill_d = self.draw(&consumer_slots, nominal);
        let excessive = extra + spill_s.max(spill_d);
        let up = extra + spill_s;
        let down = extra + spill_d;
        if up > 0.0 {
            self.add_overlay(&supplier_slots, up);
        }
        if down > 0.0 {
            self.add_overlay(&consumer_slots, -down);
        }
        Settlement {
            nominated: energy - excessive,
            excessive,
            state_changed: up > 0.0 || down > 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub mode: FlowMode,
    pub efr: f64,
    pub retail_buy: f64,
    pub retail_sell: f64,
    /// Re-linearise after this many state-changing trades; 0 chains linear
    /// estimates around the original base case.
    pub rebuild_interval: usize,
}

impl Default for MarketConfig {
    fn default() -> Self {
        MarketConfig {
            mode: FlowMode::Mixed,
            efr: 0.2,
            retail_buy: RETAIL_BUY,
            retail_sell: RETAIL_SELL,
            rebuild_interval: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub order_id: u64,
    pub transactions: Vec<Transaction>,
    /// Quantity left resting in the book, if any.
    pub rested: Option<f64>,
}

pub struct Market<'a> {
    network: &'a Network,
    base_injections: Vec<f64>,
    matrices: Cow<'a, SensitivityMatrices>,
    constants: TariffConstants,
    config: MarketConfig,
    accounting: FlowAccounting,
    /// Overlay already folded into the current linearisation point.
    linearised_overlay: Vec<f64>,
    state: LinearState,
    book: Vec<Order>,
    log: Vec<Transaction>,
    next_order: u64,
    state_changes: usize,
}

impl<'a> Market<'a> {
    pub fn new(
        network: &'a Network,
        base_case: &BaseCase,
        matrices: &'a SensitivityMatrices,
        constants: TariffConstants,
        config: MarketConfig,
    ) -> Result<Self> {
        constants.validate()?;
        if base_case.injections() != matrices.base_injections.as_slice() {
            return Err(Error::Consistency(
                "sensitivities were not built around this base case".into(),
            ));
        }
        Ok(Market {
            network,
            base_injections: base_case.injections().to_vec(),
            state: matrices.base_linear(),
            matrices: Cow::Borrowed(matrices),
            constants,
            config,
            accounting: FlowAccounting::new(base_case, config.mode, config.efr)?,
            linearised_overlay: vec![0.0; base_case.injections().len()],
            book: Vec::new(),
            log: Vec::new(),
            next_order: 0,
            state_changes: 0,
        })
    }

    pub fn book(&self) -> &[Order] {
        &self.book
    }

    pub fn transactions(&self) -> &[Transaction] {
        &self.log
    }

    pub fn into_transactions(self) -> Vec<Transaction> {
        self.log
    }

    pub fn accounting(&self) -> &FlowAccounting {
        &self.accounting
    }

    /// Linear estimate of the current network state (base plus overlay).
    pub fn state(&self) -> &LinearState {
        &self.state
    }

    pub fn evaluator(&self) -> DnutEvaluator<'_> {
        DnutEvaluator::new(self.network, &self.matrices, self.state.clone(), self.constants)
    }

    pub fn submit_request(&mut self, request: &OrderRequest) -> Result<MatchOutcome> {
        let owner = self
            .network
            .prosumer_index(&request.owner)
            .ok_or_else(|| Error::Reference(format!("unknown prosumer '{}'", request.owner)))?;
        self.submit(owner, request.side, request.price, request.quantity)
    }

    pub fn submit(&mut self, owner: usize, side: Side, price: f64, quantity: f64) -> Result<MatchOutcome> {
        if owner >= self.network.np() {
            return Err(Error::Reference(format!("prosumer {owner} does not exist")));
        }
        if !price.is_finite() {
            return Err(Error::OrderRejected(format!("price {price} is not finite")));
        }
        let mut remaining = quantize(quantity);
        if !(remaining >= MIN_ENERGY) {
            return Err(Error::OrderRejected(format!(
                "quantity {quantity} MWh is below the 1 Wh minimum"
            )));
        }
        if self.book.iter().any(|o| o.owner == owner && o.side != side) {
            return Err(Error::OrderRejected(format!(
                "prosumer {owner} already has a resting order on the opposite side"
            )));
        }
        let id = self.next_order;
        self.next_order += 1;
        let timestamp = id;
        let mut transactions = Vec::new();

        loop {
            let Some((index, dnut, breakdown)) = self.best_counterparty(owner, side, price, remaining)?
            else {
                break;
            };
            let resting = self.book[index].clone();
            let fill = remaining.min(resting.quantity);
            let (supplier, consumer, sp, dp, so, d_o) = match side {
                Side::Demand => (resting.owner, owner, resting.price, price, resting.id, id),
                Side::Supply => (owner, resting.owner, price, resting.price, id, resting.id),
            };
            let energy_price = match side {
                Side::Demand => sp,
                Side::Supply => dp - dnut,
            };
            let after = self.evaluator().after_state(supplier, consumer, fill)?;
            let settlement = self.accounting.settle(self.network, supplier, consumer, fill);
            let prosumers = self.network.prosumers();
            let mut tx = Transaction {
                id: self.log.len() as u64,
                timestamp,
                supplier,
                consumer,
                supplier_name: prosumers[supplier].name.clone(),
                consumer_name: prosumers[consumer].name.clone(),
                supply_order: so,
                demand_order: d_o,
                energy: fill,
                supply_price: sp,
                demand_price: dp,
                energy_price,
                dnut,
                charges: breakdown,
                nominated_energy: settlement.nominated,
                excessive_energy: settlement.excessive,
                buyer_surplus: 0.0,
                seller_surplus: 0.0,
                limit_breaches: limit_breaches(self.network, &after),
                state_changed: settlement.state_changed,
            };
            let (b, s) = surplus(&tx, self.config.retail_buy, self.config.retail_sell);
            tx.buyer_surplus = b;
            tx.seller_surplus = s;

            if settlement.state_changed {
                self.refresh_state()?;
            }

            remaining -= fill;
            let left = resting.quantity - fill;
            if left >= MIN_ENERGY {
                self.book[index].quantity = left;
            } else {
                self.book.remove(index);
            }
            self.log.push(tx.clone());
            transactions.push(tx);
            if remaining < MIN_ENERGY {
                break;
            }
        }

        let rested = if remaining >= MIN_ENERGY {
            self.book.push(Order {
                id,
                owner,
                side,
                price,
                quantity: remaining,
                timestamp,
            });
            Some(remaining)
        } else {
            None
        };
        Ok(MatchOutcome {
            order_id: id,
            transactions,
            rested,
        })
    }

    /// Feasible resting order with the best tariff-inclusive price for the
    /// incoming side, earliest first on ties.
    fn best_counterparty(
        &self,
        owner: usize,
        side: Side,
        price: f64,
        remaining: f64,
    ) -> Result<Option<(usize, f64, ChargeBreakdown)>> {
        let evaluator = self.evaluator();
        let mut best: Option<(usize, f64, f64, ChargeBreakdown)> = None;
        for (i, o) in self.book.iter().enumerate() {
            if o.side == side {
                continue;
            }
            let fill = remaining.min(o.quantity);
            let (supplier, consumer, p_s, p_d) = match side {
                Side::Demand => (o.owner, owner, o.price, price),
                Side::Supply => (owner, o.owner, price, o.price),
            };
            let (dnut, breakdown) = evaluator.pair(supplier, consumer, fill)?;
            if !crosses(p_d, p_s, dnut) {
                continue;
            }
            // lower is better for the incoming side
            let score = match side {
                Side::Demand => p_s + dnut,
                Side::Supply => -(p_d - dnut),
            };
            let better = match &best {
                None => true,
                Some((_, s, _, _)) => score < *s,
            };
            if better {
                best = Some((i, score, dnut, breakdown));
            }
        }
        Ok(best.map(|(i, _, d, b)| (i, d, b)))
    }

    fn refresh_state(&mut self) -> Result<()> {
        self.state_changes += 1;
        let interval = self.config.rebuild_interval;
        if interval > 0 && self.state_changes % interval == 0 {
            let injections: Vec<f64> = self
                .base_injections
                .iter()
                .zip(&self.accounting.overlay)
                .map(|(b, o)| b + o)
                .collect();
            let rebuilt = build_at(self.network, &injections, DEFAULT_PERTURBATION)?;
            self.state = rebuilt.base_linear();
            self.matrices = Cow::Owned(rebuilt);
            self.linearised_overlay = self.accounting.overlay.clone();
        } else {
            let step: Vec<f64> = self
                .accounting
                .overlay
                .iter()
                .zip(&self.linearised_overlay)
                .map(|(o, l)| o - l)
                .collect();
            self.matrices.apply(&mut self.state, &step);
            self.linearised_overlay = self.accounting.overlay.clone();
        }
        Ok(())
    }

    /// Overlay of excessive flows as an injection delta.
    pub fn overlay(&self) -> InjectionDelta {
        InjectionDelta(self.accounting.overlay.clone())
    }
}

/// Submits every request in order, returning the full trade log.
pub fn replay(market: &mut Market<'_>, requests: &[OrderRequest]) -> Result<Vec<Transaction>> {
    for r in requests {
        market.submit_request(r)?;
    }
    Ok(market.transactions().to_vec())
}

pub fn write_jsonl<T: Serialize, W: Write>(mut writer: W, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n").map_err(|source| Error::Io {
            path: "<trade log>".into(),
            source,
        })?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| Error::Io {
            path: "<jsonl>".into(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push(serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            file: "<jsonl>".into(),
            row: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::fixtures::two_bus;
    use crate::network::{Bus, Branch, Connection, ImpedanceMatrix, Phase, Prosumer};
    use crate::sensitivity::build;
    use proptest::prelude::*;

    /// Two prosumers on one bus so DNUT is zero, plus a third further out.
    fn line3() -> Network {
        let mut b1 = Bus::new("B1");
        b1.earthing_resistance = Some(30.0);
        let mut b2 = Bus::new("B2");
        b2.earthing_resistance = Some(30.0);
        let br = |id: &str, f: &str, t: &str| Branch {
            id: id.into(),
            from_bus: f.into(),
            to_bus: t.into(),
            length: 100.0,
            impedance: ImpedanceMatrix::uniform(0.3e-3, 0.08e-3),
            current_rating: 200.0,
        };
        let p = |n: &str, b: &str, e: f64| Prosumer {
            name: n.into(),
            bus: b.into(),
            connection: Connection::Single(Phase::A),
            base_injection: e,
        };
        Network::new(
            vec![Bus::new("S"), b1, b2],
            vec![br("L1", "S", "B1"), br("L2", "B1", "B2")],
            vec![p("G", "B1", 1e-3), p("C", "B1", -1e-3), p("F", "B2", -1e-3)],
            "S",
        )
        .unwrap()
    }

    fn market_for<'a>(
        net: &'a Network,
        bc: &BaseCase,
        m: &'a SensitivityMatrices,
        config: MarketConfig,
    ) -> Market<'a> {
        Market::new(net, bc, m, TariffConstants::default(), config).unwrap()
    }

    #[test]
    fn price_condition_examples() {
        assert!(crosses(80.0, 50.0, 10.0));
        assert!(!crosses(55.0, 50.0, 10.0));
        assert!(crosses(50.0, 55.0, -8.0));
    }

    #[test]
    fn matches_at_maker_price_on_same_bus() {
        let net = line3();
        let bc = BaseCase::from_network(&net);
        let m = build(&net, &bc).unwrap();
        let mut mk = market_for(&net, &bc, &m, MarketConfig::default());
        let out = mk.submit(0, Side::Supply, 50.0, 4e-4).unwrap();
        assert!(out.transactions.is_empty());
        assert_eq!(out.rested, Some(quantize(4e-4)));
        let out = mk.submit(1, Side::Demand, 80.0, 3e-4).unwrap();
        assert_eq!(out.transactions.len(), 1);
        let tx = &out.transactions[0];
        assert_eq!(tx.energy_price, 50.0);
        assert_eq!(tx.dnut, 0.0);
        assert_eq!(tx.nominated_energy + tx.excessive_energy, tx.energy);
        assert_eq!(mk.book().len(), 1);
        assert_eq!(mk.book()[0].quantity, quantize(4e-4) - quantize(3e-4));
    }

    #[test]
    fn uncrossed_prices_rest() {
        let net = line3();
        let bc = BaseCase::from_network(&net);
        let m = build(&net, &bc).unwrap();
        let mut mk = market_for(&net, &bc, &m, MarketConfig::default());
        mk.submit(0, Side::Supply, 60.0, 4e-4).unwrap();
        let out = mk.submit(1, Side::Demand, 55.0, 4e-4).unwrap();
        assert!(out.transactions.is_empty());
        assert_eq!(mk.book().len(), 2);
    }

    #[test]
    fn negative_tariff_crosses_prices() {
        // generator near the slack selling to a far consumer raises losses,
        // a far generator selling upstream lowers them
        let net = line3();
        let bc = BaseCase::from_network(&net);
        let m = build(&net, &bc).unwrap();
        let ev = DnutEvaluator::at_base(&net, &m, TariffConstants::default());
        let (dnut, _) = ev.pair(1, 2, 4e-4).unwrap();
        let (reverse, _) = ev.pair(2, 1, 4e-4).unwrap();
        assert!(reverse < 0.0, "{dnut} {reverse}");
        let mut mk = market_for(&net, &bc, &m, MarketConfig::default());
        let p_s = 50.0;
        let p_d = p_s + reverse / 2.0;
        mk.submit(2, Side::Supply, p_s, 4e-4).unwrap();
        let out = mk.submit(1, Side::Demand, p_d, 4e-4).unwrap();
        assert_eq!(out.transactions.len(), 1);
        let tx = &out.transactions[0];
        assert!(tx.demand_price >= tx.supply_price + tx.dnut);
        assert!(tx.demand_price < tx.supply_price);
    }

    #[test]
    fn resting_demand_keeps_buyer_within_bid() {
        let net = line3();
        let bc = BaseCase::from_network(&net);
        let m = build(&net, &bc).unwrap();
        let mut mk = market_for(&net, &bc, &m, MarketConfig::default());
        mk.submit(2, Side::Demand, 80.0, 2e-4).unwrap();
        let out = mk.submit(0, Side::Supply, 40.0, 2e-4).unwrap();
        let tx = &out.transactions[0];
        assert!((tx.buyer_price() - 80.0).abs() < 1e-9);
        assert!(tx.buyer_surplus >= 0.0 && tx.seller_surplus >= 0.0);
    }

    #[test]
    fn rejects_bad_orders() {
        let net = line3();
        let bc = BaseCase::from_network(&net);
        let m = build(&net, &bc).unwrap();
        let mut mk = market_for(&net, &bc, &m, MarketConfig::default());
        assert!(matches!(mk.submit(0, Side::Supply, 50.0, 5e-7), Err(Error::OrderRejected(_))));
        assert!(matches!(mk.submit(0, Side::Supply, f64::NAN, 1e-3), Err(Error::OrderRejected(_))));
        mk.submit(0, Side::Supply, 90.0, 1e-4).unwrap();
        assert!(matches!(mk.submit(0, Side::Demand, 95.0, 1e-4), Err(Error::OrderRejected(_))));
    }

    #[test]
    fn best_effective_price_wins_then_time() {
        let net = line3();
        let bc = BaseCase::from_network(&net);
        let m = build(&net, &bc).unwrap();
        let mut mk = market_for(&net, &bc, &m, MarketConfig::default());
        mk.submit(2, Side::Supply, 50.0, 1e-4).unwrap();
        mk.submit(0, Side::Supply, 50.0, 1e-4).unwrap();
        // consumer C sits with G: zero tariff beats any positive one from F
        let ev = DnutEvaluator::at_base(&net, &m, TariffConstants::default());
        let (from_far, _) = ev.pair(2, 1, 1e-4).unwrap();
        let out = mk.submit(1, Side::Demand, 84.0, 1e-4).unwrap();
        let expected = if from_far < 0.0 { 2 } else { 0 };
        assert_eq!(out.transactions[0].supplier, expected);
    }

    #[test]
    fn mixed_split_with_ample_nominations() {
        let net = two_bus(0.5e-3, 100.0, Connection::ThreePhase);
        let bc = BaseCase::new(&net, vec![5e-3, 5e-3, 5e-3]).unwrap();
        let mut acc = FlowAccounting::new(&bc, FlowMode::Mixed, 0.2).unwrap();
        let e = quantize(1e-3);
        let s = acc.settle(&net, 0, 0, e);
        assert!((s.excessive - 0.2e-3).abs() < 1e-12);
        assert!((s.nominated - 0.8e-3).abs() < 1e-12);
        assert_eq!(s.nominated + s.excessive, e);
        assert!(s.state_changed);
    }

    #[test]
    fn nominated_within_forecast_leaves_state() {
        let net = line3();
        let bc = BaseCase::from_network(&net);
        let mut acc = FlowAccounting::new(&bc, FlowMode::Nominated, 0.2).unwrap();
        let s = acc.settle(&net, 0, 2, quantize(5e-4));
        assert!(!s.state_changed);
        assert_eq!(s.excessive, 0.0);
        assert!(acc.overlay.iter().all(|&x| x == 0.0));
        // exceeding the forecast spills
        let s = acc.settle(&net, 0, 2, quantize(8e-4));
        assert!(s.state_changed);
        assert_eq!(s.excessive, quantize(8e-4) - (quantize(1e-3) - quantize(5e-4)));
        assert!(acc.remaining_nomination.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn surplus_example() {
        let tx = Transaction {
            id: 0,
            timestamp: 0,
            supplier: 0,
            consumer: 1,
            supplier_name: "a".into(),
            consumer_name: "b".into(),
            supply_order: 0,
            demand_order: 1,
            energy: 1e-3,
            supply_price: RETAIL_SELL,
            demand_price: RETAIL_BUY,
            energy_price: RETAIL_SELL,
            dnut: 0.0,
            charges: ChargeBreakdown::default(),
            nominated_energy: 1e-3,
            excessive_energy: 0.0,
            buyer_surplus: 0.0,
            seller_surplus: 0.0,
            limit_breaches: 0,
            state_changed: false,
        };
        let (b, s) = surplus(&tx, RETAIL_BUY, RETAIL_SELL);
        assert!((b - 0.04543).abs() < 1e-12);
        assert_eq!(s, 0.0);
        let at_retail = Transaction {
            energy_price: RETAIL_BUY,
            ..tx
        };
        assert_eq!(surplus(&at_retail, RETAIL_BUY, RETAIL_SELL).0, 0.0);
    }

    #[test]
    fn jsonl_roundtrip() {
        let reqs = vec![
            OrderRequest {
                owner: "G".into(),
                side: Side::Supply,
                price: 45.0,
                quantity: 2e-4,
            },
            OrderRequest {
                owner: "F".into(),
                side: Side::Demand,
                price: 70.0,
                quantity: 1e-4,
            },
        ];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &reqs).unwrap();
        let back: Vec<OrderRequest> = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, reqs);
    }

    fn stream() -> impl Strategy<Value = Vec<(usize, bool, f64, f64)>> {
        proptest::collection::vec((0usize..3, any::<bool>(), 39.03f64..84.46, 1e-6f64..1.5e-3), 1..25)
    }

    fn run(mode: FlowMode, efr: f64, orders: &[(usize, bool, f64, f64)]) -> Vec<Transaction> {
        let net = line3();
        let bc = BaseCase::from_network(&net);
        let m = build(&net, &bc).unwrap();
        let config = MarketConfig {
            mode,
            efr,
            ..MarketConfig::default()
        };
        let mut mk = market_for(&net, &bc, &m, config);
        for &(owner, supply, price, q) in orders {
            let side = if supply { Side::Supply } else { Side::Demand };
            let _ = mk.submit(owner, side, price, q);
        }
        mk.into_transactions()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn trades_respect_price_condition_and_conserve(orders in stream()) {
            let log = run(FlowMode::Mixed, 0.2, &orders);
            for tx in &log {
                prop_assert!(tx.demand_price >= tx.supply_price + tx.dnut);
                prop_assert_eq!(tx.nominated_energy + tx.excessive_energy, tx.energy);
                prop_assert!(tx.energy >= MIN_ENERGY);
            }
        }

        #[test]
        fn mixed_boundaries_match_pure_modes(orders in stream()) {
            prop_assert_eq!(run(FlowMode::Mixed, 1.0, &orders), run(FlowMode::Excessive, 0.7, &orders));
            prop_assert_eq!(run(FlowMode::Mixed, 0.0, &orders), run(FlowMode::Nominated, 0.7, &orders));
        }

        #[test]
        fn book_quantity_drops_by_filled_amount(orders in stream()) {
            let net = line3();
            let bc = BaseCase::from_network(&net);
            let m = build(&net, &bc).unwrap();
            let mut mk = market_for(&net, &bc, &m, MarketConfig::default());
            for &(owner, supply, price, q) in &orders {
                let side = if supply { Side::Supply } else { Side::Demand };
                let before: f64 = mk.book().iter().map(|o| o.quantity).sum();
                if let Ok(out) = mk.submit(owner, side, price, q) {
                    let after: f64 = mk.book().iter().map(|o| o.quantity).sum();
                    let filled: f64 = out.transactions.iter().map(|t| t.energy).sum();
                    let added = out.rested.unwrap_or(0.0);
                    // residues under 1 Wh are cancelled
                    let cancelled = before + added - filled - after;
                    prop_assert!(cancelled.abs() < MIN_ENERGY * out.transactions.len().max(1) as f64);
                    prop_assert!(cancelled >= 0.0);
                }
            }
        }
    }
}
