//! Dynamic network usage tariffs for a peer-to-peer local electricity market on
//! unbalanced four-wire LV feeders.
//!
//! The crate is organised bottom-up:
//!
//! * [`network`], [`feeder`], [`scenario`]: network model and its two input formats.
//! * [`power_flow`]: exact backward/forward sweep load flow and loss evaluation.
//! * [`sensitivity`]: voltage and current sensitivity matrices around a base case.
//! * [`tariff`]: per-transaction charges and the prosumer-by-prosumer tariff matrix.
//! * [`market`]: continuous order book with tariff-aware matching and flow accounting.
//! * [`simulation`]: randomised scenarios and the three experiment sweeps.

pub mod error;
pub mod feeder;
pub mod market;
pub mod network;
pub mod power_flow;
pub mod scenario;
pub mod sensitivity;
pub mod simulation;
pub mod tariff;

pub use error::{Error, Result};
pub use network::{BaseCase, Branch, Bus, Connection, Network, Phase, Prosumer};
pub use power_flow::{NetworkState, StateMagnitudes};
