//! Deterministic simulator and closed-form calculator for relay-coordinated
//! NAT hole punching.
//!
//! The stack, bottom up: [`nat`] models RFC 4787 mapping and filtering,
//! [`netsim`] moves packets through NATs on a discrete-event clock,
//! [`transport`] implements TCP simultaneous open and QUIC-style punching,
//! [`dcutr`] runs the relay-signaled protocol, and [`campaign`] samples
//! populations, runs trials in parallel and aggregates them. [`oracle`]
//! holds the closed forms the simulation is checked against.

pub mod campaign;
pub mod dcutr;
pub mod nat;
pub mod netsim;
pub mod oracle;
pub mod rng;
pub mod scalar;
pub mod time;
pub mod transport;

pub use campaign::{run_campaign, ResultSet, ScenarioConfig};
pub use dcutr::{run_hole_punch, HolePunchResult, Outcome, PunchOptions};

/// Pair-class shares in double precision.
pub type PopulationMix64 = oracle::PopulationMix<f64>;
/// Dial timing geometry in signed microseconds.
pub type SyncGeometryUs = oracle::SyncGeometry<i64>;
