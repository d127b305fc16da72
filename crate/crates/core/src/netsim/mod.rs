//! Deterministic discrete-event network: integer-microsecond clock, stable
//! event ordering, per-direction link delay/jitter/loss, hop counts for TTL
//! semantics, and packet routing through NAT devices.

mod engine;
mod link;
mod topology;

pub use engine::{
    DropReason, Engine, Occurrence, Packet, PacketKind, SimError, TraceEvent, TraceId, TraceRecord, DEFAULT_TTL,
};
pub use link::{
    sample_delay, DelayDistribution, DelayModel, Direction, LinkModel, DEFAULT_CORE_HOPS, DEFAULT_LOCAL_HOPS,
};
pub use topology::{Attachment, Host, HostId, Topology, TopologyError};
