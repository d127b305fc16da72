//! Stateful NAPT model following the RFC 4787 mapping and filtering
//! taxonomy, with session capacity, idle expiry, static port mappings
//! (UPnP / NAT-PMP style) and source denylisting.
//!
//! A mapping or a recorded contact only counts for inbound decisions once it
//! is strictly older than the inbound packet: an outbound packet and an
//! inbound packet handled at the same simulated instant do not see each
//! other. This makes the simultaneous-open boundary independent of event
//! ordering.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SimRng;
use crate::time::SimTime;

/// Opaque IPv4-like host identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HostAddr(pub u32);

impl fmt::Display for HostAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.0.to_be_bytes();
        write!(f, "{a}.{b}.{c}.{d}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Transport {
    Tcp,
    Udp,
}

impl Transport {
    fn index(self) -> usize {
        match self {
            Transport::Tcp => 0,
            Transport::Udp => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint {
    pub addr: HostAddr,
    pub port: u16,
    pub transport: Transport,
}

impl Endpoint {
    pub fn new(addr: HostAddr, port: u16, transport: Transport) -> Self {
        Endpoint { addr, port, transport }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = match self.transport {
            Transport::Tcp => "tcp",
            Transport::Udp => "udp",
        };
        write!(f, "{}:{}/{t}", self.addr, self.port)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MappingBehavior {
    #[serde(rename = "EIM")]
    EndpointIndependent,
    #[serde(rename = "ADM")]
    AddressDependent,
    #[serde(rename = "APDM")]
    AddressAndPortDependent,
}

impl MappingBehavior {
    /// ADM and APDM, collectively "endpoint-dependent".
    pub fn is_endpoint_dependent(self) -> bool {
        !matches!(self, MappingBehavior::EndpointIndependent)
    }

    pub fn label(self) -> &'static str {
        match self {
            MappingBehavior::EndpointIndependent => "EIM",
            MappingBehavior::AddressDependent => "ADM",
            MappingBehavior::AddressAndPortDependent => "APDM",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FilteringBehavior {
    #[serde(rename = "EIF")]
    EndpointIndependent,
    #[serde(rename = "ADF")]
    AddressDependent,
    #[serde(rename = "APDF")]
    AddressAndPortDependent,
}

impl FilteringBehavior {
    pub fn label(self) -> &'static str {
        match self {
            FilteringBehavior::EndpointIndependent => "EIF",
            FilteringBehavior::AddressDependent => "ADF",
            FilteringBehavior::AddressAndPortDependent => "APDF",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortAllocation {
    /// Uniform over currently free ports.
    RandomUniform,
    /// Next free port after the previous allocation, wrapping inside the
    /// port space.
    Sequential { start: u16 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingLifetimes {
    pub udp: Duration,
    pub tcp_established: Duration,
    pub tcp_syn_only: Duration,
}

impl Default for MappingLifetimes {
    fn default() -> Self {
        MappingLifetimes {
            udp: Duration::from_secs(120),
            tcp_established: Duration::from_secs(24 * 3600),
            tcp_syn_only: Duration::from_secs(60),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenylistPolicy {
    pub enabled: bool,
    /// Denylist a source whose UDP datagram finds no mapping.
    pub unsolicited_udp_triggers: bool,
    /// More than this many inbound SYNs from one address inside
    /// `syn_flood_window` denylists the address.
    pub syn_flood_threshold: u32,
    pub syn_flood_window: Duration,
    pub expiry: Duration,
}

impl Default for DenylistPolicy {
    fn default() -> Self {
        DenylistPolicy {
            enabled: false,
            unsolicited_udp_triggers: false,
            syn_flood_threshold: 16,
            syn_flood_window: Duration::from_secs(10),
            expiry: Duration::from_secs(300),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NatConfig {
    pub mapping: MappingBehavior,
    pub filtering: FilteringBehavior,
    pub port_alloc: PortAllocation,
    /// Ports are allocated from `[0, port_space)` (or `[1024, port_space)`).
    pub port_space: u32,
    pub exclude_well_known: bool,
    pub session_capacity: usize,
    pub lifetimes: MappingLifetimes,
    pub denylist: DenylistPolicy,
    /// Answer an unsolicited inbound SYN with a RST toward its source, as
    /// stateful firewalls commonly do.
    pub rst_on_unsolicited_syn: bool,
}

impl NatConfig {
    pub fn new(mapping: MappingBehavior, filtering: FilteringBehavior) -> Self {
        NatConfig {
            mapping,
            filtering,
            ..NatConfig::default()
        }
    }
}

impl Default for NatConfig {
    fn default() -> Self {
        NatConfig {
            mapping: MappingBehavior::EndpointIndependent,
            filtering: FilteringBehavior::AddressAndPortDependent,
            port_alloc: PortAllocation::RandomUniform,
            port_space: 65_536,
            exclude_well_known: false,
            session_capacity: 16_384,
            lifetimes: MappingLifetimes::default(),
            denylist: DenylistPolicy::default(),
            rst_on_unsolicited_syn: false,
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NatError {
    #[error("session table full")]
    CapacityExceeded,
    #[error("no free external port")]
    PortExhausted,
    #[error("source and destination transports differ")]
    TransportMismatch,
}

/// Granularity at which outbound mappings are shared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DestinationKey {
    Any,
    Address(HostAddr),
    Endpoint(HostAddr, u16),
}

impl DestinationKey {
    fn for_destination(behavior: MappingBehavior, dst: &Endpoint) -> Self {
        match behavior {
            MappingBehavior::EndpointIndependent => DestinationKey::Any,
            MappingBehavior::AddressDependent => DestinationKey::Address(dst.addr),
            MappingBehavior::AddressAndPortDependent => DestinationKey::Endpoint(dst.addr, dst.port),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mapping {
    pub internal: Endpoint,
    pub external: Endpoint,
    pub destination_key: DestinationKey,
    pub created_at: SimTime,
    pub last_activity: SimTime,
    pub tcp_established: bool,
    /// First outbound contact time per remote endpoint.
    contacts: HashMap<(HostAddr, u16), SimTime>,
    contacted_addrs: HashMap<HostAddr, SimTime>,
}

impl Mapping {
    fn lifetime(&self, l: &MappingLifetimes) -> Duration {
        match (self.internal.transport, self.tcp_established) {
            (Transport::Udp, _) => l.udp,
            (Transport::Tcp, true) => l.tcp_established,
            (Transport::Tcp, false) => l.tcp_syn_only,
        }
    }

    fn is_live(&self, l: &MappingLifetimes, now: SimTime) -> bool {
        now.since(self.last_activity) <= self.lifetime(l)
    }

    fn touch(&mut self, dst: &Endpoint, now: SimTime) {
        self.last_activity = self.last_activity.max(now);
        self.contacts.entry((dst.addr, dst.port)).or_insert(now);
        self.contacted_addrs.entry(dst.addr).or_insert(now);
    }

    fn admits(&self, filtering: FilteringBehavior, src: &Endpoint, now: SimTime) -> bool {
        match filtering {
            FilteringBehavior::EndpointIndependent => true,
            FilteringBehavior::AddressDependent => self.contacted_addrs.get(&src.addr).is_some_and(|t| *t < now),
            FilteringBehavior::AddressAndPortDependent => {
                self.contacts.get(&(src.addr, src.port)).is_some_and(|t| *t < now)
            }
        }
    }

    /// Whether outbound traffic toward `remote` went through this mapping.
    pub fn has_contacted(&self, remote: &Endpoint) -> bool {
        self.contacts.contains_key(&(remote.addr, remote.port))
    }
}

/// Explicit inbound port forward, admitting traffic from any source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortMapping {
    pub internal: Endpoint,
    pub external: Endpoint,
    pub created_at: SimTime,
    pub expires_at: SimTime,
}

impl PortMapping {
    pub fn is_live(&self, now: SimTime) -> bool {
        now < self.expires_at
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NatDrop {
    NoMapping,
    FilterMismatch,
    Denylisted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InboundVerdict {
    Deliver(Endpoint),
    Drop(NatDrop),
}

impl InboundVerdict {
    pub fn is_deliver(&self) -> bool {
        matches!(self, InboundVerdict::Deliver(_))
    }
}

type MappingId = u64;

#[derive(Clone, Debug)]
pub struct NatDevice {
    config: NatConfig,
    external_address: HostAddr,
    rng: SimRng,
    mappings: HashMap<MappingId, Mapping>,
    next_id: MappingId,
    by_key: HashMap<(Endpoint, DestinationKey), MappingId>,
    by_port: HashMap<(Transport, u16), MappingId>,
    port_mappings: HashMap<(Transport, u16), PortMapping>,
    next_sequential: [u32; 2],
    denylist: HashMap<HostAddr, SimTime>,
    syn_log: HashMap<HostAddr, VecDeque<SimTime>>,
    allocated_total: u64,
}

impl NatDevice {
    pub fn new(config: NatConfig, external_address: HostAddr, rng: SimRng) -> Self {
        assert!(
            config.port_space >= 1 && config.port_space <= 65_536,
            "port space must lie in [1, 65536]"
        );
        let start = match config.port_alloc {
            PortAllocation::Sequential { start } => start as u32,
            PortAllocation::RandomUniform => 0,
        };
        NatDevice {
            config,
            external_address,
            rng,
            mappings: HashMap::new(),
            next_id: 0,
            by_key: HashMap::new(),
            by_port: HashMap::new(),
            port_mappings: HashMap::new(),
            next_sequential: [start; 2],
            denylist: HashMap::new(),
            syn_log: HashMap::new(),
            allocated_total: 0,
        }
    }

    pub fn config(&self) -> &NatConfig {
        &self.config
    }

    pub fn external_address(&self) -> HostAddr {
        self.external_address
    }

    pub fn session_count(&self) -> usize {
        self.mappings.len()
    }

    /// Number of external ports handed out over the device's lifetime.
    pub fn allocations(&self) -> u64 {
        self.allocated_total
    }

    pub fn mappings(&self) -> impl Iterator<Item = &Mapping> {
        self.mappings.values()
    }

    /// Live mapping that owns `external`, if any.
    pub fn mapping_for_external(&self, external: &Endpoint, now: SimTime) -> Option<&Mapping> {
        let id = self.by_port.get(&(external.transport, external.port))?;
        self.mappings.get(id).filter(|m| m.is_live(&self.config.lifetimes, now))
    }

    pub fn port_mappings(&self) -> impl Iterator<Item = &PortMapping> {
        self.port_mappings.values()
    }

    pub fn is_denylisted(&self, addr: HostAddr, now: SimTime) -> bool {
        self.denylist.get(&addr).is_some_and(|until| now < *until)
    }

    /// Rewrites an outbound packet's source, creating or refreshing the
    /// mapping selected by the device's mapping behavior.
    pub fn translate_outbound(&mut self, src: Endpoint, dst: Endpoint, now: SimTime) -> Result<Endpoint, NatError> {
        if src.transport != dst.transport {
            return Err(NatError::TransportMismatch);
        }
        // A static forward also carries the internal socket's outbound traffic.
        if let Some(pm) = self
            .port_mappings
            .values()
            .find(|pm| pm.internal == src && pm.is_live(now))
        {
            return Ok(pm.external);
        }
        let key = (src, DestinationKey::for_destination(self.config.mapping, &dst));
        if let Some(&id) = self.by_key.get(&key) {
            let lifetimes = self.config.lifetimes;
            let mapping = self.mappings.get_mut(&id).expect("indexed mapping exists");
            if mapping.is_live(&lifetimes, now) {
                mapping.touch(&dst, now);
                return Ok(mapping.external);
            }
            self.remove(id);
        }
        if self.mappings.len() >= self.config.session_capacity {
            self.expire(now);
            if self.mappings.len() >= self.config.session_capacity {
                return Err(NatError::CapacityExceeded);
            }
        }
        let port = self.allocate(src.transport, now)?;
        let external = Endpoint::new(self.external_address, port, src.transport);
        let id = self.next_id;
        self.next_id += 1;
        let mut mapping = Mapping {
            internal: src,
            external,
            destination_key: key.1,
            created_at: now,
            last_activity: now,
            tcp_established: false,
            contacts: HashMap::new(),
            contacted_addrs: HashMap::new(),
        };
        mapping.touch(&dst, now);
        self.mappings.insert(id, mapping);
        self.by_key.insert(key, id);
        self.by_port.insert((src.transport, port), id);
        self.allocated_total += 1;
        Ok(external)
    }

    /// Inbound decision for a non-SYN packet.
    pub fn filter_inbound(&mut self, src: Endpoint, dst_external: Endpoint, now: SimTime) -> InboundVerdict {
        self.filter_inbound_packet(src, dst_external, false, now)
    }

    /// Inbound decision; `is_syn` feeds the SYN-flood detector.
    pub fn filter_inbound_packet(
        &mut self,
        src: Endpoint,
        dst_external: Endpoint,
        is_syn: bool,
        now: SimTime,
    ) -> InboundVerdict {
        if self.is_denylisted(src.addr, now) {
            return InboundVerdict::Drop(NatDrop::Denylisted);
        }
        if is_syn && self.config.denylist.enabled && self.register_syn(src.addr, now) {
            return InboundVerdict::Drop(NatDrop::Denylisted);
        }
        if dst_external.addr != self.external_address {
            return InboundVerdict::Drop(NatDrop::NoMapping);
        }
        let port_key = (dst_external.transport, dst_external.port);
        if let Some(pm) = self.port_mappings.get(&port_key) {
            if pm.is_live(now) && pm.created_at < now {
                return InboundVerdict::Deliver(pm.internal);
            }
        }
        let owner = self.by_port.get(&port_key).copied().filter(|id| {
            let m = &self.mappings[id];
            m.is_live(&self.config.lifetimes, now) && m.created_at < now
        });
        let Some(id) = owner else {
            let policy = self.config.denylist;
            if policy.enabled && policy.unsolicited_udp_triggers && src.transport == Transport::Udp {
                self.denylist.insert(src.addr, now + policy.expiry);
            }
            return InboundVerdict::Drop(NatDrop::NoMapping);
        };
        let filtering = self.config.filtering;
        let mapping = self.mappings.get_mut(&id).expect("indexed mapping exists");
        if !mapping.admits(filtering, &src, now) {
            return InboundVerdict::Drop(NatDrop::FilterMismatch);
        }
        mapping.last_activity = mapping.last_activity.max(now);
        if mapping.internal.transport == Transport::Tcp {
            mapping.tcp_established = true;
        }
        InboundVerdict::Deliver(mapping.internal)
    }

    /// Returns true if this SYN pushes `addr` over the flood threshold.
    fn register_syn(&mut self, addr: HostAddr, now: SimTime) -> bool {
        let policy = self.config.denylist;
        let log = self.syn_log.entry(addr).or_default();
        while log.front().is_some_and(|t| now.since(*t) >= policy.syn_flood_window) {
            log.pop_front();
        }
        log.push_back(now);
        if log.len() as u32 > policy.syn_flood_threshold {
            self.denylist.insert(addr, now + policy.expiry);
            true
        } else {
            false
        }
    }

    /// Installs an inbound port forward. `external_port` of `None` lets the
    /// allocator choose.
    pub fn add_port_mapping(
        &mut self,
        internal: Endpoint,
        external_port: Option<u16>,
        lifetime: Duration,
        now: SimTime,
    ) -> Result<Endpoint, NatError> {
        let port = match external_port {
            Some(p) if !self.is_occupied(internal.transport, p) => p,
            Some(_) => return Err(NatError::PortExhausted),
            None => self.allocate(internal.transport, now)?,
        };
        let external = Endpoint::new(self.external_address, port, internal.transport);
        self.port_mappings.insert(
            (internal.transport, port),
            PortMapping {
                internal,
                external,
                created_at: now,
                expires_at: now + lifetime,
            },
        );
        Ok(external)
    }

    /// Drops idle mappings, expired port forwards and expired denylist
    /// entries. Returns the number of dynamic mappings removed.
    pub fn expire(&mut self, now: SimTime) -> usize {
        let lifetimes = self.config.lifetimes;
        let dead: Vec<MappingId> = self
            .mappings
            .iter()
            .filter(|(_, m)| !m.is_live(&lifetimes, now))
            .map(|(id, _)| *id)
            .collect();
        for id in &dead {
            self.remove(*id);
        }
        self.port_mappings.retain(|_, pm| pm.is_live(now));
        self.denylist.retain(|_, until| now < *until);
        dead.len()
    }

    fn remove(&mut self, id: MappingId) {
        if let Some(m) = self.mappings.remove(&id) {
            self.by_key.remove(&(m.internal, m.destination_key));
            self.by_port.remove(&(m.external.transport, m.external.port));
        }
    }

    fn is_occupied(&self, transport: Transport, port: u16) -> bool {
        self.by_port.contains_key(&(transport, port)) || self.port_mappings.contains_key(&(transport, port))
    }

    fn port_bounds(&self) -> (u32, u32) {
        let lo = if self.config.exclude_well_known { 1024 } else { 0 };
        (lo.min(self.config.port_space), self.config.port_space)
    }

    fn occupied_in_range(&self, transport: Transport) -> u32 {
        let (lo, hi) = self.port_bounds();
        let in_range = |p: u16| (p as u32) >= lo && (p as u32) < hi;
        let dynamic = self
            .by_port
            .keys()
            .filter(|(t, p)| *t == transport && in_range(*p))
            .count();
        let fixed = self
            .port_mappings
            .keys()
            .filter(|(t, p)| *t == transport && in_range(*p))
            .count();
        (dynamic + fixed) as u32
    }

    fn allocate(&mut self, transport: Transport, now: SimTime) -> Result<u16, NatError> {
        let (lo, hi) = self.port_bounds();
        let span = hi - lo;
        if span == 0 {
            return Err(NatError::PortExhausted);
        }
        // Cheap check first; the exact count only matters near exhaustion.
        if self.by_port.len() + self.port_mappings.len() >= span as usize && self.occupied_in_range(transport) >= span {
            self.expire(now);
            if self.occupied_in_range(transport) >= span {
                return Err(NatError::PortExhausted);
            }
        }
        match self.config.port_alloc {
            PortAllocation::RandomUniform => loop {
                // Rejection sampling is uniform over the free ports.
                let p = self.rng.random_range(lo..hi) as u16;
                if !self.is_occupied(transport, p) {
                    return Ok(p);
                }
            },
            PortAllocation::Sequential { .. } => {
                let slot = transport.index();
                let mut cursor = self.next_sequential[slot];
                if cursor < lo || cursor >= hi {
                    cursor = lo;
                }
                for _ in 0..span {
                    let p = cursor as u16;
                    cursor = lo + (cursor - lo + 1) % span;
                    if !self.is_occupied(transport, p) {
                        self.next_sequential[slot] = cursor;
                        return Ok(p);
                    }
                }
                Err(NatError::PortExhausted)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    const NAT_ADDR: HostAddr = HostAddr(0xC633_6401);

    fn nat(config: NatConfig) -> NatDevice {
        NatDevice::new(config, NAT_ADDR, stream_rng(1, 0, Stream::Device(0)))
    }

    fn ep(addr: u32, port: u16) -> Endpoint {
        Endpoint::new(HostAddr(addr), port, Transport::Udp)
    }

    fn t(ms: u64) -> SimTime {
        SimTime::from_millis(ms)
    }

    const INTERNAL: u32 = 0x0A00_0002;
    const PEER_A: u32 = 0x5000_0001;
    const PEER_B: u32 = 0x5000_0002;

    #[test]
    fn eim_reuses_external_endpoint() {
        let mut n = nat(NatConfig::new(
            MappingBehavior::EndpointIndependent,
            FilteringBehavior::AddressAndPortDependent,
        ));
        let src = ep(INTERNAL, 4001);
        let a = n.translate_outbound(src, ep(PEER_A, 80), t(1)).unwrap();
        let b = n.translate_outbound(src, ep(PEER_B, 443), t(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.addr, NAT_ADDR);
        assert_eq!(n.session_count(), 1);
    }

    #[test]
    fn apdm_allocates_per_destination() {
        let mut n = nat(NatConfig::new(
            MappingBehavior::AddressAndPortDependent,
            FilteringBehavior::AddressAndPortDependent,
        ));
        let src = ep(INTERNAL, 4001);
        let a = n.translate_outbound(src, ep(PEER_A, 80), t(1)).unwrap();
        let b = n.translate_outbound(src, ep(PEER_B, 80), t(2)).unwrap();
        let c = n.translate_outbound(src, ep(PEER_A, 81), t(3)).unwrap();
        assert_ne!(a.port, b.port);
        assert_ne!(a.port, c.port);
        assert_eq!(n.translate_outbound(src, ep(PEER_A, 80), t(4)).unwrap(), a);
    }

    #[test]
    fn adm_keys_on_address_only() {
        let mut n = nat(NatConfig::new(
            MappingBehavior::AddressDependent,
            FilteringBehavior::AddressAndPortDependent,
        ));
        let src = ep(INTERNAL, 4001);
        let a = n.translate_outbound(src, ep(PEER_A, 80), t(1)).unwrap();
        let a2 = n.translate_outbound(src, ep(PEER_A, 9999), t(2)).unwrap();
        let b = n.translate_outbound(src, ep(PEER_B, 80), t(3)).unwrap();
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }

    #[test]
    fn capacity_boundary() {
        let mut n = nat(NatConfig {
            session_capacity: 1,
            ..NatConfig::default()
        });
        n.translate_outbound(ep(INTERNAL, 1), ep(PEER_A, 80), t(1)).unwrap();
        assert_eq!(
            n.translate_outbound(ep(INTERNAL + 1, 1), ep(PEER_A, 80), t(2)),
            Err(NatError::CapacityExceeded)
        );
        // The existing mapping is still reusable.
        assert!(n.translate_outbound(ep(INTERNAL, 1), ep(PEER_B, 80), t(3)).is_ok());
    }

    #[test]
    fn port_exhaustion() {
        let mut n = nat(NatConfig {
            mapping: MappingBehavior::AddressAndPortDependent,
            port_space: 4,
            ..NatConfig::default()
        });
        let src = ep(INTERNAL, 1);
        let mut seen = Vec::new();
        for port in 0..4 {
            seen.push(n.translate_outbound(src, ep(PEER_A, port), t(1)).unwrap().port);
        }
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        assert_eq!(
            n.translate_outbound(src, ep(PEER_A, 99), t(2)),
            Err(NatError::PortExhausted)
        );
    }

    #[test]
    fn sequential_allocator_wraps_and_skips() {
        let mut n = nat(NatConfig {
            mapping: MappingBehavior::AddressAndPortDependent,
            port_alloc: PortAllocation::Sequential { start: 62 },
            port_space: 64,
            ..NatConfig::default()
        });
        n.add_port_mapping(ep(INTERNAL, 9), Some(0), Duration::from_secs(60), t(0))
            .unwrap();
        let src = ep(INTERNAL, 1);
        let ports: Vec<u16> = (0..3)
            .map(|i| n.translate_outbound(src, ep(PEER_A, i), t(1)).unwrap().port)
            .collect();
        assert_eq!(ports, vec![62, 63, 1]);
    }

    #[test]
    fn well_known_ports_can_be_excluded() {
        let mut n = nat(NatConfig {
            mapping: MappingBehavior::AddressAndPortDependent,
            exclude_well_known: true,
            port_alloc: PortAllocation::Sequential { start: 0 },
            ..NatConfig::default()
        });
        let p = n.translate_outbound(ep(INTERNAL, 1), ep(PEER_A, 1), t(1)).unwrap();
        assert_eq!(p.port, 1024);
    }

    #[test]
    fn eif_admits_any_source_once_mapped() {
        let mut n = nat(NatConfig::new(
            MappingBehavior::EndpointIndependent,
            FilteringBehavior::EndpointIndependent,
        ));
        let src = ep(INTERNAL, 4001);
        let ext = n.translate_outbound(src, ep(PEER_A, 80), t(1)).unwrap();
        assert_eq!(
            n.filter_inbound(ep(PEER_B, 5555), ext, t(2)),
            InboundVerdict::Deliver(src)
        );
    }

    #[test]
    fn apdf_rejects_uncontacted_endpoint() {
        let mut n = nat(NatConfig::default());
        let src = ep(INTERNAL, 4001);
        let ext = n.translate_outbound(src, ep(PEER_A, 80), t(1)).unwrap();
        assert_eq!(
            n.filter_inbound(ep(PEER_A, 81), ext, t(2)),
            InboundVerdict::Drop(NatDrop::FilterMismatch)
        );
        assert_eq!(
            n.filter_inbound(ep(PEER_A, 80), ext, t(2)),
            InboundVerdict::Deliver(src)
        );
    }

    #[test]
    fn adf_requires_contacted_address() {
        let mut n = nat(NatConfig::new(
            MappingBehavior::EndpointIndependent,
            FilteringBehavior::AddressDependent,
        ));
        let src = ep(INTERNAL, 4001);
        let ext = n.translate_outbound(src, ep(PEER_A, 80), t(1)).unwrap();
        assert!(n.filter_inbound(ep(PEER_A, 81), ext, t(2)).is_deliver());
        assert_eq!(
            n.filter_inbound(ep(PEER_B, 80), ext, t(2)),
            InboundVerdict::Drop(NatDrop::FilterMismatch)
        );
    }

    #[test]
    fn contact_must_precede_inbound() {
        let mut n = nat(NatConfig::default());
        let src = ep(INTERNAL, 4001);
        let ext = n.translate_outbound(src, ep(PEER_A, 80), t(5)).unwrap();
        assert_eq!(
            n.filter_inbound(ep(PEER_A, 80), ext, t(5)),
            InboundVerdict::Drop(NatDrop::NoMapping)
        );
        assert!(n.filter_inbound(ep(PEER_A, 80), ext, t(6)).is_deliver());
    }

    #[test]
    fn unsolicited_udp_denylists_source() {
        let mut n = nat(NatConfig {
            denylist: DenylistPolicy {
                enabled: true,
                unsolicited_udp_triggers: true,
                ..DenylistPolicy::default()
            },
            ..NatConfig::default()
        });
        let probe = Endpoint::new(NAT_ADDR, 30_000, Transport::Udp);
        assert_eq!(
            n.filter_inbound(ep(PEER_A, 80), probe, t(1)),
            InboundVerdict::Drop(NatDrop::NoMapping)
        );
        // The source is now blocked even for a legitimate reply.
        let src = ep(INTERNAL, 4001);
        let ext = n.translate_outbound(src, ep(PEER_A, 80), t(2)).unwrap();
        assert_eq!(
            n.filter_inbound(ep(PEER_A, 80), ext, t(3)),
            InboundVerdict::Drop(NatDrop::Denylisted)
        );
        // Until expiry.
        let later = t(3) + Duration::from_secs(301);
        let ext = n.translate_outbound(src, ep(PEER_A, 80), later).unwrap();
        assert!(n
            .filter_inbound(ep(PEER_A, 80), ext, later + Duration::from_millis(1))
            .is_deliver());
    }

    #[test]
    fn syn_flood_denylists() {
        let mut n = nat(NatConfig {
            denylist: DenylistPolicy {
                enabled: true,
                ..DenylistPolicy::default()
            },
            ..NatConfig::default()
        });
        let dst = Endpoint::new(NAT_ADDR, 30_000, Transport::Tcp);
        let src = Endpoint::new(HostAddr(PEER_A), 4001, Transport::Tcp);
        let mut verdicts = Vec::new();
        for i in 0..20 {
            verdicts.push(n.filter_inbound_packet(src, dst, true, t(100 * i)));
        }
        assert!(verdicts[..16]
            .iter()
            .all(|v| *v == InboundVerdict::Drop(NatDrop::NoMapping)));
        assert!(verdicts[16..]
            .iter()
            .all(|v| *v == InboundVerdict::Drop(NatDrop::Denylisted)));
    }

    #[test]
    fn expire_cases() {
        let mut n = nat(NatConfig::default());
        assert_eq!(n.expire(t(0)), 0);
        let src = ep(INTERNAL, 4001);
        n.translate_outbound(src, ep(PEER_A, 80), t(0)).unwrap();
        assert_eq!(n.expire(t(0) + Duration::from_secs(121)), 1);
        assert_eq!(n.session_count(), 0);

        n.translate_outbound(src, ep(PEER_A, 80), t(0)).unwrap();
        n.translate_outbound(src, ep(PEER_A, 80), t(119_000)).unwrap();
        assert_eq!(n.expire(t(0) + Duration::from_secs(121)), 0);
    }

    #[test]
    fn tcp_lifetime_depends_on_establishment() {
        let mut n = nat(NatConfig::default());
        let tcp = |addr, port| Endpoint::new(HostAddr(addr), port, Transport::Tcp);
        let ext = n.translate_outbound(tcp(INTERNAL, 1), tcp(PEER_A, 80), t(0)).unwrap();
        assert_eq!(n.expire(t(61_000)), 1);
        let ext2 = n
            .translate_outbound(tcp(INTERNAL, 1), tcp(PEER_A, 80), t(61_000))
            .unwrap();
        assert!(n.filter_inbound(tcp(PEER_A, 80), ext2, t(61_001)).is_deliver());
        assert_eq!(n.expire(t(3_600_000)), 0);
        let _ = ext;
    }

    #[test]
    fn port_mapping_admits_anyone_until_expiry() {
        let mut n = nat(NatConfig::default());
        let internal = ep(INTERNAL, 4001);
        let ext = n
            .add_port_mapping(internal, Some(4001), Duration::from_secs(10), t(0))
            .unwrap();
        assert_eq!(
            n.filter_inbound(ep(PEER_B, 1), ext, t(1)),
            InboundVerdict::Deliver(internal)
        );
        assert_eq!(
            n.filter_inbound(ep(PEER_B, 1), ext, t(10_000)),
            InboundVerdict::Drop(NatDrop::NoMapping)
        );
    }

    #[test]
    fn forwarded_socket_sends_from_forwarded_port() {
        let mut n = nat(NatConfig::new(
            MappingBehavior::AddressAndPortDependent,
            FilteringBehavior::AddressAndPortDependent,
        ));
        let internal = ep(INTERNAL, 4001);
        let ext = n
            .add_port_mapping(internal, Some(4001), Duration::from_secs(10), t(0))
            .unwrap();
        assert_eq!(n.translate_outbound(internal, ep(PEER_A, 80), t(1)).unwrap(), ext);
        assert_eq!(n.translate_outbound(internal, ep(PEER_B, 80), t(2)).unwrap(), ext);
        // Other sockets still get dynamic mappings.
        assert_ne!(
            n.translate_outbound(ep(INTERNAL, 5000), ep(PEER_A, 80), t(3)).unwrap(),
            ext
        );
        // Once the forward lapses the socket falls back to the mapping behavior.
        assert_ne!(n.translate_outbound(internal, ep(PEER_A, 80), t(10_000)).unwrap(), ext);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn mapping_strategy() -> impl Strategy<Value = MappingBehavior> {
            prop_oneof![
                Just(MappingBehavior::EndpointIndependent),
                Just(MappingBehavior::AddressDependent),
                Just(MappingBehavior::AddressAndPortDependent),
            ]
        }

        proptest! {
            #[test]
            fn eim_law(dsts in prop::collection::vec((0u32..8, 0u16..8), 1..40)) {
                let mut n = nat(NatConfig::new(MappingBehavior::EndpointIndependent, FilteringBehavior::EndpointIndependent));
                let src = ep(INTERNAL, 4001);
                let first = n.translate_outbound(src, ep(PEER_A + dsts[0].0, dsts[0].1), t(1)).unwrap();
                for (i, (a, p)) in dsts.iter().enumerate() {
                    let e = n.translate_outbound(src, ep(PEER_A + a, *p), t(2 + i as u64)).unwrap();
                    prop_assert_eq!(e, first);
                }
            }

            #[test]
            fn apdm_law(space in 8u32..64, seed in 0u64..1000) {
                let mut n = NatDevice::new(
                    NatConfig { mapping: MappingBehavior::AddressAndPortDependent, port_space: space, ..NatConfig::default() },
                    NAT_ADDR,
                    stream_rng(seed, 0, Stream::Device(1)),
                );
                let src = ep(INTERNAL, 4001);
                let mut ports = std::collections::HashSet::new();
                for i in 0..space + 4 {
                    match n.translate_outbound(src, ep(PEER_A, i as u16), t(1)) {
                        Ok(e) => {
                            prop_assert!((e.port as u32) < space);
                            prop_assert!(ports.insert(e.port));
                        }
                        Err(err) => {
                            prop_assert_eq!(err, NatError::PortExhausted);
                            prop_assert_eq!(ports.len() as u32, space);
                        }
                    }
                }
            }

            #[test]
            fn filtering_monotonicity(
                mapping in mapping_strategy(),
                sends in prop::collection::vec((0u32..3, 0u16..3), 1..6),
                inbound in (0u32..3, 0u16..3),
                seed in 0u64..100,
            ) {
                let mut verdicts = Vec::new();
                for filtering in [
                    FilteringBehavior::AddressAndPortDependent,
                    FilteringBehavior::AddressDependent,
                    FilteringBehavior::EndpointIndependent,
                ] {
                    let mut n = NatDevice::new(NatConfig::new(mapping, filtering), NAT_ADDR, stream_rng(seed, 0, Stream::Device(2)));
                    let src = ep(INTERNAL, 4001);
                    let mut externals = Vec::new();
                    for (a, p) in &sends {
                        externals.push(n.translate_outbound(src, ep(PEER_A + a, *p), t(1)).unwrap());
                    }
                    let target = externals[0];
                    verdicts.push(n.filter_inbound(ep(PEER_A + inbound.0, inbound.1), target, t(2)).is_deliver());
                }
                // APDF ⇒ ADF ⇒ EIF
                prop_assert!(!verdicts[0] || verdicts[1]);
                prop_assert!(!verdicts[1] || verdicts[2]);
            }

            #[test]
            fn denylist_absorbs(times in prop::collection::vec(1u64..200_000, 1..20)) {
                let mut n = nat(NatConfig {
                    denylist: DenylistPolicy { enabled: true, unsolicited_udp_triggers: true, ..DenylistPolicy::default() },
                    ..NatConfig::default()
                });
                let probe = Endpoint::new(NAT_ADDR, 1, Transport::Udp);
                n.filter_inbound(ep(PEER_A, 80), probe, t(0));
                let mut times = times;
                times.sort_unstable();
                let src = ep(INTERNAL, 4001);
                for ms in times {
                    let ext = n.translate_outbound(src, ep(PEER_A, 80), t(ms)).unwrap();
                    prop_assert_eq!(n.filter_inbound(ep(PEER_A, 80), ext, t(ms + 1)), InboundVerdict::Drop(NatDrop::Denylisted));
                }
            }
        }
    }
}
