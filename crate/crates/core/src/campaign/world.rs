//! Three-host worlds: listener (the measurement client), initiator (the
//! remote peer) and a public relay.

use std::collections::BTreeSet;
use std::time::Duration;

use crate::dcutr::{DcutrError, PeerSpec};
use crate::nat::{HostAddr, NatConfig, NatDevice};
use crate::netsim::{Engine, HostId, LinkModel, Topology, TopologyError, DEFAULT_CORE_HOPS, DEFAULT_LOCAL_HOPS};
use crate::rng::{stream_rng, Stream};
use crate::transport::TransportKind;

pub const LISTENER_INTERNAL: HostAddr = HostAddr(0x0A00_0002);
pub const INITIATOR_INTERNAL: HostAddr = HostAddr(0x0A01_0002);
pub const LISTENER_EXTERNAL: HostAddr = HostAddr(0xCB00_7101);
pub const INITIATOR_EXTERNAL: HostAddr = HostAddr(0xC633_6401);
pub const RELAY_ADDR: HostAddr = HostAddr(0xC000_0201);

#[derive(Clone, Debug, PartialEq)]
pub struct PeerSetup {
    /// `None` puts the peer directly on the public network.
    pub nat: Option<NatConfig>,
    /// Host ↔ NAT segment, forward being host → NAT. Unused for public peers.
    pub local: LinkModel,
    pub port_mapping: bool,
    pub transports: BTreeSet<TransportKind>,
    pub supports_dcutr: bool,
}

impl PeerSetup {
    pub fn behind(nat: NatConfig, local_one_way: Duration) -> Self {
        PeerSetup {
            nat: Some(nat),
            local: LinkModel::constant(local_one_way, DEFAULT_LOCAL_HOPS),
            port_mapping: false,
            transports: [TransportKind::Tcp, TransportKind::Quic].into_iter().collect(),
            supports_dcutr: true,
        }
    }

    pub fn public() -> Self {
        PeerSetup {
            nat: None,
            ..PeerSetup::behind(NatConfig::default(), Duration::ZERO)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSetup {
    pub listener: PeerSetup,
    pub initiator: PeerSetup,
    /// Forward is initiator → listener.
    pub core: LinkModel,
    /// Forward is listener → relay; `None` leaves the listener unable to
    /// reach the relay.
    pub relay_listener: Option<LinkModel>,
    /// Forward is initiator → relay.
    pub relay_initiator: Option<LinkModel>,
    pub port_mapping_lifetime: Duration,
}

impl PairSetup {
    /// Constant symmetric links: `core` between the NATs, `relay_legs` from
    /// each NAT to the relay (listener first).
    pub fn simple(listener: PeerSetup, initiator: PeerSetup, core: Duration, relay_legs: [Duration; 2]) -> Self {
        PairSetup {
            listener,
            initiator,
            core: LinkModel::constant(core, DEFAULT_CORE_HOPS),
            relay_listener: Some(LinkModel::constant(relay_legs[0], DEFAULT_CORE_HOPS)),
            relay_initiator: Some(LinkModel::constant(relay_legs[1], DEFAULT_CORE_HOPS)),
            port_mapping_lifetime: Duration::from_secs(3600),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HostNames {
    pub listener: String,
    pub initiator: String,
    pub relay: String,
}

impl Default for HostNames {
    fn default() -> Self {
        HostNames {
            listener: "listener".into(),
            initiator: "initiator".into(),
            relay: "relay".into(),
        }
    }
}

pub struct World {
    pub engine: Engine,
    pub listener: PeerSpec,
    pub initiator: PeerSpec,
    pub relay: HostId,
}

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Peer(#[from] DcutrError),
}

#[allow(clippy::too_many_arguments)]
fn add_peer(
    topo: &mut Topology,
    name: &str,
    setup: &PeerSetup,
    internal: HostAddr,
    external: HostAddr,
    device: u32,
    seed: u64,
    trial: u64,
) -> Result<HostId, TopologyError> {
    match setup.nat {
        None => topo.add_public_host(name, external),
        Some(cfg) => {
            let nat = NatDevice::new(cfg, external, stream_rng(seed, trial, Stream::Device(device)));
            topo.add_nated_host(name, internal, nat, setup.local)
        }
    }
}

/// Builds the topology and engine for one trial. NAT allocators and the
/// engine draw from streams of `(seed, trial)`.
pub fn build_world(setup: &PairSetup, names: &HostNames, seed: u64, trial: u64) -> Result<World, WorldError> {
    let mut topo = Topology::new();
    let l = add_peer(
        &mut topo,
        &names.listener,
        &setup.listener,
        LISTENER_INTERNAL,
        LISTENER_EXTERNAL,
        0,
        seed,
        trial,
    )?;
    let i = add_peer(
        &mut topo,
        &names.initiator,
        &setup.initiator,
        INITIATOR_INTERNAL,
        INITIATOR_EXTERNAL,
        1,
        seed,
        trial,
    )?;
    let relay = topo.add_public_host(&names.relay, RELAY_ADDR)?;
    topo.connect(i, l, setup.core)?;
    if let Some(link) = setup.relay_listener {
        topo.connect(l, relay, link)?;
    }
    if let Some(link) = setup.relay_initiator {
        topo.connect(i, relay, link)?;
    }
    let mut engine = Engine::new(topo, stream_rng(seed, trial, Stream::Engine));

    let peer = |engine: &mut Engine, host: HostId, s: &PeerSetup| -> Result<PeerSpec, DcutrError> {
        let mut spec = PeerSpec::for_host(engine.topology(), host)
            .with_transports(s.transports.iter().copied())
            .with_dcutr(s.supports_dcutr);
        if s.port_mapping && s.nat.is_some() {
            spec = spec.with_port_mapping(engine, setup.port_mapping_lifetime)?;
        }
        Ok(spec)
    };
    let listener = peer(&mut engine, l, &setup.listener)?;
    let initiator = peer(&mut engine, i, &setup.initiator)?;
    Ok(World {
        engine,
        listener,
        initiator,
        relay,
    })
}
