//! Direct Connection Upgrade through Relay: relay registration, connection
//! reversal, the CONNECT/CONNECT exchange that doubles as the RTT probe,
//! SYNC with the initiator's wait timer, synchronized dialing with retries,
//! and the optional strategies layered on top (role alternation, refined
//! wait time, low-TTL priming, birthday probing).
//!
//! The measurement client is the listener; the remote peer is the initiator.

use std::collections::{BTreeSet, HashMap};
use std::time::Duration;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nat::{Endpoint, NatError, Transport};
use crate::netsim::{Engine, HostId, Occurrence, Packet, PacketKind, Topology, DEFAULT_TTL};
use crate::rng::SimRng;
use crate::time::SimTime;
use crate::transport::{
    birthday_punch, direct_dial, quic_hole_punch, tcp_simultaneous_open, ConnectionRecord, DialAttempt, PrimingConfig,
    Probe, PunchOutcome, QuicPunchConfig, Spray, TransportKind,
};

/// Port every peer listens and dials on.
pub const SOCKET_PORT: u16 = 4001;
/// First local port of the extra sockets used for birthday probing.
pub const SPRAY_BASE_PORT: u16 = 20_000;
/// Per-direction signaling allowance for one punch.
pub const SIGNAL_BUDGET: u64 = 500;

const NEGOTIATION_BYTES: u32 = 20;
const SYNC_BYTES: u32 = 4;
/// Binary multiaddr `/ip4/a.b.c.d/{tcp,udp}/port`.
const ADDR_BYTES: u32 = 8;
const PING_BYTES: u32 = 32;
const PING_TIMEOUT: Duration = Duration::from_secs(2);

const TAG_REGISTER: u64 = 0x1000;
const TAG_ATTEMPT: u64 = 0x2000;
const TAG_REVERSAL: u64 = 0x3000;
const TAG_PRIME: u64 = 0x4000;
const TAG_PING: u64 = 1 << 40;

const SIG_NEGOTIATE: u64 = 1;
const SIG_CONNECT: u64 = 2;
const SIG_SYNC: u64 = 3;
const SIG_PING: u64 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DcutrError {
    #[error("every RTT sample was lost")]
    AllSamplesLost,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nat(#[from] NatError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TransportFilter {
    Tcp,
    Quic,
    Any,
}

impl TransportFilter {
    pub fn admits(self, t: TransportKind) -> bool {
        match self {
            TransportFilter::Any => true,
            TransportFilter::Tcp => t == TransportKind::Tcp,
            TransportFilter::Quic => t == TransportKind::Quic,
        }
    }
}

/// Transport both peers support and the filter admits. `Any` prefers QUIC.
pub fn select_transport(
    filter: TransportFilter,
    a: &BTreeSet<TransportKind>,
    b: &BTreeSet<TransportKind>,
) -> Option<TransportKind> {
    [TransportKind::Quic, TransportKind::Tcp]
        .into_iter()
        .find(|t| filter.admits(*t) && a.contains(t) && b.contains(t))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SignalKind {
    Connect(Vec<Endpoint>),
    Sync,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignalMessage {
    pub kind: SignalKind,
    pub size: u32,
}

impl SignalMessage {
    /// `extra` carries optional fields such as the sender's RTT to its NAT.
    pub fn connect(addrs: Vec<Endpoint>, extra: u32) -> Self {
        let size = 4 + addrs.len() as u32 * (ADDR_BYTES + 2) + extra;
        SignalMessage {
            kind: SignalKind::Connect(addrs),
            size,
        }
    }

    pub fn sync() -> Self {
        SignalMessage {
            kind: SignalKind::Sync,
            size: SYNC_BYTES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PeerSpec {
    pub host: HostId,
    /// Directly dialable addresses: the public address of a public peer or
    /// the external side of its port mappings.
    pub advertised: Vec<Endpoint>,
    pub has_port_mapping: bool,
    pub transports: BTreeSet<TransportKind>,
    pub supports_dcutr: bool,
}

impl PeerSpec {
    pub fn new(host: HostId) -> Self {
        PeerSpec {
            host,
            advertised: Vec::new(),
            has_port_mapping: false,
            transports: [TransportKind::Tcp, TransportKind::Quic].into_iter().collect(),
            supports_dcutr: true,
        }
    }

    /// Peer description for `host` as attached in `topology`; public hosts
    /// advertise their own address.
    pub fn for_host(topology: &Topology, host: HostId) -> Self {
        let mut spec = PeerSpec::new(host);
        if topology.host(host).is_public() {
            let addr = topology.public_addr(host);
            spec.advertised = vec![
                Endpoint::new(addr, SOCKET_PORT, Transport::Tcp),
                Endpoint::new(addr, SOCKET_PORT, Transport::Udp),
            ];
        }
        spec
    }

    /// Installs port forwards for the peer's TCP and UDP sockets and
    /// advertises them.
    pub fn with_port_mapping(mut self, engine: &mut Engine, lifetime: Duration) -> Result<Self, DcutrError> {
        let internal = engine.topology().host(self.host).addr;
        let now = engine.now();
        let nat = engine
            .topology_mut()
            .nat_of_mut(self.host)
            .ok_or_else(|| DcutrError::Config("port mapping on a public host".into()))?;
        for t in [Transport::Tcp, Transport::Udp] {
            let ext = nat.add_port_mapping(Endpoint::new(internal, SOCKET_PORT, t), None, lifetime, now)?;
            self.advertised.push(ext);
        }
        self.has_port_mapping = true;
        Ok(self)
    }

    pub fn with_transports(mut self, transports: impl IntoIterator<Item = TransportKind>) -> Self {
        self.transports = transports.into_iter().collect();
        self
    }

    pub fn with_dcutr(mut self, supported: bool) -> Self {
        self.supports_dcutr = supported;
        self
    }

    pub fn validate(&self, topology: &Topology) -> Result<(), DcutrError> {
        if !topology.contains(self.host) {
            return Err(DcutrError::Config(format!("unknown host {}", self.host)));
        }
        let public = topology.host(self.host).is_public();
        if (public || self.has_port_mapping) && self.advertised.is_empty() {
            return Err(DcutrError::Config("dialable peer advertises no address".into()));
        }
        if !public && !self.has_port_mapping && !self.advertised.is_empty() {
            return Err(DcutrError::Config(
                "NATed peer without mapping advertises a direct address".into(),
            ));
        }
        Ok(())
    }

    fn socket(&self, topology: &Topology, t: Transport) -> Endpoint {
        Endpoint::new(topology.host(self.host).addr, SOCKET_PORT, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RttKind {
    ToRelay,
    ToRemoteThroughRelay,
    ToRemoteAfterHolepunch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RttStats {
    #[serde(rename = "mtype")]
    pub kind: RttKind,
    pub samples_us: Vec<u64>,
    pub mean_us: f64,
    /// Unbiased sample standard deviation; zero for a single sample.
    pub std_us: f64,
}

impl RttStats {
    pub fn from_samples(kind: RttKind, samples_us: Vec<u64>) -> Option<Self> {
        if samples_us.is_empty() {
            return None;
        }
        let n = samples_us.len() as f64;
        let mean = samples_us.iter().map(|s| *s as f64).sum::<f64>() / n;
        let std = if samples_us.len() > 1 {
            let ss: f64 = samples_us.iter().map(|s| (*s as f64 - mean).powi(2)).sum();
            (ss / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(RttStats {
            kind,
            samples_us,
            mean_us: mean,
            std_us: std,
        })
    }

    pub fn mean_ms(&self) -> f64 {
        self.mean_us / 1e3
    }

    pub fn std_ms(&self) -> f64 {
        self.std_us / 1e3
    }

    pub fn std_over_mean(&self) -> Option<f64> {
        (self.mean_us > 0.0).then(|| self.std_us / self.mean_us)
    }
}

/// Path an RTT measurement takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RttPath {
    /// Echo packets from `a`'s socket `local` to `remote`, the external
    /// endpoint of `b`.
    Direct { local: Endpoint, remote: Endpoint },
    /// Messages over the relayed channel.
    Relayed { relay: HostId },
}

/// Sequential echo round trips between `a` and `b`. Echoes not answered
/// within two seconds are counted as lost and left out.
pub fn measure_rtt(
    engine: &mut Engine,
    a: HostId,
    b: HostId,
    path: RttPath,
    kind: RttKind,
    sample_count: u32,
) -> Result<RttStats, DcutrError> {
    if !(1..=10).contains(&sample_count) {
        return Err(DcutrError::Config(format!(
            "sample count {sample_count} outside [1, 10]"
        )));
    }
    let mut samples = Vec::with_capacity(sample_count as usize);
    for i in 0..sample_count as u64 {
        let t0 = engine.now();
        match path {
            RttPath::Relayed { relay } => {
                let there = engine.send_signal(a, b, relay, SIG_PING, PING_BYTES);
                engine.run_until(there);
                let back = engine.send_signal(b, a, relay, SIG_PING, PING_BYTES);
                engine.run_until(back);
                samples.push(micros_between(t0, back));
            }
            RttPath::Direct { local, remote } => {
                let tag = TAG_PING + (t0.as_micros() << 4) + i;
                let ping = Packet::new(local, remote, PacketKind::Data)
                    .with_tag(tag)
                    .with_payload(PING_BYTES);
                if engine.send(a, ping).is_err() {
                    continue;
                }
                let deadline = t0 + PING_TIMEOUT;
                while let Some(occ) = engine.next_occurrence(deadline) {
                    let Occurrence::Delivered { host, packet } = occ else {
                        continue;
                    };
                    if packet.tag != tag || packet.kind != PacketKind::Data {
                        continue;
                    }
                    if host == b {
                        let echo = Packet::new(packet.dst, packet.src, PacketKind::Data)
                            .with_tag(tag)
                            .with_payload(PING_BYTES);
                        let _ = engine.send(b, echo);
                    } else if host == a && packet.dst == local {
                        samples.push(micros_between(t0, engine.now()));
                        break;
                    }
                }
            }
        }
    }
    RttStats::from_samples(kind, samples).ok_or(DcutrError::AllSamplesLost)
}

fn micros_between(from: SimTime, to: SimTime) -> u64 {
    to.since(from).as_micros() as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RefinedTiming {
    pub rtt_listener_initiator: Duration,
    pub rtt_listener_nat: Duration,
    pub rtt_initiator_nat: Duration,
}

/// The initiator's delay between sending SYNC and dialing: half the relayed
/// RTT, or with `refined` set, half of the RTT corrected by the two
/// host-to-NAT round trips (never negative).
pub fn compute_wait_time(t: &RefinedTiming, refined: bool) -> Duration {
    let rtt = t.rtt_listener_initiator.as_micros() as i128;
    let total = if refined {
        rtt + t.rtt_listener_nat.as_micros() as i128 - t.rtt_initiator_nat.as_micros() as i128
    } else {
        rtt
    };
    Duration::from_micros((total.max(0) / 2) as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BirthdayOptions {
    pub m_open: u32,
    pub k_probe: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PunchOptions {
    pub transport_filter: TransportFilter,
    pub max_attempts: u32,
    pub attempt_timeout_ms: u64,
    pub enable_reversal: bool,
    pub alternate_roles: bool,
    pub refined_rtt: bool,
    pub ttl_priming: bool,
    pub birthday: Option<BirthdayOptions>,
    /// Offsets of the opening packet's (re)transmissions within an attempt.
    pub retransmit_ms: Vec<u64>,
    pub rst_on_unexpected_syn: bool,
    pub priming_count: u32,
    pub priming_spacing_ms: u64,
    pub priming_payload: u32,
    /// TTL of priming packets when `ttl_priming` is on.
    pub priming_ttl: u32,
    pub probe_spacing_ms: u64,
    pub reversal_timeout_ms: u64,
    pub relay_timeout_ms: u64,
    /// Pings per dataset RTT measurement; zero skips them.
    pub rtt_samples: u32,
}

impl Default for PunchOptions {
    fn default() -> Self {
        PunchOptions {
            transport_filter: TransportFilter::Any,
            max_attempts: 3,
            attempt_timeout_ms: 15_000,
            enable_reversal: true,
            alternate_roles: false,
            refined_rtt: false,
            ttl_priming: false,
            birthday: None,
            retransmit_ms: vec![0, 1_000, 3_000],
            rst_on_unexpected_syn: true,
            priming_count: 5,
            priming_spacing_ms: 100,
            priming_payload: 64,
            priming_ttl: 3,
            probe_spacing_ms: 2,
            reversal_timeout_ms: 5_000,
            relay_timeout_ms: 15_000,
            rtt_samples: 10,
        }
    }
}

impl PunchOptions {
    pub fn validate(&self) -> Result<(), DcutrError> {
        let bad = |m: String| Err(DcutrError::Config(m));
        if self.max_attempts < 1 {
            return bad("max_attempts must be at least 1".into());
        }
        if let Some(b) = self.birthday {
            for (name, v) in [("m_open", b.m_open), ("k_probe", b.k_probe)] {
                if !(1..=65_536).contains(&v) {
                    return bad(format!("birthday {name} = {v} outside [1, 65536]"));
                }
            }
        }
        if self.retransmit_ms.is_empty() {
            return bad("retransmit schedule is empty".into());
        }
        if self.rtt_samples > 10 {
            return bad("at most 10 RTT samples".into());
        }
        if self.priming_ttl == 0 {
            return bad("priming TTL must be positive".into());
        }
        Ok(())
    }

    fn schedule(&self) -> Vec<Duration> {
        self.retransmit_ms.iter().map(|ms| Duration::from_millis(*ms)).collect()
    }

    fn attempt_timeout(&self) -> Duration {
        Duration::from_millis(self.attempt_timeout_ms)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Unknown,
    NoConnection,
    NoStream,
    ConnectionReversed,
    Cancelled,
    Failed,
    Success,
}

impl Outcome {
    pub const ALL: [Outcome; 7] = [
        Outcome::Unknown,
        Outcome::NoConnection,
        Outcome::NoStream,
        Outcome::ConnectionReversed,
        Outcome::Cancelled,
        Outcome::Failed,
        Outcome::Success,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Unknown => "UNKNOWN",
            Outcome::NoConnection => "NO_CONNECTION",
            Outcome::NoStream => "NO_STREAM",
            Outcome::ConnectionReversed => "CONNECTION_REVERSED",
            Outcome::Cancelled => "CANCELLED",
            Outcome::Failed => "FAILED",
            Outcome::Success => "SUCCESS",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AttemptOutcome {
    Unknown,
    DirectDial,
    ProtocolError,
    Cancelled,
    Timeout,
    Failed,
    Success,
}

impl AttemptOutcome {
    pub const ALL: [AttemptOutcome; 7] = [
        AttemptOutcome::Unknown,
        AttemptOutcome::DirectDial,
        AttemptOutcome::ProtocolError,
        AttemptOutcome::Cancelled,
        AttemptOutcome::Timeout,
        AttemptOutcome::Failed,
        AttemptOutcome::Success,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttemptOutcome::Unknown => "UNKNOWN",
            AttemptOutcome::DirectDial => "DIRECT_DIAL",
            AttemptOutcome::ProtocolError => "PROTOCOL_ERROR",
            AttemptOutcome::Cancelled => "CANCELLED",
            AttemptOutcome::Timeout => "TIMEOUT",
            AttemptOutcome::Failed => "FAILED",
            AttemptOutcome::Success => "SUCCESS",
        }
    }
}

/// Which side played which dialing part in an attempt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AttemptRoles {
    /// Listener dials on SYNC (QUIC client), initiator after its timer.
    Standard,
    /// QUIC client and primer swapped; timing unchanged.
    Alternated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PunchMethod {
    SimultaneousOpen,
    QuicPriming,
    Birthday,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolePunchAttempt {
    pub index: u32,
    pub outcome: AttemptOutcome,
    pub roles: AttemptRoles,
    pub method: PunchMethod,
    pub started_at: SimTime,
    pub ended_at: SimTime,
    /// Initiator's first packet leaving its NAT minus the listener's, in
    /// microseconds.
    pub timing_error_us: Option<i64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalBytes {
    pub initiator_to_listener: u64,
    pub listener_to_initiator: u64,
}

impl SignalBytes {
    pub fn max_direction(&self) -> u64 {
        self.initiator_to_listener.max(self.listener_to_initiator)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolePunchResult {
    pub client_id: String,
    pub remote_id: String,
    pub network_id: String,
    pub relay_id: String,
    pub client_nat: String,
    pub remote_nat: String,
    pub outcome: Outcome,
    pub attempts: Vec<HolePunchAttempt>,
    pub rtts: Vec<RttStats>,
    /// The client's port forwards in place when the punch started.
    pub port_mappings: Vec<Endpoint>,
    pub transport_filter: TransportFilter,
    pub transport_used: Option<TransportKind>,
    pub signal_bytes: SignalBytes,
    pub relay_closed: bool,
    pub error: Option<String>,
}

impl HolePunchResult {
    pub fn rtt(&self, kind: RttKind) -> Option<&RttStats> {
        self.rtts.iter().find(|r| r.kind == kind)
    }

    /// Index of the successful attempt, if any.
    pub fn success_attempt(&self) -> Option<u32> {
        self.attempts
            .iter()
            .find(|a| a.outcome == AttemptOutcome::Success)
            .map(|a| a.index)
    }

    pub fn has_port_mapping(&self) -> bool {
        !self.port_mappings.is_empty()
    }
}

/// Facts about a finished punch that decide its outcome.
#[derive(Clone, Copy, Debug, Default)]
pub struct PunchTrace<'a> {
    pub cancelled: bool,
    pub config_error: bool,
    pub relayed: bool,
    pub stream_opened: bool,
    pub direct: bool,
    pub attempts: &'a [HolePunchAttempt],
}

pub fn classify_outcome(trace: &PunchTrace<'_>) -> Outcome {
    if trace.cancelled {
        return Outcome::Cancelled;
    }
    if trace.config_error {
        return Outcome::Unknown;
    }
    if !trace.relayed {
        return Outcome::NoConnection;
    }
    if trace.attempts.iter().any(|a| a.outcome == AttemptOutcome::Success) {
        return Outcome::Success;
    }
    if !trace.stream_opened {
        return if trace.direct {
            Outcome::ConnectionReversed
        } else {
            Outcome::NoStream
        };
    }
    if trace.attempts.is_empty() {
        Outcome::Unknown
    } else {
        Outcome::Failed
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Reversal {
    Established(ConnectionRecord),
    NotDialable,
}

/// Step 0: the initiator dials the listener's directly dialable addresses.
pub fn try_connection_reversal(
    engine: &mut Engine,
    initiator: &PeerSpec,
    listener_advertised: &[Endpoint],
    transport: TransportKind,
    opts: &PunchOptions,
) -> Reversal {
    let local = initiator.socket(engine.topology(), transport.l4());
    for (j, target) in listener_advertised
        .iter()
        .filter(|e| e.transport == transport.l4())
        .enumerate()
    {
        let start = engine.now();
        let mut dial = DialAttempt::new(initiator.host, local, *target, transport, start)
            .with_schedule(opts.schedule())
            .with_tag(TAG_REVERSAL + j as u64);
        let out = direct_dial(
            engine,
            &mut dial,
            start + Duration::from_millis(opts.reversal_timeout_ms),
        );
        if let Some(conn) = out.established() {
            return Reversal::Established(conn.clone());
        }
    }
    Reversal::NotDialable
}

/// Registers both peers' sockets with the relay. Returns the external
/// endpoint the relay observed for each, or `None` if it never answered.
fn register_with_relay(
    engine: &mut Engine,
    peers: [(HostId, Endpoint); 2],
    relay: HostId,
    schedule: &[Duration],
    timeout: Duration,
) -> [Option<Endpoint>; 2] {
    let relay_addr = engine.topology().public_addr(relay);
    let start = engine.now();
    let mut timers: HashMap<u64, usize> = HashMap::new();
    for (i, (host, _)) in peers.iter().enumerate() {
        for off in schedule {
            timers.insert(engine.set_timer(*host, start + *off), i);
        }
    }
    let mut observed: [Option<Endpoint>; 2] = [None, None];
    let mut done = [false, false];
    while let Some(occ) = engine.next_occurrence(start + timeout) {
        match occ {
            Occurrence::Timer { token, .. } => {
                if let Some(&i) = timers.get(&token) {
                    if !done[i] {
                        let (host, local) = peers[i];
                        let relay_ep = Endpoint::new(relay_addr, SOCKET_PORT, local.transport);
                        let p = Packet::new(local, relay_ep, PacketKind::Data).with_tag(TAG_REGISTER + i as u64);
                        let _ = engine.send(host, p);
                    }
                }
            }
            Occurrence::Delivered { host, packet } if packet.kind == PacketKind::Data => {
                let Some(i) = packet
                    .tag
                    .checked_sub(TAG_REGISTER)
                    .filter(|i| *i < 2)
                    .map(|i| i as usize)
                else {
                    continue;
                };
                if host == relay {
                    observed[i] = Some(packet.src);
                    let reply = Packet::new(packet.dst, packet.src, PacketKind::Data).with_tag(packet.tag);
                    let _ = engine.send(relay, reply);
                } else if host == peers[i].0 && packet.dst == peers[i].1 {
                    done[i] = true;
                    if done.iter().all(|d| *d) {
                        break;
                    }
                }
            }
            _ => {}
        }
    }
    [0, 1].map(|i| observed[i].filter(|_| done[i]))
}

/// Mapping/filtering label of a host's NAT, or `public`.
pub fn nat_label(topology: &Topology, host: HostId) -> String {
    match topology.nat_of(host) {
        None => "public".to_string(),
        Some(nat) => format!("{}/{}", nat.config().mapping.label(), nat.config().filtering.label()),
    }
}

fn is_edm(topology: &Topology, host: HostId) -> bool {
    topology
        .nat_of(host)
        .is_some_and(|n| n.config().mapping.is_endpoint_dependent())
}

fn port_space(topology: &Topology, host: HostId) -> u32 {
    topology.nat_of(host).map(|n| n.config().port_space).unwrap_or(65_536)
}

fn spray_port(i: u32) -> u16 {
    (SPRAY_BASE_PORT as u32).wrapping_add(i) as u16
}

struct Signaler {
    initiator: HostId,
    listener: HostId,
    relay: HostId,
    bytes: SignalBytes,
}

impl Signaler {
    fn send_to_listener(&mut self, engine: &mut Engine, tag: u64, bytes: u32) -> SimTime {
        self.bytes.initiator_to_listener += bytes as u64;
        engine.send_signal(self.initiator, self.listener, self.relay, tag, bytes)
    }

    fn send_to_initiator(&mut self, engine: &mut Engine, tag: u64, bytes: u32) -> SimTime {
        self.bytes.listener_to_initiator += bytes as u64;
        engine.send_signal(self.listener, self.initiator, self.relay, tag, bytes)
    }
}

/// Runs one DCUtR exchange between `initiator` and `listener` (the client)
/// over `relay`. `rng` drives the birthday probe order.
pub fn run_hole_punch(
    engine: &mut Engine,
    initiator: &PeerSpec,
    listener: &PeerSpec,
    relay: HostId,
    opts: &PunchOptions,
    rng: &mut SimRng,
) -> HolePunchResult {
    let topo = engine.topology();
    let mut result = HolePunchResult {
        client_id: topo.host(listener.host).name.clone(),
        remote_id: topo.host(initiator.host).name.clone(),
        network_id: String::new(),
        relay_id: topo.host(relay).name.clone(),
        client_nat: nat_label(topo, listener.host),
        remote_nat: nat_label(topo, initiator.host),
        outcome: Outcome::Unknown,
        attempts: Vec::new(),
        rtts: Vec::new(),
        port_mappings: if listener.has_port_mapping {
            listener.advertised.clone()
        } else {
            Vec::new()
        },
        transport_filter: opts.transport_filter,
        transport_used: None,
        signal_bytes: SignalBytes::default(),
        relay_closed: false,
        error: None,
    };
    let mut trace = PunchTrace::default();

    let config = opts
        .validate()
        .and_then(|_| initiator.validate(topo))
        .and_then(|_| listener.validate(topo))
        .and_then(|_| {
            select_transport(opts.transport_filter, &initiator.transports, &listener.transports)
                .ok_or_else(|| DcutrError::Config("no transport supported by both peers passes the filter".into()))
        });
    let kind = match config {
        Ok(kind) => kind,
        Err(e) => {
            result.error = Some(e.to_string());
            trace.config_error = true;
            result.outcome = classify_outcome(&trace);
            return result;
        }
    };
    let l4 = kind.l4();
    let i_sock = initiator.socket(topo, l4);
    let l_sock = listener.socket(topo, l4);

    // Relayed connection: both peers reach the relay, which tells each its
    // observed address.
    let observed = register_with_relay(
        engine,
        [(initiator.host, i_sock), (listener.host, l_sock)],
        relay,
        &opts.schedule(),
        Duration::from_millis(opts.relay_timeout_ms),
    );
    let (Some(i_obs), Some(l_obs)) = (observed[0], observed[1]) else {
        result.outcome = classify_outcome(&trace);
        return result;
    };
    trace.relayed = true;

    if opts.rtt_samples > 0 {
        let relay_ep = Endpoint::new(engine.topology().public_addr(relay), SOCKET_PORT, l4);
        let to_relay = RttPath::Direct {
            local: l_sock,
            remote: relay_ep,
        };
        if let Ok(s) = measure_rtt(
            engine,
            listener.host,
            relay,
            to_relay,
            RttKind::ToRelay,
            opts.rtt_samples,
        ) {
            result.rtts.push(s);
        }
        let via = RttPath::Relayed { relay };
        if let Ok(s) = measure_rtt(
            engine,
            listener.host,
            initiator.host,
            via,
            RttKind::ToRemoteThroughRelay,
            opts.rtt_samples,
        ) {
            result.rtts.push(s);
        }
    }

    if opts.enable_reversal && !listener.advertised.is_empty() {
        if let Reversal::Established(_) = try_connection_reversal(engine, initiator, &listener.advertised, kind, opts) {
            trace.direct = true;
            result.transport_used = Some(kind);
            result.relay_closed = true;
            result.outcome = classify_outcome(&trace);
            return result;
        }
    }

    if !(initiator.supports_dcutr && listener.supports_dcutr) {
        result.outcome = classify_outcome(&trace);
        return result;
    }
    trace.stream_opened = true;
    result.transport_used = Some(kind);

    let mut sig = Signaler {
        initiator: initiator.host,
        listener: listener.host,
        relay,
        bytes: SignalBytes::default(),
    };
    let candidates = |obs: Endpoint, spec: &PeerSpec| {
        let mut v = vec![obs];
        v.extend(spec.advertised.iter().copied().filter(|e| *e != obs));
        v
    };
    let i_addrs = candidates(i_obs, initiator);
    let l_addrs = candidates(l_obs, listener);
    // The listener's CONNECT carries its RTT to its NAT when refined timing
    // is in use.
    let refined_extra = if opts.refined_rtt { 4 } else { 0 };

    // CONNECT from the initiator, CONNECT back; the round trip is the RTT.
    let t0 = engine.now();
    sig.send_to_listener(engine, SIG_NEGOTIATE, NEGOTIATION_BYTES);
    let t1 = sig.send_to_listener(engine, SIG_CONNECT, SignalMessage::connect(i_addrs.clone(), 0).size);
    engine.run_until(t1);
    sig.send_to_initiator(engine, SIG_NEGOTIATE, NEGOTIATION_BYTES);
    if opts.ttl_priming {
        for target in i_addrs.iter().filter(|e| e.transport == l4) {
            send_prime(engine, listener.host, l_sock, *target, kind, opts.priming_ttl);
        }
    }
    let t2 = sig.send_to_initiator(
        engine,
        SIG_CONNECT,
        SignalMessage::connect(l_addrs.clone(), refined_extra).size,
    );
    engine.run_until(t2);
    let rtt = t2.since(t0);
    let timing = RefinedTiming {
        rtt_listener_initiator: rtt,
        rtt_listener_nat: engine.topology().local_rtt(listener.host),
        rtt_initiator_nat: engine.topology().local_rtt(initiator.host),
    };
    let wait = compute_wait_time(&timing, opts.refined_rtt);
    let i_target = l_addrs[0];
    let l_target = i_addrs[0];

    for index in 1..=opts.max_attempts {
        let alternated = opts.alternate_roles && index % 2 == 0;
        let ts = engine.now();
        let ta = sig.send_to_listener(engine, SIG_SYNC, SignalMessage::sync().size);
        let i_start = ts + wait;
        let l_start = ta;
        if index == 1 && opts.ttl_priming {
            // Keep priming from the listener's CONNECT until the timer fires.
            let mut t = t2;
            while t < i_start {
                let p = prime_packet(i_sock, l_target_for_prime(&l_addrs, l4), kind, opts.priming_ttl);
                let _ = engine.send_at(initiator.host, p, t);
                t += Duration::from_millis(100);
            }
        }
        let timeout = opts.attempt_timeout();
        if ta > ts + timeout {
            engine.run_until(ts + timeout);
            result.attempts.push(HolePunchAttempt {
                index,
                outcome: AttemptOutcome::Timeout,
                roles: if alternated {
                    AttemptRoles::Alternated
                } else {
                    AttemptRoles::Standard
                },
                method: PunchMethod::SimultaneousOpen,
                started_at: ts,
                ended_at: engine.now(),
                timing_error_us: None,
            });
            continue;
        }
        let deadline = i_start.max(l_start) + timeout;
        let tag = TAG_ATTEMPT + index as u64;
        let birthday = opts
            .birthday
            .filter(|_| is_edm(engine.topology(), initiator.host) || is_edm(engine.topology(), listener.host));

        let (method, out, order_swapped) = if let Some(b) = birthday {
            let (i_spray, l_spray) = birthday_sprays(
                engine.topology(),
                rng,
                b,
                opts,
                (initiator.host, i_sock, i_target, i_start),
                (listener.host, l_sock, l_target, l_start),
            );
            let out = birthday_punch(engine, &i_spray, &l_spray, kind, tag, deadline);
            (PunchMethod::Birthday, out, false)
        } else {
            let mut ia = DialAttempt::new(initiator.host, i_sock, i_target, kind, i_start)
                .with_schedule(opts.schedule())
                .with_rst_on_unexpected_syn(opts.rst_on_unexpected_syn)
                .with_tag(tag);
            let mut la = DialAttempt::new(listener.host, l_sock, l_target, kind, l_start)
                .with_schedule(opts.schedule())
                .with_rst_on_unexpected_syn(opts.rst_on_unexpected_syn)
                .with_tag(tag);
            match kind {
                TransportKind::Tcp => (
                    PunchMethod::SimultaneousOpen,
                    tcp_simultaneous_open(engine, &mut ia, &mut la, deadline),
                    false,
                ),
                TransportKind::Quic => {
                    let cfg = QuicPunchConfig {
                        priming: PrimingConfig {
                            count: opts.priming_count,
                            spacing: Duration::from_millis(opts.priming_spacing_ms),
                            payload: opts.priming_payload,
                            ttl: if opts.ttl_priming {
                                opts.priming_ttl
                            } else {
                                DEFAULT_TTL
                            },
                        },
                        primer_sends_hello: false,
                        preferred_client: Some(listener.host),
                    };
                    if alternated {
                        (
                            PunchMethod::QuicPriming,
                            quic_hole_punch(engine, &mut la, &mut ia, &cfg, deadline),
                            true,
                        )
                    } else {
                        (
                            PunchMethod::QuicPriming,
                            quic_hole_punch(engine, &mut ia, &mut la, &cfg, deadline),
                            false,
                        )
                    }
                }
            }
        };
        let success = out.succeeded();
        let timing_error_us = timing_error(engine, &out, order_swapped);
        result.attempts.push(HolePunchAttempt {
            index,
            outcome: if success {
                AttemptOutcome::Success
            } else {
                AttemptOutcome::Failed
            },
            roles: if alternated {
                AttemptRoles::Alternated
            } else {
                AttemptRoles::Standard
            },
            method,
            started_at: ts,
            ended_at: engine.now(),
            timing_error_us,
        });
        if let Some(conn) = out.established() {
            trace.direct = true;
            result.relay_closed = true;
            if opts.rtt_samples > 0 {
                if let (Some(local), Some(remote)) = (conn.local_of(listener.host), conn.remote_of(listener.host)) {
                    let path = RttPath::Direct { local, remote };
                    if let Ok(s) = measure_rtt(
                        engine,
                        listener.host,
                        initiator.host,
                        path,
                        RttKind::ToRemoteAfterHolepunch,
                        opts.rtt_samples,
                    ) {
                        result.rtts.push(s);
                    }
                }
            }
            break;
        }
    }

    trace.attempts = &result.attempts;
    let outcome = classify_outcome(&trace);
    result.outcome = outcome;
    result.signal_bytes = sig.bytes;
    result
}

fn l_target_for_prime(l_addrs: &[Endpoint], l4: Transport) -> Endpoint {
    l_addrs
        .iter()
        .copied()
        .find(|e| e.transport == l4)
        .unwrap_or(l_addrs[0])
}

fn prime_packet(local: Endpoint, target: Endpoint, kind: TransportKind, ttl: u32) -> Packet {
    let pk = match kind {
        TransportKind::Tcp => PacketKind::Syn,
        TransportKind::Quic => PacketKind::UdpDatagram,
    };
    Packet::new(local, target, pk).with_ttl(ttl).with_tag(TAG_PRIME)
}

fn send_prime(engine: &mut Engine, host: HostId, local: Endpoint, target: Endpoint, kind: TransportKind, ttl: u32) {
    let _ = engine.send(host, prime_packet(local, target, kind, ttl));
}

/// Initiator-minus-listener egress difference. `swapped` means the punch
/// routine saw the listener first.
fn timing_error(engine: &Engine, out: &PunchOutcome, swapped: bool) -> Option<i64> {
    let e = out.timing_error_us(engine)?;
    // timing_error_us is second minus first.
    Some(if swapped { e } else { -e })
}

type SideInfo = (HostId, Endpoint, Endpoint, SimTime);

/// Packets each side sends in a birthday attempt. With one
/// endpoint-dependent side, that side opens `m` sockets toward the other's
/// advertised endpoint and the other probes `k` distinct ports. With both
/// endpoint-dependent, the initiator opens `m` sockets toward random ports
/// and the listener probes from `k` sockets.
fn birthday_sprays(
    topology: &Topology,
    rng: &mut SimRng,
    b: BirthdayOptions,
    opts: &PunchOptions,
    initiator: SideInfo,
    listener: SideInfo,
) -> (Spray, Spray) {
    let spacing = Duration::from_millis(opts.probe_spacing_ms);
    let (i_host, i_sock, i_target, i_start) = initiator;
    let (l_host, l_sock, l_target, l_start) = listener;
    let i_edm = is_edm(topology, i_host);
    let l_edm = is_edm(topology, l_host);
    // Both endpoint-dependent: the initiator aims its sockets at random
    // ports of the listener's NAT.
    let blind_ports = (i_edm && l_edm).then(|| {
        let n = port_space(topology, l_host) as usize;
        index::sample(rng, n, (b.m_open as usize).min(n))
    });
    let open = |host: HostId, sock: Endpoint, target: Endpoint, at: SimTime, m: u32| Spray {
        host,
        probes: (0..m)
            .map(|j| Probe {
                local: Endpoint::new(sock.addr, spray_port(j), sock.transport),
                target,
                at,
            })
            .collect(),
    };
    let mut probe =
        |host: HostId, sock: Endpoint, toward: Endpoint, n_space: u32, at: SimTime, k: u32, fan_out: bool| {
            let ports = index::sample(rng, n_space as usize, (k as usize).min(n_space as usize));
            Spray {
                host,
                probes: ports
                    .into_iter()
                    .enumerate()
                    .map(|(j, port)| Probe {
                        local: if fan_out {
                            Endpoint::new(sock.addr, spray_port(j as u32), sock.transport)
                        } else {
                            sock
                        },
                        target: Endpoint::new(toward.addr, port as u16, toward.transport),
                        at: at + spacing * j as u32,
                    })
                    .collect(),
            }
        };
    match (i_edm, l_edm) {
        (true, false) => {
            let opens = open(i_host, i_sock, i_target, i_start, b.m_open);
            let probes = probe(
                l_host,
                l_sock,
                l_target,
                port_space(topology, i_host),
                l_start,
                b.k_probe,
                false,
            );
            (opens, probes)
        }
        (false, true) => {
            let opens = open(l_host, l_sock, l_target, l_start, b.m_open);
            let probes = probe(
                i_host,
                i_sock,
                i_target,
                port_space(topology, l_host),
                i_start,
                b.k_probe,
                false,
            );
            (probes, opens)
        }
        _ => {
            // Every packet leaves from its own socket.
            let opens = {
                let ports = blind_ports.expect("both sides endpoint-dependent");
                Spray {
                    host: i_host,
                    probes: ports
                        .into_iter()
                        .enumerate()
                        .map(|(j, port)| Probe {
                            local: Endpoint::new(i_sock.addr, spray_port(j as u32), i_sock.transport),
                            target: Endpoint::new(i_target.addr, port as u16, i_target.transport),
                            at: i_start,
                        })
                        .collect(),
                }
            };
            let probes = probe(
                l_host,
                l_sock,
                l_target,
                port_space(topology, i_host),
                l_start,
                b.k_probe,
                true,
            );
            (opens, probes)
        }
    }
}

#[cfg(test)]
mod tests;
