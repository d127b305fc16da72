//! Connection establishment on top of the event engine: TCP simultaneous
//! open, QUIC punching with dummy-datagram priming, plain direct dials, and
//! birthday-style port spraying.
//!
//! Every routine owns the engine loop for the duration of one attempt. It
//! only reacts to packets carrying the attempt's tag; anything else that is
//! still in flight (stale retransmissions, pings) is routed normally by the
//! engine and ignored here.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::nat::{Endpoint, NatDrop, Transport};
use crate::netsim::{DropReason, Engine, HostId, Occurrence, Packet, PacketKind, TraceId, DEFAULT_TTL};
use crate::time::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TransportKind {
    Tcp,
    Quic,
}

impl TransportKind {
    /// Layer-4 protocol the transport runs over.
    pub fn l4(self) -> Transport {
        match self {
            TransportKind::Tcp => Transport::Tcp,
            TransportKind::Quic => Transport::Udp,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TransportKind::Tcp => "TCP",
            TransportKind::Quic => "QUIC",
        }
    }

    fn request_kind(self) -> PacketKind {
        match self {
            TransportKind::Tcp => PacketKind::Syn,
            TransportKind::Quic => PacketKind::QuicHello,
        }
    }

    fn reply_kind(self) -> PacketKind {
        match self {
            TransportKind::Tcp => PacketKind::SynAck,
            TransportKind::Quic => PacketKind::QuicHelloReply,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Client,
    Server,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DialResult {
    Established(Role),
    TimedOut,
    ResetReceived,
    Denylisted,
}

impl DialResult {
    pub fn is_established(self) -> bool {
        matches!(self, DialResult::Established(_))
    }
}

pub fn default_retransmit_schedule() -> Vec<Duration> {
    vec![Duration::ZERO, Duration::from_secs(1), Duration::from_secs(3)]
}

/// One side's dial within an attempt.
#[derive(Clone, Debug)]
pub struct DialAttempt {
    pub dialer: HostId,
    /// Internal socket the dial is issued from.
    pub local: Endpoint,
    pub target: Endpoint,
    pub transport: TransportKind,
    pub start_time: SimTime,
    /// Offsets from `start_time` at which the opening packet is (re)sent.
    pub syn_retransmit_schedule: Vec<Duration>,
    /// Stack behavior of the dialing host when a SYN arrives that matches no
    /// half-open connection.
    pub rst_on_unexpected_syn: bool,
    pub tag: u64,
    result: Option<DialResult>,
}

impl DialAttempt {
    pub fn new(
        dialer: HostId,
        local: Endpoint,
        target: Endpoint,
        transport: TransportKind,
        start_time: SimTime,
    ) -> Self {
        debug_assert_eq!(local.transport, transport.l4());
        debug_assert_eq!(target.transport, transport.l4());
        DialAttempt {
            dialer,
            local,
            target,
            transport,
            start_time,
            syn_retransmit_schedule: default_retransmit_schedule(),
            rst_on_unexpected_syn: true,
            tag: 0,
            result: None,
        }
    }

    pub fn with_schedule(mut self, schedule: Vec<Duration>) -> Self {
        self.syn_retransmit_schedule = schedule;
        self
    }

    pub fn with_tag(mut self, tag: u64) -> Self {
        self.tag = tag;
        self
    }

    pub fn with_rst_on_unexpected_syn(mut self, rst: bool) -> Self {
        self.rst_on_unexpected_syn = rst;
        self
    }

    pub fn result(&self) -> Option<DialResult> {
        self.result
    }

    fn settle(&mut self, result: DialResult) {
        assert!(self.result.is_none(), "dial result set twice");
        self.result = Some(result);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PathKind {
    Relayed,
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectionRecord {
    pub peers: [HostId; 2],
    pub transport: TransportKind,
    pub established_at: SimTime,
    pub path: PathKind,
    pub client_side: HostId,
    /// Internal socket each peer uses on this connection.
    pub local: [Endpoint; 2],
    /// External endpoint each peer sends to.
    pub remote: [Endpoint; 2],
    /// A second QUIC connection kept only for completeness.
    pub redundant: bool,
}

impl ConnectionRecord {
    fn side(&self, host: HostId) -> Option<usize> {
        self.peers.iter().position(|p| *p == host)
    }

    pub fn local_of(&self, host: HostId) -> Option<Endpoint> {
        self.side(host).map(|i| self.local[i])
    }

    pub fn remote_of(&self, host: HostId) -> Option<Endpoint> {
        self.side(host).map(|i| self.remote[i])
    }
}

/// What one punching routine produced. `results` and `first_packets` are
/// in the order the two sides were passed in.
#[derive(Clone, Debug, PartialEq)]
pub struct PunchOutcome {
    pub results: [DialResult; 2],
    pub connections: Vec<ConnectionRecord>,
    /// Trace id of each side's first packet, for timing-error measurement.
    pub first_packets: [Option<TraceId>; 2],
}

impl PunchOutcome {
    pub fn established(&self) -> Option<&ConnectionRecord> {
        self.connections.iter().find(|c| !c.redundant)
    }

    pub fn succeeded(&self) -> bool {
        self.established().is_some()
    }

    /// Signed difference between the instants the two first packets left
    /// their NATs (second side minus first side), in microseconds.
    pub fn timing_error_us(&self, engine: &Engine) -> Option<i64> {
        let a = engine.egress_of(self.first_packets[0]?)?.0;
        let b = engine.egress_of(self.first_packets[1]?)?.0;
        Some(b.signed_diff(a))
    }
}

fn drive(engine: &mut Engine, deadline: SimTime, mut on: impl FnMut(&mut Engine, Occurrence) -> bool) {
    while let Some(occ) = engine.next_occurrence(deadline) {
        if on(engine, occ) {
            return;
        }
    }
}

/// Sends now; a packet that cannot be routed is simply never sent.
fn emit(engine: &mut Engine, host: HostId, packet: Packet) -> Option<TraceId> {
    engine.send(host, packet).ok()
}

fn denylisted_drop(reason: &DropReason) -> bool {
    matches!(reason, DropReason::Nat(NatDrop::Denylisted))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TcpState {
    Idle,
    SynSent,
    SynRcvd,
    Established,
    Reset,
}

struct TcpSide {
    host: HostId,
    local: Endpoint,
    target: Endpoint,
    tag: u64,
    rst_on_unexpected_syn: bool,
    state: TcpState,
    established_at: Option<SimTime>,
    denylisted: bool,
    first: Option<TraceId>,
}

impl TcpSide {
    fn new(a: &DialAttempt) -> Self {
        TcpSide {
            host: a.dialer,
            local: a.local,
            target: a.target,
            tag: a.tag,
            rst_on_unexpected_syn: a.rst_on_unexpected_syn,
            state: TcpState::Idle,
            established_at: None,
            denylisted: false,
            first: None,
        }
    }

    fn send(&mut self, engine: &mut Engine, kind: PacketKind) {
        let p = Packet::new(self.local, self.target, kind).with_tag(self.tag);
        let id = emit(engine, self.host, p);
        if self.first.is_none() {
            self.first = id;
        }
    }

    fn establish(&mut self, now: SimTime) {
        self.state = TcpState::Established;
        self.established_at.get_or_insert(now);
    }

    fn settled(&self) -> bool {
        self.denylisted || matches!(self.state, TcpState::Established | TcpState::Reset)
    }
}

/// TCP simultaneous open between two dials aimed at each other's external
/// endpoints.
///
/// A host only accepts segments on the exact 4-tuple it dialed. A SYN that
/// matches no half-open connection is answered with RST when the receiving
/// dial's `rst_on_unexpected_syn` is set and ignored otherwise. The result is
/// symmetric: unless both sides reach Established by `deadline`, neither is
/// reported as established.
pub fn tcp_simultaneous_open(
    engine: &mut Engine,
    a: &mut DialAttempt,
    b: &mut DialAttempt,
    deadline: SimTime,
) -> PunchOutcome {
    assert_eq!(a.transport, TransportKind::Tcp);
    assert_eq!(b.transport, TransportKind::Tcp);
    let mut sides = [TcpSide::new(a), TcpSide::new(b)];
    let mut timers: HashMap<u64, usize> = HashMap::new();
    for (i, attempt) in [&*a, &*b].into_iter().enumerate() {
        for off in &attempt.syn_retransmit_schedule {
            let token = engine.set_timer(attempt.dialer, attempt.start_time + *off);
            timers.insert(token, i);
        }
    }
    // Side whose SYN the counterpart accepted first.
    let mut client: Option<usize> = None;

    drive(engine, deadline, |engine, occ| {
        match occ {
            Occurrence::Timer { token, .. } => {
                if let Some(&i) = timers.get(&token) {
                    let s = &mut sides[i];
                    match s.state {
                        TcpState::Idle | TcpState::SynSent => {
                            s.state = TcpState::SynSent;
                            s.send(engine, PacketKind::Syn);
                        }
                        TcpState::SynRcvd => s.send(engine, PacketKind::SynAck),
                        TcpState::Established | TcpState::Reset => {}
                    }
                }
            }
            Occurrence::Delivered { host, packet } => {
                let Some(i) = sides
                    .iter()
                    .position(|s| s.host == host && s.local == packet.dst && s.tag == packet.tag)
                else {
                    return false;
                };
                let now = engine.now();
                let s = &mut sides[i];
                let on_tuple = packet.src == s.target;
                match packet.kind {
                    PacketKind::Syn => match s.state {
                        TcpState::SynSent | TcpState::SynRcvd if on_tuple => {
                            s.state = TcpState::SynRcvd;
                            client.get_or_insert(1 - i);
                            s.send(engine, PacketKind::SynAck);
                        }
                        TcpState::Established if on_tuple => s.send(engine, PacketKind::SynAck),
                        _ => {
                            if s.rst_on_unexpected_syn {
                                let rst = Packet::new(packet.dst, packet.src, PacketKind::Rst).with_tag(packet.tag);
                                emit(engine, host, rst);
                            }
                        }
                    },
                    PacketKind::SynAck if on_tuple => match s.state {
                        TcpState::SynSent | TcpState::SynRcvd => {
                            if s.state == TcpState::SynSent {
                                // Our SYN was accepted before theirs reached us.
                                client.get_or_insert(i);
                            }
                            s.establish(now);
                            s.send(engine, PacketKind::Ack);
                        }
                        TcpState::Established => s.send(engine, PacketKind::Ack),
                        _ => {}
                    },
                    PacketKind::Ack if on_tuple && s.state == TcpState::SynRcvd => s.establish(now),
                    PacketKind::Rst if on_tuple => {
                        if matches!(s.state, TcpState::SynSent | TcpState::SynRcvd) {
                            s.state = TcpState::Reset;
                        }
                    }
                    _ => {}
                }
            }
            Occurrence::Dropped { from, packet, reason } if denylisted_drop(&reason) => {
                if let Some(s) = sides.iter_mut().find(|s| s.host == from && s.tag == packet.tag) {
                    s.denylisted = true;
                }
            }
            _ => {}
        }
        sides.iter().all(TcpSide::settled)
    });

    let both = sides.iter().all(|s| s.state == TcpState::Established);
    let mut connections = Vec::new();
    let results = if both {
        let c = client.unwrap_or(0);
        let established_at = sides
            .iter()
            .filter_map(|s| s.established_at)
            .max()
            .expect("both established");
        connections.push(ConnectionRecord {
            peers: [sides[0].host, sides[1].host],
            transport: TransportKind::Tcp,
            established_at,
            path: PathKind::Direct,
            client_side: sides[c].host,
            local: [sides[0].local, sides[1].local],
            remote: [sides[0].target, sides[1].target],
            redundant: false,
        });
        let role = |i: usize| DialResult::Established(if i == c { Role::Client } else { Role::Server });
        [role(0), role(1)]
    } else {
        let fail = |s: &TcpSide| {
            if s.denylisted {
                DialResult::Denylisted
            } else if s.state == TcpState::Reset {
                DialResult::ResetReceived
            } else {
                DialResult::TimedOut
            }
        };
        [fail(&sides[0]), fail(&sides[1])]
    };
    a.settle(results[0]);
    b.settle(results[1]);
    PunchOutcome {
        results,
        connections,
        first_packets: [sides[0].first, sides[1].first],
    }
}

/// Dummy-datagram priming parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimingConfig {
    pub count: u32,
    pub spacing: Duration,
    pub payload: u32,
    pub ttl: u32,
}

impl Default for PrimingConfig {
    fn default() -> Self {
        PrimingConfig {
            count: 5,
            spacing: Duration::from_millis(100),
            payload: 64,
            ttl: DEFAULT_TTL,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuicPunchConfig {
    pub priming: PrimingConfig,
    /// The priming side also sends client hellos, so up to two connections
    /// can come up.
    pub primer_sends_hello: bool,
    /// When two connections establish, the one whose client is this host is
    /// kept and the other marked redundant.
    pub preferred_client: Option<HostId>,
}

struct QuicSide {
    host: HostId,
    local: Endpoint,
    target: Endpoint,
    tag: u64,
    sends_hello: bool,
    denylisted: bool,
    first: Option<TraceId>,
    /// As a client: when the server's reply arrived.
    client_est: Option<SimTime>,
    /// As a server: the client endpoint that said hello, and when its
    /// handshake completed.
    server_peer: Option<Endpoint>,
    server_est: Option<SimTime>,
}

impl QuicSide {
    fn new(a: &DialAttempt, sends_hello: bool) -> Self {
        QuicSide {
            host: a.dialer,
            local: a.local,
            target: a.target,
            tag: a.tag,
            sends_hello,
            denylisted: false,
            first: None,
            client_est: None,
            server_peer: None,
            server_est: None,
        }
    }

    fn note_first(&mut self, id: Option<TraceId>) {
        if self.first.is_none() {
            self.first = id;
        }
    }
}

/// QUIC punching. `primer` sends dummy datagrams from its start time to
/// prime its NAT and acts as the server; `dialer` sends client hellos on its
/// retransmit schedule.
///
/// Servers accept a hello from any source and answer it; a client accepts
/// the reply only from the endpoint it dialed.
pub fn quic_hole_punch(
    engine: &mut Engine,
    primer: &mut DialAttempt,
    dialer: &mut DialAttempt,
    cfg: &QuicPunchConfig,
    deadline: SimTime,
) -> PunchOutcome {
    assert_eq!(primer.transport, TransportKind::Quic);
    assert_eq!(dialer.transport, TransportKind::Quic);
    let mut sides = [
        QuicSide::new(primer, cfg.primer_sends_hello),
        QuicSide::new(dialer, true),
    ];

    for i in 0..cfg.priming.count {
        let at = primer.start_time + cfg.priming.spacing * i;
        let p = Packet::new(primer.local, primer.target, PacketKind::UdpDatagram)
            .with_ttl(cfg.priming.ttl)
            .with_payload(cfg.priming.payload)
            .with_tag(primer.tag);
        let id = engine.send_at(primer.dialer, p, at).ok();
        sides[0].note_first(id);
    }
    let mut timers: HashMap<u64, usize> = HashMap::new();
    for (i, attempt) in [&*primer, &*dialer].into_iter().enumerate() {
        if !sides[i].sends_hello {
            continue;
        }
        for off in &attempt.syn_retransmit_schedule {
            let token = engine.set_timer(attempt.dialer, attempt.start_time + *off);
            timers.insert(token, i);
        }
    }

    drive(engine, deadline, |engine, occ| {
        match occ {
            Occurrence::Timer { token, .. } => {
                if let Some(&i) = timers.get(&token) {
                    let s = &mut sides[i];
                    if s.client_est.is_none() {
                        let p = Packet::new(s.local, s.target, PacketKind::QuicHello).with_tag(s.tag);
                        let id = emit(engine, s.host, p);
                        s.note_first(id);
                    }
                }
            }
            Occurrence::Delivered { host, packet } => {
                let Some(i) = sides
                    .iter()
                    .position(|s| s.host == host && s.local == packet.dst && s.tag == packet.tag)
                else {
                    return false;
                };
                let now = engine.now();
                let s = &mut sides[i];
                match packet.kind {
                    PacketKind::QuicHello => {
                        if s.server_peer.is_none() || s.server_peer == Some(packet.src) {
                            s.server_peer = Some(packet.src);
                            let reply = Packet::new(packet.dst, packet.src, PacketKind::QuicHelloReply).with_tag(s.tag);
                            emit(engine, host, reply);
                        }
                    }
                    PacketKind::QuicHelloReply => {
                        if s.sends_hello && packet.src == s.target && s.client_est.is_none() {
                            s.client_est = Some(now);
                            let ack = Packet::new(s.local, s.target, PacketKind::Ack).with_tag(s.tag);
                            emit(engine, host, ack);
                        }
                    }
                    PacketKind::Ack if s.server_peer == Some(packet.src) && s.server_est.is_none() => {
                        s.server_est = Some(now);
                    }
                    _ => {}
                }
            }
            Occurrence::Dropped { from, packet, reason } if denylisted_drop(&reason) => {
                if let Some(s) = sides.iter_mut().find(|s| s.host == from && s.tag == packet.tag) {
                    s.denylisted = true;
                }
            }
            _ => {}
        }
        // Finished once every hello sender has a complete handshake or can
        // no longer get one.
        (0..2).all(|c| {
            let server = &sides[1 - c];
            !sides[c].sends_hello
                || sides[c].denylisted
                || (sides[c].client_est.is_some() && server.server_est.is_some())
        })
    });

    // Connection c has side c as client and the other side as server.
    let mut connections: Vec<ConnectionRecord> = Vec::new();
    for c in 0..2 {
        let server = 1 - c;
        if let (Some(ct), Some(st)) = (sides[c].client_est, sides[server].server_est) {
            let peer_seen = sides[server].server_peer.expect("server saw a hello");
            let mut local = [sides[0].local, sides[1].local];
            let mut remote = [sides[0].target, sides[1].target];
            local[server] = sides[server].local;
            remote[server] = peer_seen;
            local[c] = sides[c].local;
            remote[c] = sides[c].target;
            connections.push(ConnectionRecord {
                peers: [sides[0].host, sides[1].host],
                transport: TransportKind::Quic,
                established_at: ct.max(st),
                path: PathKind::Direct,
                client_side: sides[c].host,
                local,
                remote,
                redundant: true,
            });
        }
    }
    let keep = connections
        .iter()
        .position(|c| Some(c.client_side) == cfg.preferred_client)
        .or_else(|| {
            connections
                .iter()
                .enumerate()
                .min_by_key(|(_, c)| c.established_at)
                .map(|(i, _)| i)
        });
    if let Some(k) = keep {
        connections[k].redundant = false;
    }

    let result_for = |i: usize| -> DialResult {
        match keep.map(|k| &connections[k]) {
            Some(conn) => DialResult::Established(if conn.client_side == sides[i].host {
                Role::Client
            } else {
                Role::Server
            }),
            None if sides[i].denylisted => DialResult::Denylisted,
            None => DialResult::TimedOut,
        }
    };
    let results = [result_for(0), result_for(1)];
    primer.settle(results[0]);
    dialer.settle(results[1]);
    PunchOutcome {
        results,
        connections,
        first_packets: [sides[0].first, sides[1].first],
    }
}

/// Ordinary dial to an endpoint that is expected to accept it (a public
/// peer or a port forward). The host behind `target` answers any opening
/// packet carrying the attempt's tag.
pub fn direct_dial(engine: &mut Engine, attempt: &mut DialAttempt, deadline: SimTime) -> PunchOutcome {
    let server_host = engine.host_for(attempt.target.addr);
    let kind = attempt.transport;
    let mut timers: HashMap<u64, ()> = HashMap::new();
    for off in &attempt.syn_retransmit_schedule {
        timers.insert(engine.set_timer(attempt.dialer, attempt.start_time + *off), ());
    }
    let mut first = None;
    let mut server_local: Option<(Endpoint, Endpoint)> = None;
    let mut established: Option<SimTime> = None;
    let mut denylisted = false;
    let (local, target, tag, dialer) = (attempt.local, attempt.target, attempt.tag, attempt.dialer);

    drive(engine, deadline, |engine, occ| {
        match occ {
            Occurrence::Timer { token, .. } if timers.contains_key(&token) => {
                if established.is_none() {
                    let id = emit(
                        engine,
                        dialer,
                        Packet::new(local, target, kind.request_kind()).with_tag(tag),
                    );
                    first = first.or(id);
                }
            }
            Occurrence::Delivered { host, packet } if packet.tag == tag => {
                if Some(host) == server_host && packet.kind == kind.request_kind() {
                    server_local = Some((packet.dst, packet.src));
                    let reply = Packet::new(packet.dst, packet.src, kind.reply_kind()).with_tag(tag);
                    emit(engine, host, reply);
                } else if host == dialer
                    && packet.dst == local
                    && packet.src == target
                    && packet.kind == kind.reply_kind()
                    && established.is_none()
                {
                    established = Some(engine.now());
                    emit(
                        engine,
                        dialer,
                        Packet::new(local, target, PacketKind::Ack).with_tag(tag),
                    );
                    return true;
                }
            }
            Occurrence::Dropped { from, packet, reason }
                if from == dialer && packet.tag == tag && denylisted_drop(&reason) =>
            {
                denylisted = true;
            }
            _ => {}
        }
        false
    });

    let (result, connections) = match (established, server_host, server_local) {
        (Some(at), Some(server), Some((s_local, s_remote))) => (
            DialResult::Established(Role::Client),
            vec![ConnectionRecord {
                peers: [dialer, server],
                transport: kind,
                established_at: at,
                path: PathKind::Direct,
                client_side: dialer,
                local: [local, s_local],
                remote: [target, s_remote],
                redundant: false,
            }],
        ),
        _ if denylisted => (DialResult::Denylisted, Vec::new()),
        _ => (DialResult::TimedOut, Vec::new()),
    };
    attempt.settle(result);
    let server_result = if result.is_established() {
        DialResult::Established(Role::Server)
    } else {
        DialResult::TimedOut
    };
    PunchOutcome {
        results: [result, server_result],
        connections,
        first_packets: [first, None],
    }
}

/// One packet of a port spray.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Probe {
    pub local: Endpoint,
    pub target: Endpoint,
    pub at: SimTime,
}

/// All packets one host sends during a birthday attempt: either the `m`
/// sockets opened behind an endpoint-dependent NAT or the `k` probes aimed
/// at guessed external ports.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Spray {
    pub host: HostId,
    pub probes: Vec<Probe>,
}

/// Birthday-style punching: both hosts send their sprays, answer any
/// opening packet that reaches them, and the attempt succeeds as soon as one
/// answer makes it back. The host receiving that answer is the client.
pub fn birthday_punch(
    engine: &mut Engine,
    a: &Spray,
    b: &Spray,
    transport: TransportKind,
    tag: u64,
    deadline: SimTime,
) -> PunchOutcome {
    let mut first = [None, None];
    for (i, spray) in [a, b].into_iter().enumerate() {
        for probe in &spray.probes {
            let p = Packet::new(probe.local, probe.target, transport.request_kind()).with_tag(tag);
            let id = engine.send_at(spray.host, p, probe.at).ok();
            first[i] = first[i].or(id);
        }
    }
    let hosts = [a.host, b.host];
    // Reply trace id -> (answering socket, endpoint it answered).
    let mut answered: HashMap<TraceId, (Endpoint, Endpoint)> = HashMap::new();
    let mut conn: Option<ConnectionRecord> = None;
    let mut denylisted = [false, false];

    drive(engine, deadline, |engine, occ| {
        match occ {
            Occurrence::Delivered { host, packet } if packet.tag == tag => {
                let Some(i) = hosts.iter().position(|h| *h == host) else {
                    return false;
                };
                if packet.kind == transport.request_kind() {
                    let reply = Packet::new(packet.dst, packet.src, transport.reply_kind()).with_tag(tag);
                    if let Some(id) = emit(engine, host, reply) {
                        answered.insert(id, (packet.dst, packet.src));
                    }
                } else if packet.kind == transport.reply_kind() {
                    let Some(&(s_local, s_remote)) = answered.get(&packet.trace_id) else {
                        return false;
                    };
                    let mut local = [s_local; 2];
                    let mut remote = [s_remote; 2];
                    local[i] = packet.dst;
                    remote[i] = packet.src;
                    conn = Some(ConnectionRecord {
                        peers: hosts,
                        transport,
                        established_at: engine.now(),
                        path: PathKind::Direct,
                        client_side: host,
                        local,
                        remote,
                        redundant: false,
                    });
                    return true;
                }
            }
            Occurrence::Dropped { from, packet, reason } if packet.tag == tag && denylisted_drop(&reason) => {
                if let Some(i) = hosts.iter().position(|h| *h == from) {
                    denylisted[i] = true;
                }
            }
            _ => {}
        }
        false
    });

    let results = match &conn {
        Some(c) => {
            let role =
                |h: HostId| DialResult::Established(if h == c.client_side { Role::Client } else { Role::Server });
            [role(hosts[0]), role(hosts[1])]
        }
        None => {
            let fail = |d: bool| {
                if d {
                    DialResult::Denylisted
                } else {
                    DialResult::TimedOut
                }
            };
            [fail(denylisted[0]), fail(denylisted[1])]
        }
    };
    PunchOutcome {
        results,
        connections: conn.into_iter().collect(),
        first_packets: first,
    }
}
