use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::link::{Direction, LinkModel};
use super::topology::{Attachment, HostId, Topology};
use crate::nat::{Endpoint, InboundVerdict, NatDrop, NatError, Transport};
use crate::rng::SimRng;
use crate::time::SimTime;

pub type TraceId = u64;

/// Default initial TTL.
pub const DEFAULT_TTL: u32 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PacketKind {
    Syn,
    SynAck,
    Ack,
    Rst,
    UdpDatagram,
    QuicHello,
    QuicHelloReply,
    /// Application payload over an established path (pings, keepalives).
    Data,
    Signal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Packet {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub kind: PacketKind,
    pub ttl: u32,
    pub payload_size: u32,
    /// Assigned by the engine when the packet is sent.
    pub trace_id: TraceId,
    /// Free-form application tag (sequence numbers, ping ids).
    pub tag: u64,
}

impl Packet {
    pub fn new(src: Endpoint, dst: Endpoint, kind: PacketKind) -> Self {
        Packet {
            src,
            dst,
            kind,
            ttl: DEFAULT_TTL,
            payload_size: 0,
            trace_id: 0,
            tag: 0,
        }
    }

    pub fn with_ttl(mut self, ttl: u32) -> Self {
        self.ttl = ttl;
        self
    }

    pub fn with_tag(mut self, tag: u64) -> Self {
        self.tag = tag;
        self
    }

    pub fn with_payload(mut self, bytes: u32) -> Self {
        self.payload_size = bytes;
        self
    }

    pub fn transport(&self) -> Transport {
        self.src.transport
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DropReason {
    TtlExpired,
    LinkLoss,
    Nat(NatDrop),
    Outbound(NatError),
    Unroutable,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SimError {
    #[error("no route to {0}")]
    UnroutableDestination(Endpoint),
    #[error("unknown host {0}")]
    UnknownHost(HostId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Sent {
        from: HostId,
        src: Endpoint,
        dst: Endpoint,
        kind: PacketKind,
        ttl: u32,
    },
    Egress {
        external: Endpoint,
    },
    Delivered {
        host: HostId,
        ttl: u32,
    },
    Dropped {
        reason: DropReason,
    },
    Timer {
        host: HostId,
        token: u64,
    },
    Signal {
        from: HostId,
        to: HostId,
        bytes: u32,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub at: SimTime,
    /// Packet trace id, or 0 for timers and signals.
    pub trace_id: TraceId,
    #[serde(flatten)]
    pub event: TraceEvent,
}

/// Something a protocol driver has to react to.
#[derive(Clone, Debug, PartialEq)]
pub enum Occurrence {
    Delivered {
        host: HostId,
        packet: Packet,
    },
    Dropped {
        from: HostId,
        packet: Packet,
        reason: DropReason,
    },
    Timer {
        host: HostId,
        token: u64,
    },
    Signal {
        from: HostId,
        to: HostId,
        tag: u64,
        bytes: u32,
    },
}

#[derive(Clone, Debug)]
enum Event {
    Emit {
        host: HostId,
        packet: Packet,
    },
    /// Packet reached the sender's NAT after the local segment.
    AtEgressNat {
        host: HostId,
        packet: Packet,
    },
    /// Packet left a NAT or public host and crosses the core.
    Core {
        from: HostId,
        to: HostId,
        origin: HostId,
        packet: Packet,
    },
    AtIngressNat {
        host: HostId,
        origin: HostId,
        packet: Packet,
    },
    AtHost {
        host: HostId,
        packet: Packet,
    },
    Drop {
        origin: HostId,
        packet: Packet,
        reason: DropReason,
    },
    Timer {
        host: HostId,
        token: u64,
    },
    Signal {
        from: HostId,
        to: HostId,
        tag: u64,
        bytes: u32,
    },
}

struct Scheduled {
    at: SimTime,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Min-heap on (time, insertion sequence).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Discrete-event engine for one simulation run.
pub struct Engine {
    topo: Topology,
    now: SimTime,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    rng: SimRng,
    trace: Vec<TraceRecord>,
    egress: HashMap<TraceId, (SimTime, Endpoint)>,
    next_trace: TraceId,
    next_token: u64,
    signal_last: HashMap<(HostId, HostId), SimTime>,
    signal_bytes: HashMap<(HostId, HostId), u64>,
    processed: u64,
}

/// Outcome of crossing one segment.
enum Hop {
    Through { delay: Duration, ttl: u32 },
    Lost { delay: Duration },
    Expired { after: Duration },
}

impl Engine {
    pub fn new(topo: Topology, rng: SimRng) -> Self {
        Engine {
            topo,
            now: SimTime::ZERO,
            queue: BinaryHeap::new(),
            seq: 0,
            rng,
            trace: Vec::new(),
            egress: HashMap::new(),
            next_trace: 1,
            next_token: 1,
            signal_last: HashMap::new(),
            signal_bytes: HashMap::new(),
            processed: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn topology_mut(&mut self) -> &mut Topology {
        &mut self.topo
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    /// Time and external source at which a packet left its sender's NAT
    /// (or the sender itself when public).
    pub fn egress_of(&self, id: TraceId) -> Option<(SimTime, Endpoint)> {
        self.egress.get(&id).copied()
    }

    /// Cumulative signaling bytes sent from `from` to `to`.
    pub fn signal_bytes(&self, from: HostId, to: HostId) -> u64 {
        self.signal_bytes.get(&(from, to)).copied().unwrap_or(0)
    }

    fn schedule(&mut self, at: SimTime, event: Event) {
        debug_assert!(at >= self.now);
        self.seq += 1;
        self.queue.push(Scheduled {
            at,
            seq: self.seq,
            event,
        });
    }

    fn record(&mut self, trace_id: TraceId, event: TraceEvent) {
        self.trace.push(TraceRecord {
            at: self.now,
            trace_id,
            event,
        });
    }

    /// Sends `packet` from `from` now.
    pub fn send(&mut self, from: HostId, packet: Packet) -> Result<TraceId, SimError> {
        let now = self.now;
        self.send_at(from, packet, now)
    }

    /// Schedules `packet` to leave `from` at `at`.
    pub fn send_at(&mut self, from: HostId, mut packet: Packet, at: SimTime) -> Result<TraceId, SimError> {
        if !self.topo.contains(from) {
            return Err(SimError::UnknownHost(from));
        }
        let dest = self
            .topo
            .resolve(packet.dst.addr)
            .ok_or(SimError::UnroutableDestination(packet.dst))?;
        if dest == from || self.topo.core_link(from, dest).is_none() {
            return Err(SimError::UnroutableDestination(packet.dst));
        }
        packet.trace_id = self.next_trace;
        self.next_trace += 1;
        let at = at.max(self.now);
        self.schedule(at, Event::Emit { host: from, packet });
        Ok(packet.trace_id)
    }

    pub fn set_timer(&mut self, host: HostId, at: SimTime) -> u64 {
        let token = self.next_token;
        self.next_token += 1;
        let at = at.max(self.now);
        self.schedule(at, Event::Timer { host, token });
        token
    }

    /// Sends a message over the relayed channel `from → relay → to`.
    ///
    /// The channel is reliable and in order; each message takes the sum of
    /// the two legs' sampled one-way delays. Returns the arrival time.
    pub fn send_signal(&mut self, from: HostId, to: HostId, relay: HostId, tag: u64, bytes: u32) -> SimTime {
        let up = self.path_delay(from, relay);
        let down = self.path_delay(relay, to);
        let mut arrival = self.now + up + down;
        if let Some(last) = self.signal_last.get(&(from, to)) {
            arrival = arrival.max(*last);
        }
        self.signal_last.insert((from, to), arrival);
        *self.signal_bytes.entry((from, to)).or_default() += bytes as u64;
        self.record(0, TraceEvent::Signal { from, to, bytes });
        self.schedule(arrival, Event::Signal { from, to, tag, bytes });
        arrival
    }

    /// Sampled host-to-host one-way delay including local segments.
    fn path_delay(&mut self, from: HostId, to: HostId) -> Duration {
        let mut total = Duration::ZERO;
        if let Some(local) = self.topo.local_link(from).copied() {
            total += local.forward.sample(&mut self.rng);
        }
        if let Some((core, dir)) = self.topo.core_link(from, to).map(|(l, d)| (*l, d)) {
            total += core.delay(dir).sample(&mut self.rng);
        }
        if let Some(local) = self.topo.local_link(to).copied() {
            total += local.backward.sample(&mut self.rng);
        }
        total
    }

    /// Processes every event up to and including `t`, then sets the clock to
    /// `t`. Host-facing occurrences are only recorded in the trace.
    pub fn run_until(&mut self, t: SimTime) -> u64 {
        let before = self.processed;
        while self.next_occurrence(t).is_some() {}
        self.processed - before
    }

    /// Advances to the next host-facing occurrence at or before `limit`.
    ///
    /// Routing-internal events are handled on the way. Returns `None` once
    /// nothing is left at or before `limit`, in which case the clock moves
    /// to `limit` (unless `limit` is [`SimTime::MAX`]).
    pub fn next_occurrence(&mut self, limit: SimTime) -> Option<Occurrence> {
        while let Some(top) = self.queue.peek() {
            if top.at > limit {
                break;
            }
            let Scheduled { at, event, .. } = self.queue.pop().expect("peeked");
            debug_assert!(at >= self.now, "clock moved backwards");
            self.now = at;
            self.processed += 1;
            if let Some(occ) = self.process(event) {
                return Some(occ);
            }
        }
        if limit != SimTime::MAX && limit > self.now {
            self.now = limit;
        }
        None
    }

    fn process(&mut self, event: Event) -> Option<Occurrence> {
        match event {
            Event::Emit { host, packet } => {
                self.record(
                    packet.trace_id,
                    TraceEvent::Sent {
                        from: host,
                        src: packet.src,
                        dst: packet.dst,
                        kind: packet.kind,
                        ttl: packet.ttl,
                    },
                );
                match self.topo.local_link(host).copied() {
                    Some(local) => {
                        self.cross(local, Direction::Forward, false, host, packet, |packet| {
                            Event::AtEgressNat { host, packet }
                        });
                    }
                    None => self.egress(host, packet),
                }
                None
            }
            Event::AtEgressNat { host, mut packet } => {
                let now = self.now;
                let nat = self.topo.nat_of_mut(host).expect("egress event for NATed host");
                match nat.translate_outbound(packet.src, packet.dst, now) {
                    Ok(external) => {
                        packet.src = external;
                        self.egress(host, packet);
                    }
                    Err(err) => self.schedule(
                        now,
                        Event::Drop {
                            origin: host,
                            packet,
                            reason: DropReason::Outbound(err),
                        },
                    ),
                }
                None
            }
            Event::Core {
                from,
                to,
                origin,
                packet,
            } => {
                let (link, dir) = match self.topo.core_link(from, to) {
                    Some((l, d)) => (*l, d),
                    None => {
                        self.schedule(
                            self.now,
                            Event::Drop {
                                origin,
                                packet,
                                reason: DropReason::Unroutable,
                            },
                        );
                        return None;
                    }
                };
                let public_dest = self.topo.host(to).is_public();
                self.cross(link, dir, public_dest, origin, packet, |packet| {
                    if public_dest {
                        Event::AtHost { host: to, packet }
                    } else {
                        Event::AtIngressNat {
                            host: to,
                            origin,
                            packet,
                        }
                    }
                });
                None
            }
            Event::AtIngressNat { host, origin, packet } => {
                let now = self.now;
                let is_syn = packet.kind == PacketKind::Syn;
                let nat = self.topo.nat_of_mut(host).expect("ingress event for NATed host");
                let rst_unsolicited = nat.config().rst_on_unsolicited_syn;
                let external = Endpoint::new(nat.external_address(), packet.dst.port, packet.dst.transport);
                match nat.filter_inbound_packet(packet.src, packet.dst, is_syn, now) {
                    InboundVerdict::Deliver(internal) => {
                        let mut packet = packet;
                        packet.dst = internal;
                        let local = *self.topo.local_link(host).expect("NATed host has a local link");
                        self.cross(local, Direction::Backward, true, origin, packet, |packet| {
                            Event::AtHost { host, packet }
                        });
                    }
                    InboundVerdict::Drop(reason) => {
                        if is_syn && rst_unsolicited && reason != NatDrop::Denylisted {
                            self.nat_reset(host, external, packet.src, packet.tag);
                        }
                        self.schedule(
                            now,
                            Event::Drop {
                                origin,
                                packet,
                                reason: DropReason::Nat(reason),
                            },
                        );
                    }
                }
                None
            }
            Event::AtHost { host, packet, .. } => {
                self.record(packet.trace_id, TraceEvent::Delivered { host, ttl: packet.ttl });
                Some(Occurrence::Delivered { host, packet })
            }
            Event::Drop { origin, packet, reason } => {
                self.record(packet.trace_id, TraceEvent::Dropped { reason });
                Some(Occurrence::Dropped {
                    from: origin,
                    packet,
                    reason,
                })
            }
            Event::Timer { host, token } => {
                self.record(0, TraceEvent::Timer { host, token });
                Some(Occurrence::Timer { host, token })
            }
            Event::Signal { from, to, tag, bytes } => Some(Occurrence::Signal { from, to, tag, bytes }),
        }
    }

    /// Packet has left `host`'s NAT (or `host` itself when public).
    fn egress(&mut self, host: HostId, packet: Packet) {
        self.egress.insert(packet.trace_id, (self.now, packet.src));
        self.record(packet.trace_id, TraceEvent::Egress { external: packet.src });
        let to = match self.topo.resolve(packet.dst.addr) {
            Some(to) => to,
            None => {
                self.schedule(
                    self.now,
                    Event::Drop {
                        origin: host,
                        packet,
                        reason: DropReason::Unroutable,
                    },
                );
                return;
            }
        };
        self.schedule(
            self.now,
            Event::Core {
                from: host,
                to,
                origin: host,
                packet,
            },
        );
    }

    /// RST generated by `host`'s NAT toward the source of an unsolicited SYN.
    fn nat_reset(&mut self, host: HostId, external: Endpoint, target: Endpoint, tag: u64) {
        let Some(to) = self.topo.resolve(target.addr) else {
            return;
        };
        let mut rst = Packet::new(external, target, PacketKind::Rst).with_tag(tag);
        rst.trace_id = self.next_trace;
        self.next_trace += 1;
        self.record(
            rst.trace_id,
            TraceEvent::Sent {
                from: host,
                src: rst.src,
                dst: rst.dst,
                kind: rst.kind,
                ttl: rst.ttl,
            },
        );
        self.egress.insert(rst.trace_id, (self.now, external));
        self.schedule(
            self.now,
            Event::Core {
                from: host,
                to,
                origin: host,
                packet: rst,
            },
        );
    }

    fn hop(&mut self, link: &LinkModel, dir: Direction, ttl: u32, is_final: bool) -> Hop {
        let delay = link.delay(dir).sample(&mut self.rng);
        let hops = link.hops(dir);
        if ttl < hops || (ttl == hops && !is_final) {
            // Dies `ttl` hops into the segment.
            let frac = ttl as f64 / hops as f64;
            return Hop::Expired {
                after: Duration::from_micros((delay.as_micros() as f64 * frac) as u64),
            };
        }
        if link.lost(&mut self.rng) {
            return Hop::Lost { delay };
        }
        Hop::Through { delay, ttl: ttl - hops }
    }

    fn cross(
        &mut self,
        link: LinkModel,
        dir: Direction,
        is_final: bool,
        origin: HostId,
        mut packet: Packet,
        next: impl FnOnce(Packet) -> Event,
    ) {
        match self.hop(&link, dir, packet.ttl, is_final) {
            Hop::Through { delay, ttl } => {
                packet.ttl = ttl;
                let at = self.now + delay;
                self.schedule(at, next(packet));
            }
            Hop::Lost { delay } => {
                let at = self.now + delay;
                self.schedule(
                    at,
                    Event::Drop {
                        origin,
                        packet,
                        reason: DropReason::LinkLoss,
                    },
                );
            }
            Hop::Expired { after } => {
                let at = self.now + after;
                self.schedule(
                    at,
                    Event::Drop {
                        origin,
                        packet,
                        reason: DropReason::TtlExpired,
                    },
                );
            }
        }
    }

    /// Host the topology attaches to `addr`, for drivers that need to map an
    /// endpoint back to a host.
    pub fn host_for(&self, addr: crate::nat::HostAddr) -> Option<HostId> {
        self.topo.resolve(addr)
    }

    pub fn is_nated(&self, host: HostId) -> bool {
        matches!(self.topo.host(host).attachment, Attachment::Nat { .. })
    }
}
