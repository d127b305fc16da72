use std::collections::HashMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::link::{Direction, LinkModel};
use crate::nat::{HostAddr, NatDevice};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HostId(pub u32);

impl HostId {
    pub(crate) fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for HostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "h{}", self.0)
    }
}

#[derive(Clone, Debug)]
pub enum Attachment {
    Public,
    /// Private host behind `nat`; `local` is the host↔NAT segment, forward
    /// being host → NAT.
    Nat {
        nat: usize,
        local: LinkModel,
    },
}

#[derive(Clone, Debug)]
pub struct Host {
    pub name: String,
    pub addr: HostAddr,
    pub attachment: Attachment,
}

impl Host {
    pub fn is_public(&self) -> bool {
        matches!(self.attachment, Attachment::Public)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("address {0} already in use")]
    DuplicateAddress(HostAddr),
    #[error("invalid link: {0}")]
    InvalidLink(String),
    #[error("unknown host {0}")]
    UnknownHost(HostId),
}

/// Hosts, their NAT attachments, and the core links between hosts.
#[derive(Clone, Debug, Default)]
pub struct Topology {
    hosts: Vec<Host>,
    nats: Vec<NatDevice>,
    /// Keyed by (lower id, higher id); forward runs lower → higher.
    core: HashMap<(HostId, HostId), LinkModel>,
    by_addr: HashMap<HostAddr, HostId>,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_public_host(&mut self, name: impl Into<String>, addr: HostAddr) -> Result<HostId, TopologyError> {
        self.claim(addr)?;
        let id = HostId(self.hosts.len() as u32);
        self.hosts.push(Host {
            name: name.into(),
            addr,
            attachment: Attachment::Public,
        });
        self.by_addr.insert(addr, id);
        Ok(id)
    }

    /// Adds a private host at `internal` behind its own NAT device.
    pub fn add_nated_host(
        &mut self,
        name: impl Into<String>,
        internal: HostAddr,
        nat: NatDevice,
        local: LinkModel,
    ) -> Result<HostId, TopologyError> {
        local.validate().map_err(TopologyError::InvalidLink)?;
        let external = nat.external_address();
        self.claim(external)?;
        let id = HostId(self.hosts.len() as u32);
        self.hosts.push(Host {
            name: name.into(),
            addr: internal,
            attachment: Attachment::Nat {
                nat: self.nats.len(),
                local,
            },
        });
        self.nats.push(nat);
        self.by_addr.insert(external, id);
        Ok(id)
    }

    fn claim(&self, addr: HostAddr) -> Result<(), TopologyError> {
        if self.by_addr.contains_key(&addr) {
            Err(TopologyError::DuplicateAddress(addr))
        } else {
            Ok(())
        }
    }

    /// Connects two hosts; `link.forward` describes `a → b`.
    pub fn connect(&mut self, a: HostId, b: HostId, link: LinkModel) -> Result<(), TopologyError> {
        link.validate().map_err(TopologyError::InvalidLink)?;
        for h in [a, b] {
            if h.index() >= self.hosts.len() {
                return Err(TopologyError::UnknownHost(h));
            }
        }
        if a == b {
            return Err(TopologyError::InvalidLink("self loop".into()));
        }
        let (key, link) = if a < b {
            ((a, b), link)
        } else {
            ((b, a), link.reversed())
        };
        self.core.insert(key, link);
        Ok(())
    }

    pub fn hosts(&self) -> &[Host] {
        &self.hosts
    }

    pub fn host(&self, id: HostId) -> &Host {
        &self.hosts[id.index()]
    }

    pub fn contains(&self, id: HostId) -> bool {
        id.index() < self.hosts.len()
    }

    /// Host reachable at a public address: a public host or the host behind
    /// the NAT owning that external address.
    pub fn resolve(&self, addr: HostAddr) -> Option<HostId> {
        self.by_addr.get(&addr).copied()
    }

    /// Public-facing address of a host.
    pub fn public_addr(&self, id: HostId) -> HostAddr {
        match &self.host(id).attachment {
            Attachment::Public => self.host(id).addr,
            Attachment::Nat { nat, .. } => self.nats[*nat].external_address(),
        }
    }

    pub fn nat_of(&self, id: HostId) -> Option<&NatDevice> {
        match self.host(id).attachment {
            Attachment::Public => None,
            Attachment::Nat { nat, .. } => Some(&self.nats[nat]),
        }
    }

    pub fn nat_of_mut(&mut self, id: HostId) -> Option<&mut NatDevice> {
        match self.hosts[id.index()].attachment {
            Attachment::Public => None,
            Attachment::Nat { nat, .. } => Some(&mut self.nats[nat]),
        }
    }

    pub fn local_link(&self, id: HostId) -> Option<&LinkModel> {
        match &self.host(id).attachment {
            Attachment::Public => None,
            Attachment::Nat { local, .. } => Some(local),
        }
    }

    /// Core link from `from` to `to`, with the traversal direction.
    pub fn core_link(&self, from: HostId, to: HostId) -> Option<(&LinkModel, Direction)> {
        if from < to {
            self.core.get(&(from, to)).map(|l| (l, Direction::Forward))
        } else {
            self.core.get(&(to, from)).map(|l| (l, Direction::Backward))
        }
    }

    /// Mean host → NAT → host round trip over the local segment; zero for
    /// public hosts.
    pub fn local_rtt(&self, id: HostId) -> Duration {
        self.local_link(id)
            .map(|l| l.forward.mean + l.backward.mean)
            .unwrap_or(Duration::ZERO)
    }

    /// Mean one-way delay between the two hosts' NATs (or the hosts
    /// themselves when public).
    pub fn core_one_way(&self, from: HostId, to: HostId) -> Option<Duration> {
        self.core_link(from, to).map(|(l, dir)| l.delay(dir).mean)
    }

    /// Hop count from `from` to the ingress of `to`'s NAT (or to `to` when
    /// public).
    pub fn hops_to_remote_edge(&self, from: HostId, to: HostId) -> Option<u32> {
        let (core, dir) = self.core_link(from, to)?;
        let local = self.local_link(from).map(|l| l.hops(Direction::Forward)).unwrap_or(0);
        Some(local + core.hops(dir))
    }
}
