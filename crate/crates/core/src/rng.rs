//! Derivation of independent RNG streams from one master seed.
//!
//! Every stream is seeded with `SHA-256(master ‖ trial ‖ stream)`, so a
//! trial's draws do not depend on how many other trials ran before it or on
//! which thread ran it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha8Rng;

/// Purpose tags for per-trial streams. Keeping each purpose on its own
/// stream means, for example, that changing the relay position does not
/// perturb which NAT types a trial draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Population,
    Latency,
    RelayPosition,
    TransportChoice,
    PortMapping,
    Engine,
    Protocol,
    Networks,
    /// Port allocator of one NAT device.
    Device(u32),
}

impl Stream {
    fn code(self) -> u64 {
        match self {
            Stream::Population => 1,
            Stream::Latency => 2,
            Stream::RelayPosition => 3,
            Stream::TransportChoice => 4,
            Stream::PortMapping => 5,
            Stream::Engine => 6,
            Stream::Protocol => 7,
            Stream::Networks => 8,
            Stream::Device(id) => 0x1000_0000 + id as u64,
        }
    }
}

pub fn derive_seed(master: u64, trial: u64, stream: Stream) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"punchsim/v1");
    h.update(master.to_le_bytes());
    h.update(trial.to_le_bytes());
    h.update(stream.code().to_le_bytes());
    let out = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&out);
    seed
}

pub fn stream_rng(master: u64, trial: u64, stream: Stream) -> SimRng {
    SimRng::from_seed(derive_seed(master, trial, stream))
}
