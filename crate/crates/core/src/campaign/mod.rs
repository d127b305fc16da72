//! Monte Carlo harness: scenario files, per-trial population and topology
//! sampling, parallel execution, aggregation and dataset-style export.

mod export;
mod report;
mod world;

use std::collections::BTreeMap;
use std::time::Duration;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dcutr::{run_hole_punch, HolePunchResult, PunchOptions, TransportFilter};
use crate::nat::{DenylistPolicy, FilteringBehavior, MappingBehavior, NatConfig, PortAllocation};
use crate::netsim::{DelayDistribution, DelayModel, LinkModel, DEFAULT_CORE_HOPS, DEFAULT_LOCAL_HOPS};
use crate::rng::{stream_rng, Stream};
use crate::time::from_millis_f64;

pub use export::{export, import_jsonl, ExportFormat, ExportRecord, CSV_COLUMNS};
pub use report::{aggregate, NetworkSuccess, Quantiles, RateSummary, RelayBin, Report, ReportError};
pub use world::{
    build_world, HostNames, PairSetup, PeerSetup, World, WorldError, INITIATOR_EXTERNAL, INITIATOR_INTERNAL,
    LISTENER_EXTERNAL, LISTENER_INTERNAL, RELAY_ADDR,
};

pub const SCHEMA: &str = "punchsim/scenario/v1";

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, CampaignError> {
    Err(CampaignError::Config(msg.into()))
}

/// NAT behaviour of one population archetype.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NatSpec {
    pub mapping: MappingBehavior,
    pub filtering: FilteringBehavior,
    #[serde(default = "default_allocator")]
    pub allocator: PortAllocation,
    #[serde(default = "default_port_space")]
    pub port_space: u32,
    #[serde(default)]
    pub rst_on_unsolicited_syn: bool,
    /// Denylist SYN floods.
    #[serde(default)]
    pub denylist: bool,
    /// Also denylist sources of unsolicited UDP.
    #[serde(default)]
    pub unsolicited_udp_denylist: bool,
}

fn default_allocator() -> PortAllocation {
    PortAllocation::RandomUniform
}

fn default_port_space() -> u32 {
    65_536
}

impl NatSpec {
    pub fn new(mapping: MappingBehavior, filtering: FilteringBehavior) -> Self {
        NatSpec {
            mapping,
            filtering,
            allocator: default_allocator(),
            port_space: default_port_space(),
            rst_on_unsolicited_syn: false,
            denylist: false,
            unsolicited_udp_denylist: false,
        }
    }

    pub fn nat_config(&self) -> NatConfig {
        NatConfig {
            port_alloc: self.allocator,
            port_space: self.port_space,
            denylist: DenylistPolicy {
                enabled: self.denylist || self.unsolicited_udp_denylist,
                unsolicited_udp_triggers: self.unsolicited_udp_denylist,
                ..DenylistPolicy::default()
            },
            rst_on_unsolicited_syn: self.rst_on_unsolicited_syn,
            ..NatConfig::new(self.mapping, self.filtering)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    Public,
    Nat(NatSpec),
}

impl Archetype {
    pub fn is_public(&self) -> bool {
        matches!(self, Archetype::Public)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixEntry {
    pub archetype: Archetype,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanStd {
    pub mean: f64,
    #[serde(default)]
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyConfig {
    /// One-way delay between the two peers' NATs, in ms.
    pub core_ms: MeanStd,
    /// One-way delay between a host and its NAT, in ms.
    pub local_ms: MeanStd,
    /// Per-packet jitter as a fraction of each link's mean.
    #[serde(default)]
    pub jitter_frac: f64,
    /// Range of the per-link factor that multiplies the forward delay and
    /// divides the backward delay.
    #[serde(default = "unit_range")]
    pub asymmetry: [f64; 2],
    /// Range of the relayed path's length relative to the direct one.
    #[serde(default = "unit_range")]
    pub relay_detour: [f64; 2],
    #[serde(default = "default_distribution")]
    pub distribution: DelayDistribution,
}

fn unit_range() -> [f64; 2] {
    [1.0, 1.0]
}

fn default_distribution() -> DelayDistribution {
    DelayDistribution::Normal
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportWeights {
    #[serde(default)]
    pub tcp: f64,
    #[serde(default)]
    pub quic: f64,
    #[serde(default)]
    pub any: f64,
}

impl Default for TransportWeights {
    fn default() -> Self {
        TransportWeights {
            tcp: 0.0,
            quic: 0.0,
            any: 1.0,
        }
    }
}

impl TransportWeights {
    pub fn only(filter: TransportFilter) -> Self {
        let mut w = TransportWeights {
            tcp: 0.0,
            quic: 0.0,
            any: 0.0,
        };
        match filter {
            TransportFilter::Tcp => w.tcp = 1.0,
            TransportFilter::Quic => w.quic = 1.0,
            TransportFilter::Any => w.any = 1.0,
        }
        w
    }

    fn entries(&self) -> [(TransportFilter, f64); 3] {
        [
            (TransportFilter::Tcp, self.tcp),
            (TransportFilter::Quic, self.quic),
            (TransportFilter::Any, self.any),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub trials: u64,
    pub seed: u64,
    pub nat_mix: Vec<MixEntry>,
    /// Number of distinct client networks; each has a fixed NAT drawn from
    /// `nat_mix`, and every trial's client sits in one of them.
    #[serde(default = "default_networks")]
    pub client_networks: u32,
    /// Probability that a NATed client has port forwards in place.
    #[serde(default)]
    pub port_mapping_prevalence: f64,
    pub latency: LatencyConfig,
    /// Range of the relay's position as a fraction of the relayed path,
    /// seen from the client.
    #[serde(default = "half_range")]
    pub relay_position: [f64; 2],
    #[serde(default)]
    pub transport_filter_weights: TransportWeights,
    #[serde(default)]
    pub options: PunchOptions,
    #[serde(default)]
    pub loss_prob: f64,
    /// Zero jitter and no asymmetry, so the relayed RTT is exact.
    #[serde(default)]
    pub accurate_rtt: bool,
    /// Networks with fewer eligible results are left out of the
    /// per-network success statistics.
    #[serde(default = "default_min_samples")]
    pub min_network_samples: u64,
    /// Probability that a peer runs the hole punching protocol at all.
    #[serde(default = "one")]
    pub dcutr_support: f64,
    /// Probability that the client cannot reach the relay.
    #[serde(default)]
    pub relay_unreachable_prob: f64,
}

fn default_networks() -> u32 {
    16
}

fn half_range() -> [f64; 2] {
    [0.5, 0.5]
}

fn default_min_samples() -> u64 {
    10
}

fn one() -> f64 {
    1.0
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, CampaignError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("scenario serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        if self.schema != SCHEMA {
            return config_err(format!("schema must be {SCHEMA:?}, got {:?}", self.schema));
        }
        if self.trials < 1 {
            return config_err("trials must be at least 1");
        }
        if self.nat_mix.is_empty() {
            return config_err("nat_mix is empty");
        }
        let mut total = 0.0;
        for e in &self.nat_mix {
            if !(e.weight.is_finite() && e.weight >= 0.0) {
                return config_err(format!("bad nat_mix weight {}", e.weight));
            }
            if let Archetype::Nat(n) = e.archetype {
                if !(1024..=65_536).contains(&n.port_space) {
                    return config_err(format!("port_space {} outside [1024, 65536]", n.port_space));
                }
            }
            total += e.weight;
        }
        if total <= 0.0 {
            return config_err("nat_mix weights sum to zero");
        }
        if self.client_networks < 1 {
            return config_err("client_networks must be at least 1");
        }
        for (name, p) in [
            ("port_mapping_prevalence", self.port_mapping_prevalence),
            ("loss_prob", self.loss_prob),
            ("dcutr_support", self.dcutr_support),
            ("relay_unreachable_prob", self.relay_unreachable_prob),
            ("latency.jitter_frac", self.latency.jitter_frac),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return config_err(format!("{name} = {p} outside [0, 1]"));
            }
        }
        let lat = &self.latency;
        for (name, m) in [("core_ms", lat.core_ms), ("local_ms", lat.local_ms)] {
            if !(m.mean.is_finite() && m.mean >= 0.0 && m.std.is_finite() && m.std >= 0.0) {
                return config_err(format!("latency.{name} must be non-negative"));
            }
        }
        for (name, [lo, hi], min) in [
            ("latency.asymmetry", lat.asymmetry, f64::MIN_POSITIVE),
            ("latency.relay_detour", lat.relay_detour, f64::MIN_POSITIVE),
            ("relay_position", self.relay_position, 0.0),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo >= min && lo <= hi) {
                return config_err(format!("{name} must be an ordered positive range"));
            }
        }
        if self.relay_position[1] > 1.0 {
            return config_err("relay_position must lie in [0, 1]");
        }
        let w = self.transport_filter_weights;
        let ws = [w.tcp, w.quic, w.any];
        if ws.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || ws.iter().sum::<f64>() <= 0.0 {
            return config_err("transport_filter_weights must be non-negative and not all zero");
        }
        self.options
            .validate()
            .map_err(|e| CampaignError::Config(e.to_string()))
    }

    /// Mix weights scaled to sum to one.
    pub fn normalized_mix(&self) -> Vec<(Archetype, f64)> {
        let total: f64 = self.nat_mix.iter().map(|e| e.weight).sum();
        self.nat_mix.iter().map(|e| (e.archetype, e.weight / total)).collect()
    }
}

/// Results of a campaign, in trial order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub scenario_digest: String,
    /// Every trial's streams derive from this seed and the trial index.
    pub master_seed: u64,
    pub results: Vec<HolePunchResult>,
}

/// What a trial drew before the punch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialDraw {
    pub network: u32,
    pub setup: PairSetup,
    pub names: HostNames,
    pub transport_filter: TransportFilter,
}

fn pick_archetype(mix: &[(Archetype, f64)], rng: &mut impl Rng) -> Archetype {
    let dist = WeightedIndex::new(mix.iter().map(|(_, w)| *w)).expect("validated weights");
    mix[dist.sample(rng)].0
}

fn short_hash(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(&h.finalize()[..8])
}

/// Hex id of client network `index`.
pub fn network_id(seed: u64, index: u32) -> String {
    short_hash(&[b"network", &seed.to_le_bytes(), &index.to_le_bytes()])
}

/// NAT archetype of client network `index`.
pub fn network_archetype(cfg: &ScenarioConfig, index: u32) -> Archetype {
    let mut rng = stream_rng(cfg.seed, index as u64, Stream::Networks);
    pick_archetype(&cfg.normalized_mix(), &mut rng)
}

fn sample_ms(m: MeanStd, rng: &mut impl Rng) -> f64 {
    if m.std <= 0.0 {
        return m.mean;
    }
    let normal = rand_distr::Normal::new(m.mean, m.std).expect("validated latency");
    normal.sample(rng).max(0.0)
}

fn uniform(range: [f64; 2], rng: &mut impl Rng) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

const MIN_LEG_MS: f64 = 0.1;

/// Draws everything about trial `trial` except the punch itself.
pub fn draw_trial(cfg: &ScenarioConfig, trial: u64) -> TrialDraw {
    let seed = cfg.seed;
    let mix = cfg.normalized_mix();

    let network = stream_rng(seed, trial, Stream::Networks).random_range(0..cfg.client_networks);
    let client_arch = network_archetype(cfg, network);
    let mut pop = stream_rng(seed, trial, Stream::Population);
    let remote_arch = pick_archetype(&mix, &mut pop);
    let dcutr = [pop.random_bool(cfg.dcutr_support), pop.random_bool(cfg.dcutr_support)];
    let relay_unreachable = pop.random_bool(cfg.relay_unreachable_prob);
    let mapped = !client_arch.is_public()
        && stream_rng(seed, trial, Stream::PortMapping).random_bool(cfg.port_mapping_prevalence);

    let lat = &cfg.latency;
    let mut lr = stream_rng(seed, trial, Stream::Latency);
    let l_c = sample_ms(lat.local_ms, &mut lr);
    let l_r = sample_ms(lat.local_ms, &mut lr);
    let core = sample_ms(lat.core_ms, &mut lr).max(MIN_LEG_MS);
    let detour = uniform(lat.relay_detour, &mut lr);
    let asym: [f64; 3] = if cfg.accurate_rtt {
        [1.0; 3]
    } else {
        [0, 1, 2].map(|_| uniform(lat.asymmetry, &mut lr))
    };
    let f = uniform(cfg.relay_position, &mut stream_rng(seed, trial, Stream::RelayPosition));
    let jitter = if cfg.accurate_rtt { 0.0 } else { lat.jitter_frac };

    // Relayed one-way path, split at the relay so the client's RTT to the
    // relay is the fraction `f` of its RTT through it.
    let v = (l_c + core + l_r) * detour;
    let c1 = (f * v - l_c).max(MIN_LEG_MS);
    let c2 = (v - l_c - l_r - c1).max(MIN_LEG_MS);

    let delay = |ms: f64| DelayModel {
        mean: from_millis_f64(ms),
        jitter_std: from_millis_f64(ms * jitter),
        distribution: if jitter > 0.0 {
            lat.distribution
        } else {
            DelayDistribution::Constant
        },
    };
    let link = |ms: f64, a: f64, hops: u32| LinkModel {
        forward: delay(ms * a),
        backward: delay(ms / a),
        loss_prob: cfg.loss_prob,
        hops_forward: hops,
        hops_backward: hops,
    };
    let peer = |arch: Archetype, local_ms: f64, dcutr: bool, mapped: bool| {
        let mut p = match arch {
            Archetype::Public => PeerSetup::public(),
            Archetype::Nat(spec) => PeerSetup::behind(spec.nat_config(), Duration::ZERO),
        };
        p.local = link(local_ms, 1.0, DEFAULT_LOCAL_HOPS);
        p.supports_dcutr = dcutr;
        p.port_mapping = mapped;
        p
    };
    let setup = PairSetup {
        listener: peer(client_arch, l_c, dcutr[0], mapped),
        initiator: peer(remote_arch, l_r, dcutr[1], false),
        core: link(core, asym[0], DEFAULT_CORE_HOPS),
        relay_listener: (!relay_unreachable).then(|| link(c1, asym[1], DEFAULT_CORE_HOPS)),
        relay_initiator: Some(link(c2, asym[2], DEFAULT_CORE_HOPS)),
        port_mapping_lifetime: Duration::from_secs(3600),
    };

    let entries = cfg.transport_filter_weights.entries();
    let dist = WeightedIndex::new(entries.iter().map(|(_, w)| *w)).expect("validated weights");
    let transport_filter = entries[dist.sample(&mut stream_rng(seed, trial, Stream::TransportChoice))].0;

    let names = HostNames {
        listener: format!("client-{network:02}"),
        initiator: short_hash(&[b"remote", &seed.to_le_bytes(), &trial.to_le_bytes()]),
        relay: short_hash(&[b"relay", &seed.to_le_bytes(), &trial.to_le_bytes()]),
    };
    TrialDraw {
        network,
        setup,
        names,
        transport_filter,
    }
}

/// Runs trial `trial` of `cfg` to completion.
pub fn run_trial(cfg: &ScenarioConfig, trial: u64) -> HolePunchResult {
    let draw = draw_trial(cfg, trial);
    let mut opts = cfg.options.clone();
    opts.transport_filter = draw.transport_filter;
    let mut result = match build_world(&draw.setup, &draw.names, cfg.seed, trial) {
        Ok(mut w) => {
            let mut rng = stream_rng(cfg.seed, trial, Stream::Protocol);
            run_hole_punch(&mut w.engine, &w.initiator, &w.listener, w.relay, &opts, &mut rng)
        }
        Err(e) => unreachable!("sampled worlds are well formed: {e}"),
    };
    result.network_id = network_id(cfg.seed, draw.network);
    result
}

/// Runs every trial on the current rayon pool; results come back in trial
/// order whatever the number of threads.
pub fn run_campaign(cfg: &ScenarioConfig) -> Result<ResultSet, CampaignError> {
    cfg.validate()?;
    let results = (0..cfg.trials).into_par_iter().map(|t| run_trial(cfg, t)).collect();
    Ok(ResultSet {
        scenario_digest: cfg.digest(),
        master_seed: cfg.seed,
        results,
    })
}

static PRESETS: &[(&str, &str)] = &[
    ("paper-like", include_str!("../../presets/paper-like.json")),
    ("cone-only", include_str!("../../presets/cone-only.json")),
    ("symmetric-heavy", include_str!("../../presets/symmetric-heavy.json")),
    ("port-mapped", include_str!("../../presets/port-mapped.json")),
];

/// Names of the bundled scenarios.
pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn preset_json(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, j)| *j)
}

pub fn preset(name: &str) -> Result<ScenarioConfig, CampaignError> {
    let json = preset_json(name).ok_or_else(|| CampaignError::UnknownPreset(name.to_string()))?;
    ScenarioConfig::from_json(json)
}

/// Label-keyed counts with every label present.
pub fn zeroed_counts<'a>(labels: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, u64> {
    labels.into_iter().map(|l| (l.to_string(), 0)).collect()
}

#[cfg(test)]
mod tests;
