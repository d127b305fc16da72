use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{zeroed_counts, ResultSet};
use crate::dcutr::{AttemptOutcome, HolePunchResult, Outcome, RttKind, TransportFilter};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("no results to aggregate")]
    EmptyInput,
}

/// Share of successes among results eligible for the success rate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub successes: u64,
    pub eligible: u64,
    pub rate: Option<f64>,
}

impl RateSummary {
    fn add(&mut self, success: bool) {
        self.eligible += 1;
        self.successes += success as u64;
        self.rate = Some(self.successes as f64 / self.eligible as f64);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSuccess {
    /// Networks with at least the configured number of eligible results.
    pub networks: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation across networks.
    pub std: Option<f64>,
    pub per_network: BTreeMap<String, RateSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub n: usize,
    pub min: f64,
    pub p10: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p90: f64,
    pub max: f64,
    pub mean: f64,
}

impl Quantiles {
    /// Linear interpolation between order statistics.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Quantiles {
            n: v.len(),
            min: v[0],
            p10: q(0.10),
            p25: q(0.25),
            p50: q(0.50),
            p75: q(0.75),
            p90: q(0.90),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelayBin {
    pub lo: f64,
    pub hi: f64,
    #[serde(flatten)]
    pub rate: RateSummary,
}

pub const RELAY_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scenario_digest: String,
    pub trials: u64,
    /// Pooled over results that ended in SUCCESS or FAILED with no port
    /// mapping in place. `None` when there are none.
    pub success_rate: Option<f64>,
    pub success_rate_defined: bool,
    pub success_eligible: u64,
    pub network_success: NetworkSuccess,
    /// Among successful punches, the share that succeeded on attempt 1.
    pub first_attempt_share: Option<f64>,
    /// The same, restricted to results whose relayed RTT std is below half
    /// its mean.
    pub first_attempt_share_low_noise: Option<f64>,
    /// Successful attempt index → count.
    pub success_attempt_distribution: BTreeMap<u32, u64>,
    pub outcomes: BTreeMap<String, u64>,
    pub outcomes_with_port_mapping: BTreeMap<String, u64>,
    pub outcomes_without_port_mapping: BTreeMap<String, u64>,
    pub attempt_outcomes: BTreeMap<String, u64>,
    pub per_transport: BTreeMap<String, RateSummary>,
    /// Direct RTT after the punch over relayed RTT, per success.
    pub latency_ratio: Option<Quantiles>,
    /// Success rate by the relay's position along the relayed path, in 5%
    /// bins.
    pub relay_position_curve: Vec<RelayBin>,
    pub rtt_std_over_mean: Option<Quantiles>,
}

fn eligible(r: &HolePunchResult) -> bool {
    matches!(r.outcome, Outcome::Success | Outcome::Failed) && r.port_mappings.is_empty()
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

/// Bin index of a relay position; the small epsilon keeps exact multiples
/// of 5% in the bin they start.
pub fn relay_bin(ratio: f64) -> usize {
    ((ratio * RELAY_BINS as f64 + 1e-9).floor().max(0.0) as usize).min(RELAY_BINS - 1)
}

fn ratio(r: &HolePunchResult, num: RttKind, den: RttKind) -> Option<f64> {
    let n = r.rtt(num)?.mean_us;
    let d = r.rtt(den)?.mean_us;
    (d > 0.0).then(|| n / d)
}

/// Aggregates a result set with per-network rates over networks of at
/// least `min_network_samples` eligible results.
pub fn aggregate(rs: &ResultSet, min_network_samples: u64) -> Result<Report, ReportError> {
    if rs.results.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let outcome_labels = Outcome::ALL.map(Outcome::as_str);
    let mut outcomes = zeroed_counts(outcome_labels);
    let mut with_pm = zeroed_counts(outcome_labels);
    let mut without_pm = zeroed_counts(outcome_labels);
    let mut attempt_outcomes = zeroed_counts(AttemptOutcome::ALL.map(AttemptOutcome::as_str));
    let mut pooled = RateSummary::default();
    let mut per_network: BTreeMap<String, RateSummary> = BTreeMap::new();
    let mut per_transport: BTreeMap<String, RateSummary> =
        [TransportFilter::Tcp, TransportFilter::Quic, TransportFilter::Any]
            .into_iter()
            .map(|f| (filter_label(f).to_string(), RateSummary::default()))
            .collect();
    let mut bins: Vec<RateSummary> = vec![RateSummary::default(); RELAY_BINS];
    let mut distribution: BTreeMap<u32, u64> = BTreeMap::new();
    let (mut successes, mut first) = (0u64, 0u64);
    let (mut successes_low, mut first_low) = (0u64, 0u64);
    let mut latency_ratios = Vec::new();
    let mut noise = Vec::new();

    for r in &rs.results {
        let label = r.outcome.as_str().to_string();
        *outcomes.get_mut(&label).expect("all labels present") += 1;
        let side = if r.has_port_mapping() {
            &mut with_pm
        } else {
            &mut without_pm
        };
        *side.get_mut(&label).expect("all labels present") += 1;
        for a in &r.attempts {
            *attempt_outcomes
                .get_mut(a.outcome.as_str())
                .expect("all labels present") += 1;
        }
        let relayed = r.rtt(RttKind::ToRemoteThroughRelay);
        if let Some(s) = relayed.and_then(|s| s.std_over_mean()) {
            noise.push(s);
        }
        if eligible(r) {
            let ok = r.outcome == Outcome::Success;
            pooled.add(ok);
            per_network.entry(r.network_id.clone()).or_default().add(ok);
            per_transport
                .get_mut(filter_label(r.transport_filter))
                .expect("all filters present")
                .add(ok);
            if let Some(pos) = ratio(r, RttKind::ToRelay, RttKind::ToRemoteThroughRelay) {
                bins[relay_bin(pos)].add(ok);
            }
        }
        if let Some(idx) = r.success_attempt() {
            successes += 1;
            *distribution.entry(idx).or_default() += 1;
            first += (idx == 1) as u64;
            let low_noise = relayed.is_some_and(|s| s.std_us < s.mean_us / 2.0);
            if low_noise {
                successes_low += 1;
                first_low += (idx == 1) as u64;
            }
            if let Some(lr) = ratio(r, RttKind::ToRemoteAfterHolepunch, RttKind::ToRemoteThroughRelay) {
                latency_ratios.push(lr);
            }
        }
    }

    let qualifying: Vec<f64> = per_network
        .values()
        .filter(|s| s.eligible >= min_network_samples.max(1))
        .filter_map(|s| s.rate)
        .collect();
    let (mean, std) = mean_std(&qualifying);
    let share = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);

    Ok(Report {
        scenario_digest: rs.scenario_digest.clone(),
        trials: rs.results.len() as u64,
        success_rate: pooled.rate,
        success_rate_defined: pooled.rate.is_some(),
        success_eligible: pooled.eligible,
        network_success: NetworkSuccess {
            networks: qualifying.len(),
            mean,
            std,
            per_network,
        },
        first_attempt_share: share(first, successes),
        first_attempt_share_low_noise: share(first_low, successes_low),
        success_attempt_distribution: distribution,
        outcomes,
        outcomes_with_port_mapping: with_pm,
        outcomes_without_port_mapping: without_pm,
        attempt_outcomes,
        per_transport,
        latency_ratio: Quantiles::of(&latency_ratios),
        relay_position_curve: bins
            .into_iter()
            .enumerate()
            .map(|(i, rate)| RelayBin {
                lo: i as f64 / RELAY_BINS as f64,
                hi: (i + 1) as f64 / RELAY_BINS as f64,
                rate,
            })
            .collect(),
        rtt_std_over_mean: Quantiles::of(&noise),
    })
}

fn filter_label(f: TransportFilter) -> &'static str {
    match f {
        TransportFilter::Tcp => "TCP",
        TransportFilter::Quic => "QUIC",
        TransportFilter::Any => "ANY",
    }
}
