use super::*;
use crate::dcutr::{AttemptOutcome, HolePunchAttempt, Outcome, RttKind, RttStats};
use crate::nat::{Endpoint, HostAddr, Transport};
use crate::oracle::population_mix;

fn nat_entry(m: MappingBehavior, f: FilteringBehavior, weight: f64) -> MixEntry {
    MixEntry {
        archetype: Archetype::Nat(NatSpec::new(m, f)),
        weight,
    }
}

fn base(trials: u64, mix: Vec<MixEntry>) -> ScenarioConfig {
    ScenarioConfig {
        schema: SCHEMA.into(),
        name: "test".into(),
        description: String::new(),
        trials,
        seed: 99,
        nat_mix: mix,
        client_networks: 8,
        port_mapping_prevalence: 0.0,
        latency: LatencyConfig {
            core_ms: MeanStd { mean: 40.0, std: 15.0 },
            local_ms: MeanStd { mean: 2.0, std: 1.0 },
            jitter_frac: 0.0,
            asymmetry: [1.0, 1.0],
            relay_detour: [1.0, 1.5],
            distribution: DelayDistribution::Normal,
        },
        relay_position: [0.05, 0.95],
        transport_filter_weights: TransportWeights::default(),
        options: PunchOptions::default(),
        loss_prob: 0.0,
        accurate_rtt: true,
        min_network_samples: 1,
        dcutr_support: 1.0,
        relay_unreachable_prob: 0.0,
    }
}

fn cone(trials: u64) -> ScenarioConfig {
    base(
        trials,
        vec![nat_entry(
            MappingBehavior::EndpointIndependent,
            FilteringBehavior::AddressAndPortDependent,
            1.0,
        )],
    )
}

fn jsonl(rs: &ResultSet) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.jsonl");
    export(rs, ExportFormat::JsonLines, &p).unwrap();
    std::fs::read(p).unwrap()
}

#[test]
fn repeated_runs_are_byte_identical() {
    let mut cfg = cone(100);
    cfg.accurate_rtt = false;
    cfg.latency.jitter_frac = 0.2;
    cfg.latency.asymmetry = [0.7, 1.4];
    let a = run_campaign(&cfg).unwrap();
    let b = run_campaign(&cfg).unwrap();
    assert_eq!(jsonl(&a), jsonl(&b));
    assert_eq!(a.results.len(), 100);
    cfg.seed += 1;
    assert_ne!(jsonl(&a), jsonl(&run_campaign(&cfg).unwrap()));
}

#[test]
fn thread_count_does_not_change_results() {
    let mut cfg = cone(60);
    cfg.accurate_rtt = false;
    cfg.latency.jitter_frac = 0.3;
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_campaign(&cfg).unwrap())
    };
    assert_eq!(jsonl(&run(1)), jsonl(&run(4)));
}

#[test]
fn symmetric_cone_population_always_succeeds() {
    let rs = run_campaign(&cone(200)).unwrap();
    let report = aggregate(&rs, 1).unwrap();
    assert_eq!(report.success_rate, Some(1.0));
    assert_eq!(report.first_attempt_share, Some(1.0));
}

#[test]
fn endpoint_dependent_share_matches_mix_oracle() {
    // Without birthday probing only EIM–EIM pairs can punch, so the success
    // rate estimates (1 − p)². Many networks keep client draws independent.
    let p = 0.11;
    let trials = 2000;
    let mut cfg = base(
        trials,
        vec![
            nat_entry(
                MappingBehavior::EndpointIndependent,
                FilteringBehavior::AddressAndPortDependent,
                1.0 - p,
            ),
            nat_entry(
                MappingBehavior::AddressAndPortDependent,
                FilteringBehavior::AddressAndPortDependent,
                p,
            ),
        ],
    );
    cfg.client_networks = 1_000_000;
    let report = aggregate(&run_campaign(&cfg).unwrap(), 1).unwrap();
    let expect: f64 = population_mix(p).unwrap().eim_eim;
    let sigma = (expect * (1.0 - expect) / trials as f64).sqrt();
    let got = report.success_rate.unwrap();
    assert!(
        (got - expect).abs() < 3.0 * sigma,
        "{got} vs {expect} ± {}",
        3.0 * sigma
    );
}

#[test]
fn port_mapped_clients_reverse_more_often() {
    let mut cfg = cone(400);
    cfg.port_mapping_prevalence = 0.3;
    let report = aggregate(&run_campaign(&cfg).unwrap(), 1).unwrap();
    let share = |h: &BTreeMap<String, u64>| {
        let total: u64 = h.values().sum();
        h["CONNECTION_REVERSED"] as f64 / total as f64
    };
    assert!(share(&report.outcomes_with_port_mapping) > share(&report.outcomes_without_port_mapping));
    assert_eq!(
        report.outcomes_with_port_mapping.values().sum::<u64>()
            + report.outcomes_without_port_mapping.values().sum::<u64>(),
        400
    );
}

#[test]
fn histogram_and_filter_invariants() {
    let mut cfg = base(
        300,
        vec![
            nat_entry(
                MappingBehavior::EndpointIndependent,
                FilteringBehavior::AddressAndPortDependent,
                0.6,
            ),
            nat_entry(
                MappingBehavior::AddressAndPortDependent,
                FilteringBehavior::AddressAndPortDependent,
                0.2,
            ),
            MixEntry {
                archetype: Archetype::Public,
                weight: 0.2,
            },
        ],
    );
    cfg.port_mapping_prevalence = 0.3;
    cfg.dcutr_support = 0.9;
    cfg.relay_unreachable_prob = 0.05;
    cfg.transport_filter_weights = TransportWeights {
        tcp: 1.0,
        quic: 1.0,
        any: 1.0,
    };
    let rs = run_campaign(&cfg).unwrap();
    let report = aggregate(&rs, 1).unwrap();
    assert_eq!(report.outcomes.values().sum::<u64>(), 300);
    let eligible = rs
        .results
        .iter()
        .filter(|r| matches!(r.outcome, Outcome::Success | Outcome::Failed) && r.port_mappings.is_empty())
        .count() as u64;
    assert_eq!(report.success_eligible, eligible);
    assert_eq!(report.per_transport.values().map(|s| s.eligible).sum::<u64>(), eligible);
    for r in &rs.results {
        assert!(r.attempts.len() <= 3);
        assert_eq!(
            r.outcome == Outcome::Success,
            r.attempts.iter().any(|a| a.outcome == AttemptOutcome::Success)
        );
        assert_eq!(rs.scenario_digest, cfg.digest());
    }
    for v in [
        report.success_rate,
        report.first_attempt_share,
        report.network_success.mean,
    ]
    .into_iter()
    .flatten()
    {
        assert!((0.0..=1.0).contains(&v));
    }
    // Some trials of each kind actually occurred.
    for o in ["SUCCESS", "FAILED", "NO_CONNECTION", "NO_STREAM", "CONNECTION_REVERSED"] {
        assert!(report.outcomes[o] > 0, "{o}");
    }
}

fn stats(kind: RttKind, ms: f64) -> RttStats {
    RttStats::from_samples(kind, vec![(ms * 1000.0) as u64]).unwrap()
}

fn synthetic(outcome: Outcome, rtts: Vec<RttStats>) -> HolePunchResult {
    let attempts = match outcome {
        Outcome::Success | Outcome::Failed => vec![HolePunchAttempt {
            index: 1,
            outcome: if outcome == Outcome::Success {
                AttemptOutcome::Success
            } else {
                AttemptOutcome::Failed
            },
            roles: crate::dcutr::AttemptRoles::Standard,
            method: crate::dcutr::PunchMethod::QuicPriming,
            started_at: crate::time::SimTime::ZERO,
            ended_at: crate::time::SimTime::ZERO,
            timing_error_us: Some(0),
        }],
        _ => vec![],
    };
    HolePunchResult {
        client_id: "client-00".into(),
        remote_id: "r".into(),
        network_id: "n".into(),
        relay_id: "relay".into(),
        client_nat: "EIM/APDF".into(),
        remote_nat: "EIM/APDF".into(),
        outcome,
        attempts,
        rtts,
        port_mappings: vec![],
        transport_filter: TransportFilter::Quic,
        transport_used: Some(crate::transport::TransportKind::Quic),
        signal_bytes: Default::default(),
        relay_closed: outcome == Outcome::Success,
        error: None,
    }
}

fn set(results: Vec<HolePunchResult>) -> ResultSet {
    ResultSet {
        scenario_digest: "d".into(),
        master_seed: 1,
        results,
    }
}

#[test]
fn latency_ratio_and_relay_bin_examples() {
    let r = synthetic(
        Outcome::Success,
        vec![
            stats(RttKind::ToRelay, 700.0),
            stats(RttKind::ToRemoteThroughRelay, 1000.0),
            stats(RttKind::ToRemoteAfterHolepunch, 700.0),
        ],
    );
    let report = aggregate(&set(vec![r]), 1).unwrap();
    let lr = report.latency_ratio.unwrap();
    assert!((lr.p50 - 0.7).abs() < 1e-12);
    let bin = &report.relay_position_curve[14];
    assert_eq!((bin.lo, bin.rate.eligible, bin.rate.rate), (0.7, 1, Some(1.0)));
    assert_eq!(report::relay_bin(0.7), 14);
    assert_eq!(report::relay_bin(1.0), 19);
}

#[test]
fn reversed_only_leaves_rate_undefined() {
    let rs = set(vec![synthetic(Outcome::ConnectionReversed, vec![]); 3]);
    let report = aggregate(&rs, 1).unwrap();
    assert_eq!(report.success_rate, None);
    assert!(!report.success_rate_defined);
    assert_eq!(report.outcomes["CONNECTION_REVERSED"], 3);
    assert_eq!(aggregate(&set(vec![]), 1), Err(ReportError::EmptyInput));
}

#[test]
fn network_std_is_sample_std() {
    let mut results = Vec::new();
    for (net, wins) in [("a", 1), ("b", 3)] {
        for i in 0..4 {
            let mut r = synthetic(if i < wins { Outcome::Success } else { Outcome::Failed }, vec![]);
            r.network_id = net.into();
            results.push(r);
        }
    }
    let report = aggregate(&set(results.clone()), 4).unwrap();
    assert_eq!(report.network_success.mean, Some(0.5));
    // Rates 0.25 and 0.75 around 0.5, one degree of freedom.
    assert!((report.network_success.std.unwrap() - (0.125f64).sqrt()).abs() < 1e-12);
    let report = aggregate(&set(results), 5).unwrap();
    assert_eq!(report.network_success.networks, 0);
    assert_eq!(report.network_success.mean, None);
}

#[test]
fn quantiles_interpolate() {
    let q = Quantiles::of(&[4.0, 1.0, 3.0, 2.0]).unwrap();
    assert_eq!((q.min, q.max, q.p50), (1.0, 4.0, 2.5));
    assert!((q.p25 - 1.75).abs() < 1e-12);
    assert!(Quantiles::of(&[]).is_none());
}

#[test]
fn empty_csv_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.csv");
    export(&set(vec![]), ExportFormat::Csv, &p).unwrap();
    let text = std::fs::read_to_string(p).unwrap();
    assert_eq!(text, format!("{}\n", CSV_COLUMNS.join(",")));
}

#[test]
fn csv_rows_match_columns() {
    let mut r = synthetic(Outcome::Failed, vec![stats(RttKind::ToRelay, 12.5)]);
    r.port_mappings = vec![Endpoint::new(HostAddr(0x0102_0304), 4001, Transport::Tcp)];
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.csv");
    export(&set(vec![r]), ExportFormat::Csv, &p).unwrap();
    let mut rd = csv::Reader::from_path(p).unwrap();
    let header = rd.headers().unwrap().clone();
    let row = rd.records().next().unwrap().unwrap();
    assert_eq!(row.len(), header.len());
    let get = |name: &str| row[header.iter().position(|h| h == name).unwrap()].to_string();
    assert_eq!(get("outcome"), "FAILED");
    assert_eq!(get("attempt_outcomes"), "FAILED");
    assert_eq!(get("to_relay_mean_ms"), "12.5");
    assert_eq!(get("port_mappings"), "1.2.3.4:4001/tcp");
    assert_eq!(get("transport_filter"), "QUIC");
}

#[test]
fn jsonl_round_trip() {
    let mut cfg = cone(30);
    cfg.port_mapping_prevalence = 0.5;
    cfg.accurate_rtt = false;
    cfg.latency.jitter_frac = 0.25;
    let rs = run_campaign(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.jsonl");
    export(&rs, ExportFormat::JsonLines, &p).unwrap();
    assert_eq!(import_jsonl(&p).unwrap(), rs);
    let text = std::fs::read_to_string(&p).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["scenario_digest"], cfg.digest());
    assert_eq!(first["trial"], 0);
    assert!(first["rtts"][0]["mtype"].is_string());

    let empty = dir.path().join("e.jsonl");
    export(&set(vec![]), ExportFormat::JsonLines, &empty).unwrap();
    let back = import_jsonl(&empty).unwrap();
    assert!(back.results.is_empty());
}

#[test]
fn scenario_validation() {
    let good = cone(10).to_json();
    assert!(ScenarioConfig::from_json(&good).is_ok());
    let with_extra = good.replacen("\"trials\"", "\"trails\": 1, \"trials\"", 1);
    assert!(matches!(
        ScenarioConfig::from_json(&with_extra),
        Err(CampaignError::Parse(_))
    ));
    let mut c = cone(10);
    c.schema = "punchsim/scenario/v0".into();
    assert!(c.validate().is_err());
    let mut c = cone(0);
    assert!(c.validate().is_err());
    c.trials = 1;
    c.nat_mix[0].weight = 0.0;
    assert!(c.validate().is_err());
    let mut c = cone(1);
    c.relay_position = [0.9, 0.1];
    assert!(c.validate().is_err());
    let mut c = cone(1);
    c.transport_filter_weights = TransportWeights {
        tcp: 0.0,
        quic: 0.0,
        any: 0.0,
    };
    assert!(c.validate().is_err());
}

#[test]
fn weights_are_normalized() {
    let cfg = base(
        1,
        vec![
            nat_entry(
                MappingBehavior::EndpointIndependent,
                FilteringBehavior::EndpointIndependent,
                3.0,
            ),
            nat_entry(
                MappingBehavior::AddressDependent,
                FilteringBehavior::AddressDependent,
                1.0,
            ),
        ],
    );
    let w: Vec<f64> = cfg.normalized_mix().iter().map(|(_, w)| *w).collect();
    assert_eq!(w, vec![0.75, 0.25]);
}

#[test]
fn presets_parse() {
    assert!(preset_names().contains(&"paper-like"));
    for name in preset_names() {
        let cfg = preset(name).unwrap();
        assert_eq!(cfg.name, name);
    }
    assert!(matches!(preset("nope"), Err(CampaignError::UnknownPreset(_))));
}

#[test]
fn relay_geometry_follows_position() {
    let mut cfg = cone(1);
    for f in [0.05, 0.3, 0.7, 0.95] {
        cfg.relay_position = [f, f];
        let r = run_trial(&cfg, 0);
        let pos = r.rtt(RttKind::ToRelay).unwrap().mean_us / r.rtt(RttKind::ToRemoteThroughRelay).unwrap().mean_us;
        assert!((pos - f).abs() < 1e-3, "{pos} vs {f}");
    }
}
