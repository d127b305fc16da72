use std::time::Duration;

use super::*;
use crate::campaign::{build_world, HostNames, PairSetup, PeerSetup, World};
use crate::nat::{FilteringBehavior as F, MappingBehavior as M, NatConfig};
use crate::netsim::{DelayModel, LinkModel};
use crate::rng::{stream_rng, Stream};

fn ms(v: u64) -> Duration {
    Duration::from_millis(v)
}

fn nat(m: M, f: F) -> NatConfig {
    NatConfig::new(m, f)
}

fn world(setup: &PairSetup) -> World {
    build_world(setup, &HostNames::default(), 1, 0).unwrap()
}

fn punch(setup: &PairSetup, opts: &PunchOptions) -> HolePunchResult {
    let mut w = world(setup);
    let mut rng = stream_rng(1, 0, Stream::Protocol);
    run_hole_punch(&mut w.engine, &w.initiator, &w.listener, w.relay, opts, &mut rng)
}

fn quic() -> PunchOptions {
    PunchOptions {
        transport_filter: TransportFilter::Quic,
        ..PunchOptions::default()
    }
}

fn tcp() -> PunchOptions {
    PunchOptions {
        transport_filter: TransportFilter::Tcp,
        ..PunchOptions::default()
    }
}

fn cone_pair() -> PairSetup {
    PairSetup::simple(
        PeerSetup::behind(nat(M::EndpointIndependent, F::AddressAndPortDependent), ms(2)),
        PeerSetup::behind(nat(M::EndpointIndependent, F::AddressAndPortDependent), ms(2)),
        ms(30),
        [ms(20), ms(25)],
    )
}

fn outcomes(r: &HolePunchResult) -> Vec<AttemptOutcome> {
    r.attempts.iter().map(|a| a.outcome).collect()
}

#[test]
fn wait_time_examples() {
    let t = |rtt, l, i| RefinedTiming {
        rtt_listener_initiator: ms(rtt),
        rtt_listener_nat: ms(l),
        rtt_initiator_nat: ms(i),
    };
    assert_eq!(compute_wait_time(&t(200, 40, 10), false), ms(100));
    assert_eq!(compute_wait_time(&t(200, 40, 10), true), ms(115));
    assert_eq!(compute_wait_time(&t(200, 0, 0), true), ms(100));
    // A large initiator-side NAT RTT cannot make the wait negative.
    assert_eq!(compute_wait_time(&t(10, 0, 50), true), Duration::ZERO);
    assert_eq!(compute_wait_time(&t(0, 0, 0), false), Duration::ZERO);
}

fn attempt(outcome: AttemptOutcome) -> HolePunchAttempt {
    HolePunchAttempt {
        index: 1,
        outcome,
        roles: AttemptRoles::Standard,
        method: PunchMethod::SimultaneousOpen,
        started_at: SimTime::ZERO,
        ended_at: SimTime::ZERO,
        timing_error_us: None,
    }
}

#[test]
fn classification_precedence() {
    let ok = [attempt(AttemptOutcome::Failed), attempt(AttemptOutcome::Success)];
    let failed = [attempt(AttemptOutcome::Failed)];
    let relayed = PunchTrace {
        relayed: true,
        stream_opened: true,
        ..PunchTrace::default()
    };
    let cases = [
        (
            PunchTrace {
                cancelled: true,
                attempts: &ok,
                ..relayed
            },
            Outcome::Cancelled,
        ),
        (
            PunchTrace {
                config_error: true,
                ..relayed
            },
            Outcome::Unknown,
        ),
        (
            PunchTrace {
                relayed: false,
                ..relayed
            },
            Outcome::NoConnection,
        ),
        (
            PunchTrace {
                attempts: &ok,
                ..relayed
            },
            Outcome::Success,
        ),
        (
            PunchTrace {
                attempts: &failed,
                ..relayed
            },
            Outcome::Failed,
        ),
        (
            PunchTrace {
                stream_opened: false,
                direct: true,
                ..relayed
            },
            Outcome::ConnectionReversed,
        ),
        (
            PunchTrace {
                stream_opened: false,
                ..relayed
            },
            Outcome::NoStream,
        ),
    ];
    for (trace, want) in cases {
        assert_eq!(classify_outcome(&trace), want, "{trace:?}");
    }
}

#[test]
fn outcome_strings() {
    let json = serde_json::to_string(&Outcome::ALL).unwrap();
    assert_eq!(
        json,
        r#"["UNKNOWN","NO_CONNECTION","NO_STREAM","CONNECTION_REVERSED","CANCELLED","FAILED","SUCCESS"]"#
    );
    for o in Outcome::ALL {
        assert_eq!(serde_json::to_string(&o).unwrap(), format!("\"{}\"", o.as_str()));
    }
    for o in AttemptOutcome::ALL {
        assert_eq!(serde_json::to_string(&o).unwrap(), format!("\"{}\"", o.as_str()));
    }
    assert_eq!(
        serde_json::to_string(&[
            RttKind::ToRelay,
            RttKind::ToRemoteThroughRelay,
            RttKind::ToRemoteAfterHolepunch
        ])
        .unwrap(),
        r#"["TO_RELAY","TO_REMOTE_THROUGH_RELAY","TO_REMOTE_AFTER_HOLEPUNCH"]"#
    );
}

#[test]
fn rtt_stats_use_unbiased_std() {
    let s = RttStats::from_samples(RttKind::ToRelay, vec![2, 4, 4, 4, 5, 5, 7, 9]).unwrap();
    assert_eq!(s.mean_us, 5.0);
    // Sum of squared deviations is 32 over 7 degrees of freedom.
    assert!((s.std_us - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
    assert_eq!(RttStats::from_samples(RttKind::ToRelay, vec![7]).unwrap().std_us, 0.0);
    assert!(RttStats::from_samples(RttKind::ToRelay, vec![]).is_none());
}

fn public_pair(core: LinkModel) -> PairSetup {
    let mut s = PairSetup::simple(PeerSetup::public(), PeerSetup::public(), ms(1), [ms(1), ms(1)]);
    s.core = core;
    s
}

fn direct_path(w: &World) -> RttPath {
    RttPath::Direct {
        local: w.listener.advertised[1],
        remote: w.initiator.advertised[1],
    }
}

#[test]
fn direct_rtt_on_constant_link() {
    let mut w = world(&public_pair(LinkModel::constant(ms(50), 10)));
    let path = direct_path(&w);
    let s = measure_rtt(
        &mut w.engine,
        w.listener.host,
        w.initiator.host,
        path,
        RttKind::ToRemoteAfterHolepunch,
        10,
    )
    .unwrap();
    assert_eq!(s.samples_us, vec![100_000; 10]);
    assert_eq!(s.std_us, 0.0);
}

#[test]
fn relayed_rtt_is_twice_the_legs() {
    let setup = PairSetup::simple(
        PeerSetup::behind(NatConfig::default(), Duration::ZERO),
        PeerSetup::behind(NatConfig::default(), Duration::ZERO),
        ms(10),
        [ms(30), ms(70)],
    );
    let mut w = world(&setup);
    let relay = w.relay;
    let s = measure_rtt(
        &mut w.engine,
        w.listener.host,
        w.initiator.host,
        RttPath::Relayed { relay },
        RttKind::ToRemoteThroughRelay,
        3,
    )
    .unwrap();
    assert_eq!(s.mean_ms(), 200.0);
}

#[test]
fn jittered_rtt_variance_matches_link_model() {
    // Each sample is the sum of two independent N(50, 5²) ms one-way delays,
    // so the per-sample RTT variance is 50 ms². The unbiased sample
    // variance of ten samples has standard error σ²·sqrt(2/9); averaging
    // 200 runs divides that by sqrt(200).
    let link = LinkModel::symmetric(DelayModel::normal(ms(50), ms(5)), 10);
    let mut w = world(&public_pair(link));
    let path = direct_path(&w);
    let runs = 200;
    let mut mean_var = 0.0;
    for _ in 0..runs {
        let s = measure_rtt(
            &mut w.engine,
            w.listener.host,
            w.initiator.host,
            path,
            RttKind::ToRemoteAfterHolepunch,
            10,
        )
        .unwrap();
        mean_var += s.std_ms().powi(2) / runs as f64;
    }
    let sigma2 = 2.0 * 25.0;
    let se = sigma2 * (2.0f64 / 9.0).sqrt() / (runs as f64).sqrt();
    assert!(
        (mean_var - sigma2).abs() < 3.0 * se,
        "{mean_var} vs {sigma2} ± {}",
        3.0 * se
    );
}

#[test]
fn all_pings_lost() {
    let mut w = world(&public_pair(LinkModel::constant(ms(50), 10).with_loss(1.0)));
    let path = direct_path(&w);
    let err = measure_rtt(
        &mut w.engine,
        w.listener.host,
        w.initiator.host,
        path,
        RttKind::ToRelay,
        5,
    )
    .unwrap_err();
    assert_eq!(err, DcutrError::AllSamplesLost);
    assert!(measure_rtt(
        &mut w.engine,
        w.listener.host,
        w.initiator.host,
        path,
        RttKind::ToRelay,
        11
    )
    .is_err());
}

fn mapped_listener_pair(lifetime: Duration) -> PairSetup {
    let mut s = cone_pair();
    s.listener.port_mapping = true;
    s.port_mapping_lifetime = lifetime;
    s
}

#[test]
fn reversal_reaches_port_forward() {
    let mut w = world(&mapped_listener_pair(Duration::from_secs(3600)));
    let adv = w.listener.advertised.clone();
    let r = try_connection_reversal(
        &mut w.engine,
        &w.initiator,
        &adv,
        TransportKind::Tcp,
        &PunchOptions::default(),
    );
    let Reversal::Established(conn) = r else {
        panic!("{r:?}")
    };
    assert_eq!(conn.client_side, w.initiator.host);
}

#[test]
fn reversal_without_dialable_address() {
    let mut w = world(&cone_pair());
    let r = try_connection_reversal(
        &mut w.engine,
        &w.initiator,
        &[],
        TransportKind::Quic,
        &PunchOptions::default(),
    );
    assert_eq!(r, Reversal::NotDialable);
}

#[test]
fn expired_port_mapping_is_not_dialable() {
    let mut w = world(&mapped_listener_pair(Duration::from_secs(1)));
    w.engine.run_until(SimTime::from_millis(2_000));
    let adv = w.listener.advertised.clone();
    let r = try_connection_reversal(
        &mut w.engine,
        &w.initiator,
        &adv,
        TransportKind::Quic,
        &PunchOptions::default(),
    );
    assert_eq!(r, Reversal::NotDialable);
}

#[test]
fn cone_pair_succeeds_first_try() {
    for opts in [quic(), tcp()] {
        let r = punch(&cone_pair(), &opts);
        assert_eq!(r.outcome, Outcome::Success, "{r:?}");
        assert_eq!(outcomes(&r), vec![AttemptOutcome::Success]);
        assert!(r.relay_closed);
        assert_eq!(r.client_nat, "EIM/APDF");
        assert_eq!(r.relay_id, "relay");
        for kind in [
            RttKind::ToRelay,
            RttKind::ToRemoteThroughRelay,
            RttKind::ToRemoteAfterHolepunch,
        ] {
            assert!(r.rtt(kind).is_some(), "{kind:?}");
        }
        // Relay legs 20 + 25 ms, core 30 ms, 2 ms local segments each side.
        assert_eq!(r.rtt(RttKind::ToRelay).unwrap().mean_ms(), 44.0);
        assert_eq!(r.rtt(RttKind::ToRemoteThroughRelay).unwrap().mean_ms(), 98.0);
        assert_eq!(r.rtt(RttKind::ToRemoteAfterHolepunch).unwrap().mean_ms(), 68.0);
    }
}

#[test]
fn any_prefers_quic() {
    assert_eq!(
        punch(&cone_pair(), &PunchOptions::default()).transport_used,
        Some(TransportKind::Quic)
    );
    let mut s = cone_pair();
    s.initiator.transports = [TransportKind::Tcp].into_iter().collect();
    assert_eq!(
        punch(&s, &PunchOptions::default()).transport_used,
        Some(TransportKind::Tcp)
    );
}

#[test]
fn signaling_bytes_within_budget() {
    let r = punch(&cone_pair(), &quic());
    // Negotiation plus a one-address CONNECT each way, and one SYNC.
    let connect = 4 + (ADDR_BYTES + 2) as u64;
    assert_eq!(
        r.signal_bytes.initiator_to_listener,
        NEGOTIATION_BYTES as u64 + connect + SYNC_BYTES as u64
    );
    assert_eq!(r.signal_bytes.listener_to_initiator, NEGOTIATION_BYTES as u64 + connect);
    let mut s = cone_pair();
    s.initiator.nat = Some(nat(M::AddressAndPortDependent, F::AddressAndPortDependent));
    let r = punch(&s, &tcp());
    assert_eq!(r.attempts.len(), 3);
    assert!(r.signal_bytes.max_direction() <= SIGNAL_BUDGET);
}

fn apdm_initiator_eim_listener() -> PairSetup {
    PairSetup::simple(
        PeerSetup::behind(nat(M::EndpointIndependent, F::EndpointIndependent), ms(2)),
        PeerSetup::behind(nat(M::AddressAndPortDependent, F::AddressAndPortDependent), ms(2)),
        ms(30),
        [ms(20), ms(25)],
    )
}

#[test]
fn role_alternation_rescues_second_attempt() {
    let opts = PunchOptions {
        alternate_roles: true,
        ..quic()
    };
    let r = punch(&apdm_initiator_eim_listener(), &opts);
    assert_eq!(outcomes(&r), vec![AttemptOutcome::Failed, AttemptOutcome::Success]);
    assert_eq!(r.attempts[1].roles, AttemptRoles::Alternated);
    assert_eq!(r.outcome, Outcome::Success);

    let r = punch(&apdm_initiator_eim_listener(), &quic());
    assert_eq!(outcomes(&r), vec![AttemptOutcome::Failed; 3]);
    assert_eq!(r.outcome, Outcome::Failed);
}

#[test]
fn unreachable_relay_means_no_connection() {
    let mut s = cone_pair();
    s.relay_listener = None;
    let r = punch(&s, &quic());
    assert_eq!(r.outcome, Outcome::NoConnection);
    assert!(r.attempts.is_empty());
    assert!(r.rtts.is_empty());
}

#[test]
fn no_common_transport_is_a_config_error() {
    let mut s = cone_pair();
    s.listener.transports = [TransportKind::Quic].into_iter().collect();
    let r = punch(&s, &tcp());
    assert_eq!(r.outcome, Outcome::Unknown);
    assert!(r.error.is_some());
}

#[test]
fn missing_protocol_support_means_no_stream() {
    let mut s = cone_pair();
    s.initiator.supports_dcutr = false;
    let r = punch(&s, &quic());
    assert_eq!(r.outcome, Outcome::NoStream);
    assert!(r.attempts.is_empty());
}

#[test]
fn reversal_preempts_punching() {
    let s = mapped_listener_pair(Duration::from_secs(3600));
    let r = punch(&s, &quic());
    assert_eq!(r.outcome, Outcome::ConnectionReversed);
    assert!(r.attempts.is_empty());
    assert_eq!(r.port_mappings.len(), 2);
    assert_eq!(r.signal_bytes, SignalBytes::default());

    let opts = PunchOptions {
        enable_reversal: false,
        ..quic()
    };
    assert_eq!(punch(&s, &opts).outcome, Outcome::Success);
}

/// Listener 20 ms from its NAT, initiator 5 ms, core 10 ms, NATs that
/// reset unsolicited SYNs. Half the RTT makes the initiator's SYN leave
/// 15 ms early and reach the listener's NAT 5 ms before the listener's own
/// SYN does.
fn skewed_rst_pair() -> PairSetup {
    let strict = NatConfig {
        rst_on_unsolicited_syn: true,
        ..nat(M::EndpointIndependent, F::AddressAndPortDependent)
    };
    PairSetup::simple(
        PeerSetup::behind(strict, ms(20)),
        PeerSetup::behind(strict, ms(5)),
        ms(10),
        [ms(15), ms(15)],
    )
}

fn single_shot_tcp() -> PunchOptions {
    PunchOptions {
        max_attempts: 1,
        retransmit_ms: vec![0],
        ..tcp()
    }
}

#[test]
fn refined_wait_removes_local_skew() {
    let r = punch(&skewed_rst_pair(), &single_shot_tcp());
    assert_eq!(r.attempts[0].timing_error_us, Some(-15_000));
    assert_eq!(r.outcome, Outcome::Failed);

    let opts = PunchOptions {
        refined_rtt: true,
        ..single_shot_tcp()
    };
    let r = punch(&skewed_rst_pair(), &opts);
    assert_eq!(r.attempts[0].timing_error_us, Some(0));
    assert_eq!(r.outcome, Outcome::Success);
}

#[test]
fn ttl_priming_opens_the_listener_nat_early() {
    let opts = PunchOptions {
        ttl_priming: true,
        ..single_shot_tcp()
    };
    let r = punch(&skewed_rst_pair(), &opts);
    assert_eq!(r.attempts[0].timing_error_us, Some(-15_000));
    assert_eq!(r.outcome, Outcome::Success);
}

#[test]
fn exhaustive_birthday_probe_always_collides() {
    let mut s = apdm_initiator_eim_listener();
    s.listener.nat = Some(nat(M::EndpointIndependent, F::AddressAndPortDependent));
    s.initiator.nat = Some(NatConfig {
        port_space: 512,
        ..nat(M::AddressAndPortDependent, F::AddressAndPortDependent)
    });
    let opts = PunchOptions {
        birthday: Some(BirthdayOptions {
            m_open: 200,
            k_probe: 512,
        }),
        max_attempts: 1,
        ..quic()
    };
    let r = punch(&s, &opts);
    assert_eq!(r.attempts[0].method, PunchMethod::Birthday);
    assert_eq!(r.outcome, Outcome::Success);
}

#[test]
fn birthday_is_skipped_between_cone_nats() {
    let opts = PunchOptions {
        birthday: Some(BirthdayOptions { m_open: 8, k_probe: 8 }),
        ..quic()
    };
    let r = punch(&cone_pair(), &opts);
    assert_eq!(r.attempts[0].method, PunchMethod::QuicPriming);
}

#[test]
fn same_seed_same_result() {
    let mut s = cone_pair();
    s.core = LinkModel::symmetric(DelayModel::normal(ms(30), ms(6)), 10);
    let a = punch(&s, &quic());
    let b = punch(&s, &quic());
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn invalid_options_rejected() {
    let bad = [
        PunchOptions {
            max_attempts: 0,
            ..PunchOptions::default()
        },
        PunchOptions {
            rtt_samples: 11,
            ..PunchOptions::default()
        },
        PunchOptions {
            retransmit_ms: vec![],
            ..PunchOptions::default()
        },
        PunchOptions {
            birthday: Some(BirthdayOptions { m_open: 0, k_probe: 1 }),
            ..PunchOptions::default()
        },
    ];
    for o in bad {
        assert!(o.validate().is_err(), "{o:?}");
    }
    let r: Result<PunchOptions, _> = serde_json::from_str(r#"{"max_atempts": 2}"#);
    assert!(r.is_err());
}
