use std::collections::{BTreeSet, HashSet};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use fedchain::chain::{
    export_csv, import_restore, verify_chain, BlockDraft, Chain, ChainPolicy, ConsensusKind, Digest, PoetDraw,
};
use fedchain::defense::{
    filter_updates, kmeans2, select_outlier_cluster, ClusterAssignment, FilterConfig, OutlierRule,
};
use fedchain::fl::{fed_avg, ClientUpdate, ParamVector};
use fedchain::privacy::{epsilon_bound, sensitivity, PrivacyParams};
use fedchain::registry::{check_eligibility, derive_token, EligibilityPolicy, PowerSource, ResourceProfile};
use fedchain::reputation::{
    median, select_committee, Committee, ReputationConfig, ReputationEvent, ReputationLedger,
};
use fedchain::rng::rng_for;

fn update(id: usize, v: Vec<f64>) -> ClientUpdate {
    ClientUpdate {
        device_id: format!("d{id}"),
        params: ParamVector::new(v),
        local_loss: 0.0,
        train_time: 0.0,
    }
}

fn vectors(n: std::ops::Range<usize>, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-100.0f64..100.0, dim), n)
}

#[test]
fn tokens_are_injective_over_ten_thousand_ids() {
    let mut rng = rng_for(1, &[]);
    let mut ids = BTreeSet::new();
    while ids.len() < 10_000 {
        let len = rng.random_range(1..24);
        ids.insert((0..len).map(|_| rng.random_range(b'!'..=b'~') as char).collect::<String>());
    }
    let mut seen = HashSet::new();
    for id in &ids {
        assert_eq!(derive_token(id, 42), derive_token(id, 42));
        assert!(seen.insert(derive_token(id, 42)), "collision on {id}");
    }
}

fn profile() -> impl Strategy<Value = ResourceProfile> {
    (0.0f64..10.0, 0.0f64..100.0, any::<bool>(), 0.0f64..100.0, 0.0f64..4.0, 1u64..10_000, 0u64..2_000)
        .prop_map(|(disk, battery, unplugged, cpu, mem, sent, drop)| ResourceProfile {
            disk_free_gb: disk,
            battery_pct: battery,
            power: if unplugged { PowerSource::MobileUnplugged } else { PowerSource::Desktop },
            cpu_util_pct: cpu,
            virtual_mem_gb: mem,
            packets_sent: sent,
            packet_drop: drop.min(sent),
            ..ResourceProfile::default()
        })
}

fn chain(n: u64, policy: ChainPolicy) -> Chain {
    let draft = |r: u64| BlockDraft {
        round: r,
        sim_time_ms: 250 * r,
        participant_id: "p".into(),
        model_ref: Digest::of(&[r as u8; 3]),
        total_time_s: 0.5 + r as f64,
        cc_score: 0.3 + 0.01 * r as f64,
        poet: (policy.consensus == ConsensusKind::Poet)
            .then(|| PoetDraw { winner: "w".into(), wait_ms: r as f64 }),
    };
    let mut c = Chain::new("p", policy, draft(0)).unwrap();
    for r in 1..n {
        let b = c.seal(draft(r));
        c.validate_and_append(b).unwrap();
    }
    c
}

proptest! {
    #[test]
    fn improving_one_resource_never_rejects(p in profile(), field in 0usize..6, amount in 0.0f64..50.0) {
        let policy = EligibilityPolicy::default();
        let before = check_eligibility(&p, &policy);
        let mut q = p.clone();
        match field {
            0 => q.disk_free_gb += amount,
            1 => q.battery_pct = (q.battery_pct + amount).min(100.0),
            2 => q.cpu_util_pct = (q.cpu_util_pct - amount).max(0.0),
            3 => q.virtual_mem_gb += amount,
            4 => q.packet_drop = q.packet_drop.saturating_sub(amount as u64),
            _ => q.power = PowerSource::Desktop,
        }
        if before.is_eligible() {
            prop_assert!(check_eligibility(&q, &policy).is_eligible());
        }
        prop_assert_eq!(check_eligibility(&p, &policy), before);
    }

    #[test]
    fn fed_avg_ignores_order(vs in vectors(1..8, 5), seed in any::<u64>()) {
        let ups: Vec<ClientUpdate> = vs.into_iter().enumerate().map(|(i, v)| update(i, v)).collect();
        let mut shuffled = ups.clone();
        shuffled.shuffle(&mut rng_for(seed, &[]));
        let w = vec![1.0; ups.len()];
        let a = fed_avg(&ups, &w).unwrap();
        let b = fed_avg(&shuffled, &w).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn fed_avg_of_copies_is_identity(v in prop::collection::vec(-1e6f64..1e6, 11), k in 1usize..20) {
        let ups: Vec<ClientUpdate> = (0..k).map(|i| update(i, v.clone())).collect();
        let avg = fed_avg(&ups, &vec![1.0; k]).unwrap();
        for (x, y) in avg.as_slice().iter().zip(&v) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn sensitivity_symmetric_and_bounded(vs in vectors(2..9, 4)) {
        let ps: Vec<ParamVector> = vs.into_iter().map(ParamVector::new).collect();
        let s = sensitivity(&ps).unwrap();
        let mut rev = ps.clone();
        rev.reverse();
        prop_assert_eq!(s, sensitivity(&rev).unwrap());
        let max_norm = ps.iter().map(ParamVector::norm).fold(0.0, f64::max);
        prop_assert!(s <= 2.0 * max_norm * (1.0 + 1e-12));
        for a in &ps {
            for b in &ps {
                prop_assert!(a.distance(b).unwrap() <= s);
            }
        }
    }

    #[test]
    fn epsilon_monotone(sens in 0.01f64..10.0, sigma in 0.01f64..10.0, delta in 1e-9f64..0.5, f in 1.01f64..1.9) {
        let eps = |sensitivity, sigma, delta| epsilon_bound(&PrivacyParams { sigma, delta, sensitivity }).unwrap();
        let base = eps(sens, sigma, delta);
        prop_assert!(eps(sens, sigma * f, delta) < base);
        prop_assert!(eps(sens * f, sigma, delta) > base);
        prop_assert!(eps(sens, sigma, delta * f) < base);
    }

    #[test]
    fn filter_partitions_and_keeps_majority(vs in vectors(2..12, 3), seed in any::<u64>(), tau in 0.5f64..4.0) {
        let ups: Vec<ClientUpdate> = vs.into_iter().enumerate().map(|(i, v)| update(i, v)).collect();
        let cfg = FilterConfig { rule: OutlierRule { tau, reference: None }, kmeans_iters: 50, seed };
        let out = filter_updates(&ups, &cfg).unwrap();
        prop_assert!(out.excluded.len() <= ups.len().div_ceil(2));
        let kept: BTreeSet<&String> = out.kept.iter().map(|u| &u.device_id).collect();
        let excl: BTreeSet<&String> = out.excluded.iter().collect();
        prop_assert!(kept.is_disjoint(&excl));
        prop_assert_eq!(kept.len() + excl.len(), ups.len());
        prop_assert_eq!(filter_updates(&ups, &cfg).unwrap().excluded, out.excluded);
    }

    #[test]
    fn label_swap_keeps_excluded_set(vs in vectors(2..10, 3), seed in any::<u64>()) {
        let ps: Vec<ParamVector> = vs.into_iter().map(ParamVector::new).collect();
        let rule = OutlierRule::default();
        let a = kmeans2(&ps, seed, 50).unwrap();
        let b = a.swapped();
        let members = |asg: &ClusterAssignment, c: Option<usize>| -> BTreeSet<usize> {
            c.map(|c| asg.members(c).collect()).unwrap_or_default()
        };
        let ea = members(&a, select_outlier_cluster(&a, &ps, &rule).unwrap());
        let eb = members(&b, select_outlier_cluster(&b, &ps, &rule).unwrap());
        prop_assert_eq!(ea, eb);
    }

    #[test]
    fn median_resists_minority_corruption(
        honest in prop::collection::vec(0.0f64..1.0, 1..9),
        bad in prop::collection::vec(prop_oneof![Just(-1e12), Just(1e12), -10.0f64..10.0], 0..8),
    ) {
        let k = bad.len().min(honest.len().saturating_sub(1));
        let mut all = honest.clone();
        all.extend_from_slice(&bad[..k]);
        let m = median(&all).unwrap();
        let lo = honest.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = honest.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= m && m <= hi, "{} outside [{}, {}]", m, lo, hi);
    }

    #[test]
    fn ledger_replays_any_event_sequence(events in prop::collection::vec((0usize..4, 0usize..5), 0..200)) {
        let ids = ["a", "b", "c", "d"];
        let mut l = ReputationLedger::new(ReputationConfig::default());
        for id in ids {
            l.register(id);
        }
        for (round, (d, e)) in events.iter().enumerate() {
            let s = l.apply_event(ids[*d], ReputationEvent::ALL[*e], round as u64).unwrap();
            prop_assert!((0.0..=100.0).contains(&s));
        }
        prop_assert_eq!(&l.replay(), l.scores());
    }

    #[test]
    fn committee_is_pure_and_well_formed(
        steps in prop::collection::vec(0usize..30, 4..12),
        m in 1usize..4,
        prev_n in 0usize..3,
    ) {
        let ids: Vec<String> = (0..steps.len()).map(|i| format!("n{i:02}")).collect();
        let mut l = ReputationLedger::new(ReputationConfig::default());
        for (id, s) in ids.iter().zip(&steps) {
            l.register(id);
            for _ in 0..*s {
                l.apply_event(id, ReputationEvent::SuccessfulUpdate, 0).unwrap();
            }
        }
        let prev = Committee { members: ids[..prev_n].to_vec(), round: 0 };
        let c = select_committee(&l, &ids, m, &prev, 1).unwrap();
        prop_assert_eq!(&c, &select_committee(&l, &ids, m, &prev, 1).unwrap());
        prop_assert_eq!(c.members.len(), m);
        prop_assert_eq!(c.members.iter().collect::<BTreeSet<_>>().len(), m);
        if ids.len() - prev_n >= m {
            prop_assert!(c.members.iter().all(|x| !prev.contains(x)));
            let worst = c.members.iter().map(|x| l.score(x).unwrap()).fold(f64::INFINITY, f64::min);
            for id in ids.iter().filter(|x| !c.contains(x) && !prev.contains(x)) {
                prop_assert!(l.score(id).unwrap() <= worst);
            }
        }
    }

    #[test]
    fn tampering_is_reported_at_block_or_successor(
        n in 2u64..8, pick in any::<prop::sample::Index>(), byte in 0usize..32, bit in 0usize..8, field in 0usize..4,
    ) {
        let mut c = chain(n, ChainPolicy { consensus: ConsensusKind::Pow, pow_bits: 4 });
        let i = pick.index(c.len());
        let b = c.block_mut(i).unwrap();
        match field {
            0 => b.body.model_ref.0[byte] ^= 1 << bit,
            1 => b.body.cc_score = f64::from_bits(b.body.cc_score.to_bits() ^ (1 << (byte * 2 % 64))),
            2 => b.body.total_time_s = f64::from_bits(b.body.total_time_s.to_bits() ^ (1 << (byte + bit))),
            _ => b.hash.0[byte] ^= 1 << bit,
        }
        let err = verify_chain(&c).unwrap_err();
        prop_assert!(err.index() == i as u64 || err.index() == i as u64 + 1);
    }

    #[test]
    fn export_then_restore_is_identity(n in 1u64..6, poet in any::<bool>()) {
        let policy = ChainPolicy {
            consensus: if poet { ConsensusKind::Poet } else { ConsensusKind::Pow },
            // PoET chains carry no difficulty, so a restore reports zero bits.
            pow_bits: if poet { 0 } else { 4 },
        };
        let c = chain(n, policy);
        let dir = tempfile::tempdir().unwrap();
        export_csv(&c, dir.path()).unwrap();
        prop_assert_eq!(import_restore(dir.path()).unwrap(), c);
    }

    #[test]
    fn param_bytes_round_trip(v in prop::collection::vec(any::<f64>(), 0..20)) {
        let p = ParamVector::new(v);
        let q = ParamVector::from_bytes(&p.to_bytes()).unwrap();
        prop_assert_eq!(p.to_bytes(), q.to_bytes());
    }
}

#[test]
fn persistent_divergence_reaches_floor_in_bound() {
    let cfg = ReputationConfig::default();
    let bound = ((cfg.initial - cfg.participation_floor) / cfg.divergent_update.abs()).ceil() as usize;
    let mut l = ReputationLedger::new(cfg.clone());
    l.register("x");
    let mut rounds = 0;
    while l.score("x").unwrap() > cfg.participation_floor {
        l.apply_event("x", ReputationEvent::DivergentUpdate, rounds as u64).unwrap();
        rounds += 1;
    }
    assert_eq!(rounds, bound);
    l.apply_event("x", ReputationEvent::DivergentUpdate, 99).unwrap();
    assert!(!l.can_participate("x"));
}
