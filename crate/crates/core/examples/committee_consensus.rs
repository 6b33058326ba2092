//! Reputation-driven committee rotation and median CC-scores.
//!
//! Run with `cargo run --example committee_consensus`.

use std::collections::BTreeMap;

use fedchain::fl::{
    evaluate, generate_synthetic, inject_poison, local_train, partition, ParamVector, PoisonMode,
    TrainConfig, PARAM_DIM,
};
use fedchain::reputation::{
    committee_validate, loss_to_score, median, select_committee, Committee, ReputationConfig,
    ReputationEvent, ReputationLedger,
};
use fedchain::rng::rng_for;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ids: Vec<String> = (0..8).map(|i| format!("node-{i}")).collect();
    let data = generate_synthetic(4_000, 4)?.dataset;
    let shards: BTreeMap<String, _> = ids.iter().cloned().zip(partition(&data, ids.len(), 4)?).collect();
    let mut ledger = ReputationLedger::new(ReputationConfig::default());
    for id in &ids {
        ledger.register(id);
        ledger.apply_event(id, ReputationEvent::Interested, 0)?;
    }

    let mut global = ParamVector::zeros(PARAM_DIM);
    let mut prev = Committee::default();
    for round in 1..=4u64 {
        let committee = select_committee(&ledger, &ids, 3, &prev, round)?;
        let baseline: Vec<f64> = committee
            .members
            .iter()
            .map(|m| evaluate(&global, &shards[m]).map(loss_to_score))
            .collect::<Result<_, _>>()?;
        let floor = 0.5 * median(&baseline).unwrap_or(0.0);
        println!("round {round}: committee {:?}, floor {floor:.4}", committee.members);

        let mut accepted = Vec::new();
        for id in ids.iter().filter(|d| !committee.contains(d)) {
            let mut rng = rng_for(5, &[round, accepted.len() as u64]);
            let mut u = local_train(id, &global, &shards[id], &TrainConfig::default(), &mut rng)?;
            if id == "node-6" {
                u = inject_poison(&u, PoisonMode::RandomNoise(5.0), &mut rng)?;
            }
            let cc = committee_validate(&committee, &u, &shards, floor)?;
            let score = ledger.apply_event(id, cc.event(), round)?;
            println!(
                "  {id}: members {:?} -> cc {:.4} {} (reputation {score})",
                cc.per_member.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>(),
                cc.score,
                if cc.accepted { "accepted" } else { "rejected" }
            );
            if cc.accepted {
                accepted.push(u);
            }
        }
        let w = vec![1.0; accepted.len()];
        global = fedchain::fl::fed_avg(&accepted, &w)?;
        prev = committee;
    }
    println!("\nfinal scores: {:?}", ledger.scores());
    assert_eq!(ledger.replay(), *ledger.scores());
    Ok(())
}
