//! Two of ten clients scale their update by 100. The pairwise-distance and
//! 2-means filter removes exactly those two before aggregation.
//!
//! Run with `cargo run --example poisoning_defense`.

use fedchain::defense::{filter_updates, outlier_stats, FilterConfig, OutlierRule};
use fedchain::fl::{
    evaluate, fed_avg, generate_synthetic, inject_poison, local_train, partition, ParamVector, PoisonMode,
    TrainConfig, PARAM_DIM,
};
use fedchain::rng::rng_for;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = generate_synthetic(4_000, 11)?.dataset;
    let shards = partition(&data, 10, 5)?;
    let global = ParamVector::zeros(PARAM_DIM);
    let cfg = TrainConfig::default();
    let poisoners = [3usize, 7];

    let mut updates = Vec::new();
    for (i, shard) in shards.iter().enumerate() {
        let mut rng = rng_for(9, &[i as u64]);
        let mut u = local_train(&format!("dev-{i}"), &global, shard, &cfg, &mut rng)?;
        if poisoners.contains(&i) {
            u = inject_poison(&u, PoisonMode::Amplify(100.0), &mut rng)?;
        }
        updates.push(u);
    }

    let filter = FilterConfig {
        rule: OutlierRule { tau: 2.0, reference: Some(global.clone()) },
        ..FilterConfig::default()
    };
    let outcome = filter_updates(&updates, &filter)?;
    let params: Vec<ParamVector> = updates.iter().map(|u| u.params.clone()).collect();
    let stats = outlier_stats(&outcome.assignment, &params, &filter.rule)?;

    println!("largest pairwise distance {:.2}", outcome.distances.max());
    println!(
        "clusters of size {:?}, separation {:.2} vs spread {:.3} (tau {})",
        stats.sizes, stats.separation, stats.spread, filter.rule.tau
    );
    println!("excluded: {:?}", outcome.excluded);
    for (d, ev) in outcome.reputation_events() {
        println!("  {d}: {ev:?}");
    }

    let weights = |us: &[fedchain::fl::ClientUpdate]| us.iter().map(|_| 1.0).collect::<Vec<_>>();
    let naive = fed_avg(&updates, &weights(&updates))?;
    let filtered = fed_avg(&outcome.kept, &weights(&outcome.kept))?;
    println!("mse with every update: {:.2}", evaluate(&naive, &data)?);
    println!("mse after filtering:   {:.4}", evaluate(&filtered, &data)?);
    Ok(())
}
