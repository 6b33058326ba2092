//! Gaussian obfuscation of client updates and the resulting (ε, δ) bound.
//!
//! Run with `cargo run --example privacy_budget`.

use fedchain::fl::{generate_synthetic, local_train, partition, ParamVector, TrainConfig, PARAM_DIM};
use fedchain::privacy::{epsilon_bound, obfuscate, sensitivity, PrivacyParams};
use fedchain::rng::rng_for;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = generate_synthetic(3_000, 21)?.dataset;
    let shards = partition(&data, 6, 0)?;
    let global = ParamVector::zeros(PARAM_DIM);
    let updates = shards
        .iter()
        .enumerate()
        .map(|(i, s)| {
            local_train(&i.to_string(), &global, s, &TrainConfig::default(), &mut rng_for(1, &[i as u64]))
                .map(|u| u.params)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let delta_sens = sensitivity(&updates)?;
    println!("sensitivity (largest pairwise L2 distance): {delta_sens:.4}\n");
    println!("{:>8} {:>10} {:>12}", "sigma", "epsilon", "noise norm");
    for sigma in [0.01, 0.05, 0.1, 0.5, 1.0] {
        let eps = epsilon_bound(&PrivacyParams { sigma, delta: 1e-5, sensitivity: delta_sens })?;
        let noisy = obfuscate(&updates[0], sigma, &mut rng_for(2, &[]))?;
        println!("{sigma:>8} {eps:>10.4} {:>12.4}", noisy.distance(&updates[0])?);
    }

    // σ = 0 leaves the update untouched.
    assert_eq!(obfuscate(&updates[0], 0.0, &mut rng_for(3, &[]))?, updates[0]);
    Ok(())
}
