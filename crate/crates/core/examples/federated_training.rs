//! Plain FedAvg over local gradient descent, without any of the defenses.
//!
//! With no argument it trains on synthetic data. Pass a CMAPSS training file
//! (e.g. `train_FD001.txt`) to predict remaining useful life instead:
//!
//! ```text
//! cargo run --release --example federated_training -- path/to/train_FD001.txt
//! ```

use fedchain::fl::{
    evaluate, fed_avg, generate_synthetic, load_turbofan, local_train, partition, split_holdout, ParamVector,
    TrainConfig, PARAM_DIM,
};
use fedchain::rng::rng_for;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (data, truth) = match std::env::args().nth(1) {
        Some(path) => (load_turbofan(path)?, None),
        None => {
            let s = generate_synthetic(8_000, 3)?;
            (s.dataset, Some(s.true_params))
        }
    };
    let (train, test) = split_holdout(&data, 0.2, 1)?;
    let shards = partition(&train, 8, 2)?;
    let cfg = TrainConfig { epochs: 5, lr: 0.01, ..TrainConfig::default() };
    println!("{} training rows over {} clients, {} test rows", train.rows(), shards.len(), test.rows());

    let mut global = ParamVector::zeros(PARAM_DIM);
    for round in 1..=25u64 {
        let updates = shards
            .iter()
            .enumerate()
            .map(|(i, shard)| {
                let mut rng = rng_for(42, &[round, i as u64]);
                local_train(&format!("client-{i}"), &global, shard, &cfg, &mut rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let weights: Vec<f64> = shards.iter().map(|s| s.rows() as f64).collect();
        global = fed_avg(&updates, &weights)?;
        if round % 5 == 0 || round == 1 {
            println!("round {round:>2}  test mse {:.4}", evaluate(&global, &test)?);
        }
    }
    if let Some(t) = truth {
        println!("distance to generating parameters: {:.4}", global.distance(&t)?);
    }
    Ok(())
}
