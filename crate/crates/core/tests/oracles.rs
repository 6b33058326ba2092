//! Numeric checks against independent reference computations.

use sha2::{Digest as _, Sha256};

use fedchain::chain::model_digest;
use fedchain::defense::{kmeans2, pairwise_distances};
use fedchain::fl::{
    evaluate, generate_synthetic, generate_synthetic_with_noise, gradient, local_train, Dataset, ParamVector,
    TrainConfig, N_FEATURES, PARAM_DIM,
};
use fedchain::registry::derive_token;
use fedchain::rng::rng_for;
use rand::Rng;

/// Design matrix row with the bias column appended.
fn aug(d: &Dataset, i: usize) -> Vec<f64> {
    let mut r = d.row(i).to_vec();
    r.push(1.0);
    r
}

/// `2/n XᵀX` and `2/n Xᵀy` over the augmented design.
fn normal_system(d: &Dataset) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = d.rows() as f64;
    let mut a = vec![vec![0.0; PARAM_DIM]; PARAM_DIM];
    let mut b = vec![0.0; PARAM_DIM];
    for i in 0..d.rows() {
        let x = aug(d, i);
        for r in 0..PARAM_DIM {
            b[r] += 2.0 * x[r] * d.target(i) / n;
            for c in 0..PARAM_DIM {
                a[r][c] += 2.0 * x[r] * x[c] / n;
            }
        }
    }
    (a, b)
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            let (top, bottom) = a.split_at_mut(row);
            for (x, p) in bottom[0][col..].iter_mut().zip(&top[col][col..]) {
                *x -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

fn power_iteration(a: &[Vec<f64>]) -> f64 {
    let mut v = vec![1.0; a.len()];
    let mut lambda = 0.0;
    for _ in 0..2000 {
        let w: Vec<f64> = a.iter().map(|r| r.iter().zip(&v).map(|(x, y)| x * y).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        lambda = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

fn full_batch(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig { epochs, lr, batch_size: 0, ..TrainConfig::default() }
}

#[test]
fn gradient_matches_central_differences() {
    let data = generate_synthetic(200, 3).unwrap().dataset;
    let mut rng = rng_for(9, &[]);
    for _ in 0..5 {
        let w: Vec<f64> = (0..PARAM_DIM).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = gradient(&ParamVector::new(w.clone()), &data).unwrap();
        for k in 0..PARAM_DIM {
            let h = 1e-5;
            let mut up = w.clone();
            let mut dn = w.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (evaluate(&ParamVector::new(up), &data).unwrap()
                - evaluate(&ParamVector::new(dn), &data).unwrap())
                / (2.0 * h);
            let an = g.as_slice()[k];
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "coord {k}: fd {fd} vs {an}");
        }
    }
}

#[test]
fn gradient_descent_recovers_least_squares() {
    let synth = generate_synthetic_with_noise(500, 0.0, 5).unwrap();
    let (a, b) = normal_system(&synth.dataset);
    let ols = solve(a, b);
    let fit = local_train(
        "x",
        &ParamVector::zeros(PARAM_DIM),
        &synth.dataset,
        &full_batch(400, 0.1),
        &mut rng_for(0, &[]),
    )
    .unwrap();
    for (k, o) in ols.iter().enumerate() {
        assert!((fit.params.as_slice()[k] - o).abs() < 1e-8, "coord {k}");
        assert!((o - synth.true_params.as_slice()[k]).abs() < 1e-9);
    }
}

#[test]
fn descent_below_curvature_limit() {
    let data = generate_synthetic(400, 11).unwrap().dataset;
    let lambda = power_iteration(&normal_system(&data).0);
    let mut w = ParamVector::zeros(PARAM_DIM);
    let mut loss = evaluate(&w, &data).unwrap();
    for _ in 0..50 {
        w = local_train("x", &w, &data, &full_batch(1, 1.9 / lambda), &mut rng_for(0, &[])).unwrap().params;
        let next = evaluate(&w, &data).unwrap();
        assert!(next <= loss, "{next} > {loss}");
        loss = next;
    }

    // Past the limit the top eigen-direction grows.
    let mut w = ParamVector::zeros(PARAM_DIM);
    let start = evaluate(&w, &data).unwrap();
    for _ in 0..200 {
        match local_train("x", &w, &data, &full_batch(1, 2.2 / lambda), &mut rng_for(0, &[])) {
            Ok(u) => w = u.params,
            Err(_) => return,
        }
    }
    assert!(evaluate(&w, &data).unwrap() > start);
}

#[test]
fn distances_match_brute_force() {
    let mut rng = rng_for(4, &[]);
    let ps: Vec<ParamVector> =
        (0..9).map(|_| ParamVector::new((0..7).map(|_| rng.random_range(-5.0..5.0)).collect())).collect();
    let m = pairwise_distances(&ps).unwrap();
    for i in 0..ps.len() {
        for j in 0..ps.len() {
            let d = ps[i]
                .as_slice()
                .iter()
                .zip(ps[j].as_slice())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((m.get(i, j) - d).abs() < 1e-12);
        }
    }
}

fn sse(ps: &[ParamVector], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for c in 0..2 {
        let members: Vec<&ParamVector> =
            ps.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
        if members.is_empty() {
            continue;
        }
        let dim = members[0].dim();
        let mean: Vec<f64> = (0..dim)
            .map(|k| members.iter().map(|p| p.as_slice()[k]).sum::<f64>() / members.len() as f64)
            .collect();
        total += members
            .iter()
            .map(|p| p.as_slice().iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>();
    }
    total
}

#[test]
fn kmeans_finds_optimal_split_of_separated_groups() {
    for seed in 0..20u64 {
        let mut rng = rng_for(seed, &[1]);
        let n = rng.random_range(4..11);
        let far = rng.random_range(1..n / 2 + 1);
        let ps: Vec<ParamVector> = (0..n)
            .map(|i| {
                let shift = if i < far { 50.0 } else { 0.0 };
                ParamVector::new((0..3).map(|_| shift + rng.random_range(-1.0..1.0)).collect())
            })
            .collect();
        let best = (1..1u32 << (n - 1))
            .map(|mask| {
                let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
                sse(&ps, &labels)
            })
            .fold(f64::INFINITY, f64::min);
        let km = kmeans2(&ps, seed, 100).unwrap();
        assert!((sse(&ps, &km.labels) - best).abs() <= 1e-9 * best.max(1.0), "seed {seed}");
    }
}

#[test]
fn kmeans_result_is_a_lloyd_fixed_point() {
    let mut rng = rng_for(8, &[]);
    let ps: Vec<ParamVector> =
        (0..12).map(|_| ParamVector::new((0..4).map(|_| rng.random_range(-3.0..3.0)).collect())).collect();
    let km = kmeans2(&ps, 2, 500).unwrap();
    for (p, &l) in ps.iter().zip(&km.labels) {
        let own = p.distance(&km.centroids[l]).unwrap();
        let other = p.distance(&km.centroids[1 - l]).unwrap();
        assert!(own <= other + 1e-12);
    }
}

#[test]
fn token_is_sha256_of_seed_and_id() {
    for (id, seed) in [("dev-01", 0u64), ("édge", 42), ("", u64::MAX)] {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(id.as_bytes());
        assert_eq!(derive_token(id, seed).0, <[u8; 32]>::from(h.finalize()));
    }
}

#[test]
fn model_digest_hashes_length_prefixed_le_floats() {
    let p = ParamVector::new((0..PARAM_DIM).map(|i| i as f64 * 0.25 - 1.0).collect());
    let mut h = Sha256::new();
    h.update((PARAM_DIM as u64).to_le_bytes());
    for v in p.as_slice() {
        h.update(v.to_le_bytes());
    }
    assert_eq!(model_digest(&p).0, <[u8; 32]>::from(h.finalize()));
    assert_eq!(N_FEATURES + 1, p.dim());
}
