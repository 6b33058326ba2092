use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, ParamVector, N_FEATURES, PARAM_DIM};
use crate::error::{Error, Result};
use crate::rng::SimRng;

/// A client's locally trained model as submitted to the aggregator.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub device_id: String,
    pub params: ParamVector,
    /// Mean squared error on the client's own shard after training.
    pub local_loss: f64,
    /// Simulated seconds spent training.
    pub train_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Rows per mini-batch; 0 means full batch.
    pub batch_size: usize,
    /// Simulated seconds to process one row for one epoch (forward + backward).
    pub sec_per_sample: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 20, lr: 0.0025, batch_size: 0, sec_per_sample: 3e-4 }
    }
}

fn check_model(params: &ParamVector) -> Result<()> {
    if params.dim() != PARAM_DIM {
        return Err(Error::DimensionMismatch { expected: PARAM_DIM, found: params.dim() });
    }
    Ok(())
}

#[inline]
fn predict(w: &[f64], x: &[f64]) -> f64 {
    x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + w[N_FEATURES]
}

/// Mean squared error of the linear model on `dataset`.
pub fn evaluate(params: &ParamVector, dataset: &Dataset) -> Result<f64> {
    check_model(params)?;
    let w = params.as_slice();
    let sse: f64 = (0..dataset.rows())
        .map(|i| {
            let r = predict(w, dataset.row(i)) - dataset.target(i);
            r * r
        })
        .sum();
    Ok(sse / dataset.rows() as f64)
}

fn accumulate_gradient(w: &[f64], dataset: &Dataset, rows: &[usize], grad: &mut [f64]) {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let scale = 2.0 / rows.len() as f64;
    for &i in rows {
        let x = dataset.row(i);
        let r = scale * (predict(w, x) - dataset.target(i));
        for (g, xi) in grad.iter_mut().zip(x) {
            *g += r * xi;
        }
        grad[N_FEATURES] += r;
    }
}

/// Analytic gradient of the MSE over the whole dataset.
pub fn gradient(params: &ParamVector, dataset: &Dataset) -> Result<ParamVector> {
    check_model(params)?;
    let rows: Vec<usize> = (0..dataset.rows()).collect();
    let mut grad = vec![0.0; PARAM_DIM];
    accumulate_gradient(params.as_slice(), dataset, &rows, &mut grad);
    Ok(ParamVector::new(grad))
}

/// Mini-batch gradient descent on the shard, starting from `global`.
pub fn local_train(
    device_id: &str,
    global: &ParamVector,
    shard: &Dataset,
    cfg: &TrainConfig,
    rng: &mut SimRng,
) -> Result<ClientUpdate> {
    check_model(global)?;
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {}", cfg.lr)));
    }
    let n = shard.rows();
    let batch = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
    let mut w = global.as_slice().to_vec();
    let mut grad = vec![0.0; PARAM_DIM];
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for rows in order.chunks(batch) {
            accumulate_gradient(&w, shard, rows, &mut grad);
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= cfg.lr * gi;
            }
        }
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalDivergence { epoch });
        }
    }
    let params = ParamVector::new(w);
    let local_loss = evaluate(&params, shard)?;
    if !local_loss.is_finite() {
        return Err(Error::NumericalDivergence { epoch: cfg.epochs });
    }
    Ok(ClientUpdate {
        device_id: device_id.to_owned(),
        params,
        local_loss,
        train_time: cfg.epochs as f64 * n as f64 * cfg.sec_per_sample,
    })
}

/// Weighted element-wise mean of the updates' parameters.
pub fn fed_avg(updates: &[ClientUpdate], weights: &[f64]) -> Result<ParamVector> {
    let first = updates.first().ok_or(Error::EmptyInput)?;
    if weights.len() != updates.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} updates",
            weights.len(),
            updates.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("weights sum to zero".into()));
    }
    let dim = first.params.dim();
    let mut acc = vec![0.0; dim];
    for (u, w) in updates.iter().zip(weights) {
        first.params.check_dim(u.params.dim())?;
        let w = w / total;
        for (a, v) in acc.iter_mut().zip(u.params.as_slice()) {
            *a += w * v;
        }
    }
    Ok(ParamVector::new(acc))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PoisonMode {
    /// Multiply every parameter by the factor.
    Amplify(f64),
    /// Add independent uniform noise on `[-scale, scale]` to every parameter.
    RandomNoise(f64),
}

impl PoisonMode {
    pub fn magnitude(&self) -> f64 {
        match *self {
            PoisonMode::Amplify(f) | PoisonMode::RandomNoise(f) => f,
        }
    }
}

pub fn inject_poison(update: &ClientUpdate, mode: PoisonMode, rng: &mut SimRng) -> Result<ClientUpdate> {
    let m = mode.magnitude();
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::InvalidArgument(format!("poison magnitude {m}")));
    }
    let mut out = update.clone();
    match mode {
        PoisonMode::Amplify(f) => out.params.as_mut_slice().iter_mut().for_each(|v| *v *= f),
        PoisonMode::RandomNoise(s) => {
            out.params.as_mut_slice().iter_mut().for_each(|v| *v += rng.random_range(-s..=s))
        }
    }
    Ok(out)
}

/// Adds `N(0, (level/100 · sd(y))²)` noise to the targets, i.e. `level` is
/// the noise standard deviation as a percentage of the target spread.
pub fn add_target_noise(dataset: &mut Dataset, level: f64, rng: &mut SimRng) -> Result<()> {
    if !(level >= 0.0 && level.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise level {level}")));
    }
    if level == 0.0 {
        return Ok(());
    }
    let y = dataset.targets();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    let normal = Normal::new(0.0, level / 100.0 * sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for t in dataset.targets_mut() {
        *t += normal.sample(rng);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::generate_synthetic;
    use crate::rng::rng_for;

    fn update(id: &str, v: Vec<f64>) -> ClientUpdate {
        ClientUpdate { device_id: id.into(), params: ParamVector::new(v), local_loss: 0.0, train_time: 0.0 }
    }

    #[test]
    fn zero_epochs_returns_global() {
        let ds = generate_synthetic(40, 1).unwrap().dataset;
        let g = ParamVector::new(vec![0.3; PARAM_DIM]);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let u = local_train("d", &g, &ds, &cfg, &mut rng_for(0, &[])).unwrap();
        assert_eq!(u.params, g);
        assert_eq!(u.train_time, 0.0);
    }

    #[test]
    fn training_reduces_loss() {
        let ds = crate::fl::generate_synthetic_with_noise(200, 0.0, 2).unwrap().dataset;
        let g = ParamVector::zeros(PARAM_DIM);
        let before = evaluate(&g, &ds).unwrap();
        let u = local_train("d", &g, &ds, &TrainConfig::default(), &mut rng_for(0, &[])).unwrap();
        assert!(u.local_loss < before);
        assert!(u.train_time > 0.0);
    }

    #[test]
    fn huge_lr_diverges() {
        let ds = generate_synthetic(100, 1).unwrap().dataset;
        let cfg = TrainConfig { epochs: 200, lr: 50.0, batch_size: 0, ..TrainConfig::default() };
        let r = local_train("d", &ParamVector::zeros(PARAM_DIM), &ds, &cfg, &mut rng_for(0, &[]));
        assert!(matches!(r, Err(Error::NumericalDivergence { .. })));
    }

    #[test]
    fn rejects_non_positive_lr() {
        let ds = generate_synthetic(10, 1).unwrap().dataset;
        let cfg = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        let r = local_train("d", &ParamVector::zeros(PARAM_DIM), &ds, &cfg, &mut rng_for(0, &[]));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn fed_avg_midpoint_and_identity() {
        let a = update("a", vec![0.0, 0.0]);
        let b = update("b", vec![2.0, 4.0]);
        assert_eq!(fed_avg(&[a.clone(), b], &[1.0, 1.0]).unwrap().as_slice(), &[1.0, 2.0]);
        assert_eq!(fed_avg(std::slice::from_ref(&a), &[3.0]).unwrap(), a.params);
    }

    #[test]
    fn fed_avg_errors() {
        assert!(matches!(fed_avg(&[], &[]), Err(Error::EmptyInput)));
        let a = update("a", vec![0.0, 0.0]);
        let b = update("b", vec![1.0]);
        assert!(matches!(fed_avg(&[a.clone(), b], &[1.0, 1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(fed_avg(std::slice::from_ref(&a), &[0.0]).is_err());
        assert!(fed_avg(&[a], &[-1.0]).is_err());
    }

    #[test]
    fn amplify() {
        let u = update("p", vec![1.0, -2.0]);
        let mut rng = rng_for(0, &[]);
        assert_eq!(inject_poison(&u, PoisonMode::Amplify(1.0), &mut rng).unwrap(), u);
        let p = inject_poison(&u, PoisonMode::Amplify(100.0), &mut rng).unwrap();
        assert_eq!(p.params.as_slice(), &[100.0, -200.0]);
        assert_eq!(p.device_id, "p");
        assert!(inject_poison(&u, PoisonMode::Amplify(0.0), &mut rng).is_err());
    }

    #[test]
    fn uniform_noise_moments() {
        let s = 3.0;
        let u = update("p", vec![0.0; 10_000]);
        let p = inject_poison(&u, PoisonMode::RandomNoise(s), &mut rng_for(5, &[])).unwrap();
        let v = p.params.as_slice();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        let expected = s / 3f64.sqrt();
        assert!((sd - expected).abs() / expected < 0.05, "sd {sd} vs {expected}");
    }

    #[test]
    fn zero_params_loss_is_mean_square_target() {
        let ds = generate_synthetic(64, 4).unwrap().dataset;
        let direct = ds.targets().iter().map(|y| y * y).sum::<f64>() / 64.0;
        let l = evaluate(&ParamVector::zeros(PARAM_DIM), &ds).unwrap();
        assert!((l - direct).abs() < 1e-12);
    }

    #[test]
    fn evaluate_rejects_wrong_dim() {
        let ds = generate_synthetic(10, 4).unwrap().dataset;
        assert!(matches!(evaluate(&ParamVector::zeros(3), &ds), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn target_noise_level_zero_is_noop() {
        let mut ds = generate_synthetic(50, 4).unwrap().dataset;
        let orig = ds.clone();
        add_target_noise(&mut ds, 0.0, &mut rng_for(1, &[])).unwrap();
        assert_eq!(ds, orig);
        add_target_noise(&mut ds, 20.0, &mut rng_for(1, &[])).unwrap();
        assert_ne!(ds, orig);
    }
}
