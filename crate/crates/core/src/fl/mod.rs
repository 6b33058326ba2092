//! Federated learning core: datasets, the linear regression model, local
//! training, FedAvg aggregation and adversarial update injection.
//!
//! The model is linear regression over [`N_FEATURES`] inputs plus a bias, so a
//! [`ParamVector`] has [`PARAM_DIM`] entries laid out as `[w_0, .., w_9, b]`.

mod data;
mod train;

pub use data::{
    generate_synthetic, generate_synthetic_with_noise, load_turbofan, parse_turbofan, partition,
    split_holdout, Dataset, SyntheticData, TURBOFAN_FEATURE_COLUMNS,
};
pub use train::{
    add_target_noise, evaluate, fed_avg, gradient, inject_poison, local_train, ClientUpdate, PoisonMode,
    TrainConfig,
};

use std::fmt;

use crate::error::{Error, Result};

pub const N_FEATURES: usize = 10;
pub const PARAM_DIM: usize = N_FEATURES + 1;

/// Flat parameter vector exchanged between clients and the aggregator.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Euclidean distance; errors when dimensions differ.
    pub fn distance(&self, other: &ParamVector) -> Result<f64> {
        self.check_dim(other.dim())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }

    pub(crate) fn check_dim(&self, found: usize) -> Result<()> {
        if self.dim() != found {
            return Err(Error::DimensionMismatch { expected: self.dim(), found });
        }
        Ok(())
    }

    /// Little-endian u64 length followed by little-endian f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.0.len());
        out.extend_from_slice(&(self.0.len() as u64).to_le_bytes());
        for v in &self.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidArgument(format!("param vector bytes: {m}"));
        let len_bytes: [u8; 8] =
            bytes.get(..8).ok_or_else(|| bad("missing length prefix"))?.try_into().expect("slice of 8");
        let len = u64::from_le_bytes(len_bytes) as usize;
        let body = &bytes[8..];
        if body.len() != len.saturating_mul(8) {
            return Err(bad("length prefix does not match payload"));
        }
        let values =
            body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
        Ok(ParamVector(values))
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

impl fmt::Display for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.4}")?;
        }
        write!(f, "]")
    }
}
