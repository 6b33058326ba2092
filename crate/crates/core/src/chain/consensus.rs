use rand_distr::{Distribution, Exp};

use super::{canonical_bytes, BlockBody, BlockHeader, Digest, MAX_POW_BITS, NONCE_OFFSET};
use crate::error::{Error, Result};
use crate::rng::{label, rng_for, SimRng};

pub fn leading_zero_bits(d: &Digest) -> u32 {
    let mut bits = 0;
    for byte in d.0 {
        if byte == 0 {
            bits += 8;
        } else {
            bits += byte.leading_zeros();
            break;
        }
    }
    bits
}

/// Smallest nonce, scanning up from 0, whose block hash has at least
/// `difficulty_bits` leading zero bits. The header's own nonce is ignored.
pub fn pow_mine(header: &BlockHeader, body: &BlockBody, difficulty_bits: u32) -> u64 {
    assert!(difficulty_bits <= MAX_POW_BITS, "difficulty {difficulty_bits} > {MAX_POW_BITS}");
    let mut bytes = canonical_bytes(header, body);
    let mut nonce = 0u64;
    loop {
        bytes[NONCE_OFFSET..NONCE_OFFSET + 8].copy_from_slice(&nonce.to_le_bytes());
        if leading_zero_bits(&Digest::of(&bytes)) >= difficulty_bits {
            return nonce;
        }
        nonce += 1;
    }
}

/// Exponentially distributed wait with the given mean.
pub fn poet_wait(rng: &mut SimRng, mean_ms: f64) -> Result<f64> {
    if !(mean_ms > 0.0 && mean_ms.is_finite()) {
        return Err(Error::InvalidArgument(format!("PoET mean wait {mean_ms} ms")));
    }
    let exp = Exp::new(1.0 / mean_ms).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(exp.sample(rng))
}

/// Outcome of a PoET election.
#[derive(Clone, Debug, PartialEq)]
pub struct PoetDraw {
    pub winner: String,
    pub wait_ms: f64,
}

/// Every member draws a wait; the shortest wait seals.
pub fn poet_elect(members: &[String], seed: u64, round: u64, mean_ms: f64) -> Result<PoetDraw> {
    let waits = members
        .iter()
        .map(|m| {
            let w = poet_wait(&mut rng_for(seed, &[0x90e7, round, label(m)]), mean_ms)?;
            Ok((m.clone(), w))
        })
        .collect::<Result<Vec<_>>>()?;
    shortest_wait(&waits).ok_or(Error::EmptyInput)
}

/// Argmin over `(member, wait)` pairs; equal waits go to the smaller id.
pub fn shortest_wait(waits: &[(String, f64)]) -> Option<PoetDraw> {
    waits
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)))
        .map(|(m, w)| PoetDraw { winner: m.clone(), wait_ms: *w })
}
