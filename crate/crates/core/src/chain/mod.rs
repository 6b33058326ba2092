//! Per-participant local blockchains.
//!
//! # Canonical encoding
//!
//! A block hash is SHA-256 over this byte string, in order:
//!
//! | field            | encoding                                  |
//! |------------------|-------------------------------------------|
//! | tag              | ASCII `FCBLK1`                            |
//! | index            | u64 little-endian                         |
//! | prev_hash        | 32 raw bytes                              |
//! | round            | u64 little-endian                         |
//! | sim_time_ms      | u64 little-endian                         |
//! | nonce            | u64 little-endian                         |
//! | difficulty_bits  | u32 little-endian                         |
//! | poet_wait_ms     | decimal string                            |
//! | consensus        | u8 (0 = pow, 1 = poet)                    |
//! | sealer           | string                                    |
//! | participant_id   | string                                    |
//! | model_ref        | 32 raw bytes                              |
//! | total_time_s     | decimal string                            |
//! | block_size_mb    | decimal string                            |
//! | chain_size_mb    | decimal string                            |
//! | cc_score         | decimal string                            |
//!
//! Strings are a u32 little-endian byte length followed by UTF-8 bytes.
//! Decimal strings are the shortest representation that parses back to the
//! same `f64` (Rust's `Display`), so `-0` and `0` differ.

mod consensus;
mod export;

pub use consensus::{leading_zero_bits, poet_elect, poet_wait, pow_mine, shortest_wait, PoetDraw};
pub use export::{
    export_csv, export_models, import_restore, import_unverified, load_model, model_file_name,
    restore_from_metadata, CSV_HEADER,
};

use std::fmt;
use std::str::FromStr;

use sha2::{Digest as _, Sha256};

use crate::error::Error;
use crate::fl::ParamVector;

/// 32-byte SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn of(bytes: &[u8]) -> Digest {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Digest, Error> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)
            .map_err(|e| Error::InvalidArgument(format!("bad digest `{s}`: {e}")))?;
        Ok(Digest(out))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Content address of a serialized parameter vector.
pub fn model_digest(params: &ParamVector) -> Digest {
    Digest::of(&params.to_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConsensusKind {
    Pow,
    Poet,
}

impl ConsensusKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConsensusKind::Pow => "pow",
            ConsensusKind::Poet => "poet",
        }
    }

    fn code(&self) -> u8 {
        match self {
            ConsensusKind::Pow => 0,
            ConsensusKind::Poet => 1,
        }
    }
}

impl fmt::Display for ConsensusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for ConsensusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "pow" => Ok(ConsensusKind::Pow),
            "poet" => Ok(ConsensusKind::Poet),
            other => Err(Error::InvalidArgument(format!("unknown consensus `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockHeader {
    pub index: u64,
    pub prev_hash: Digest,
    /// Logical timestamp: the simulation round.
    pub round: u64,
    /// Simulated clock in milliseconds since the start of the run.
    pub sim_time_ms: u64,
    pub nonce: u64,
    pub difficulty_bits: u32,
    pub poet_wait_ms: f64,
    pub consensus: ConsensusKind,
    /// Device that sealed the block (PoET winner, or the miner).
    pub sealer: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockBody {
    pub participant_id: String,
    pub model_ref: Digest,
    pub total_time_s: f64,
    pub block_size_mb: f64,
    pub chain_size_mb: f64,
    pub cc_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub header: BlockHeader,
    pub body: BlockBody,
    pub hash: Digest,
}

/// Accounting size of block `n`, in MB.
pub fn block_size_mb(n: u64) -> f64 {
    0.03 + 0.01 * n as f64
}

/// Accounting size of the FL chain after block `n`, in MB.
pub fn chain_size_mb(n: u64) -> f64 {
    5.5 + 0.01 * n as f64
}

const ACCOUNTING_TOLERANCE: f64 = 1e-12;
const NONCE_OFFSET: usize = 6 + 8 + 32 + 8 + 8;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    put_str(out, &v.to_string());
}

/// Canonical byte encoding used for hashing.
pub fn canonical_bytes(header: &BlockHeader, body: &BlockBody) -> Vec<u8> {
    let mut out = Vec::with_capacity(256);
    out.extend_from_slice(b"FCBLK1");
    out.extend_from_slice(&header.index.to_le_bytes());
    out.extend_from_slice(&header.prev_hash.0);
    out.extend_from_slice(&header.round.to_le_bytes());
    out.extend_from_slice(&header.sim_time_ms.to_le_bytes());
    debug_assert_eq!(out.len(), NONCE_OFFSET);
    out.extend_from_slice(&header.nonce.to_le_bytes());
    out.extend_from_slice(&header.difficulty_bits.to_le_bytes());
    put_f64(&mut out, header.poet_wait_ms);
    out.push(header.consensus.code());
    put_str(&mut out, &header.sealer);
    put_str(&mut out, &body.participant_id);
    out.extend_from_slice(&body.model_ref.0);
    put_f64(&mut out, body.total_time_s);
    put_f64(&mut out, body.block_size_mb);
    put_f64(&mut out, body.chain_size_mb);
    put_f64(&mut out, body.cc_score);
    out
}

pub fn hash_block(header: &BlockHeader, body: &BlockBody) -> Digest {
    Digest::of(&canonical_bytes(header, body))
}

impl Block {
    pub fn recompute_hash(&self) -> Digest {
        hash_block(&self.header, &self.body)
    }

    pub fn serialized_len(&self) -> usize {
        canonical_bytes(&self.header, &self.body).len()
    }
}

/// Why a block failed validation.
#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ChainError {
    #[error("block {index}: expected index {expected}")]
    BadIndex { index: u64, expected: u64 },
    #[error("block {index}: prev_hash does not match the hash of the preceding block")]
    BadLink { index: u64 },
    #[error("block {index}: stored hash does not match block contents")]
    BadHash { index: u64 },
    #[error("block {index}: consensus proof invalid ({reason})")]
    BadProof { index: u64, reason: String },
    #[error("block {index}: {field} is {found}, expected {expected}")]
    BadAccounting { index: u64, field: &'static str, expected: f64, found: f64 },
    #[error("block {index}: cc_score {score} outside [0, 1]")]
    BadScore { index: u64, score: f64 },
}

impl ChainError {
    pub fn index(&self) -> u64 {
        match *self {
            ChainError::BadIndex { index, .. }
            | ChainError::BadLink { index }
            | ChainError::BadHash { index }
            | ChainError::BadProof { index, .. }
            | ChainError::BadAccounting { index, .. }
            | ChainError::BadScore { index, .. } => index,
        }
    }
}

/// Consensus settings every block of a chain must satisfy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChainPolicy {
    pub consensus: ConsensusKind,
    /// Required leading zero bits for PoW blocks.
    pub pow_bits: u32,
}

impl Default for ChainPolicy {
    fn default() -> Self {
        ChainPolicy { consensus: ConsensusKind::Pow, pow_bits: 12 }
    }
}

pub const MAX_POW_BITS: u32 = 32;

/// Checks `block` as the successor of `prev` (or as genesis when `prev` is `None`).
pub fn validate_block(block: &Block, prev: Option<&Block>, policy: &ChainPolicy) -> Result<(), ChainError> {
    let h = &block.header;
    let index = h.index;
    let expected = prev.map_or(0, |p| p.header.index + 1);
    if index != expected {
        return Err(ChainError::BadIndex { index, expected });
    }
    let expected_prev = prev.map_or(Digest::ZERO, |p| p.hash);
    if h.prev_hash != expected_prev {
        return Err(ChainError::BadLink { index });
    }
    if block.recompute_hash() != block.hash {
        return Err(ChainError::BadHash { index });
    }
    for (field, found, expected) in [
        ("block_size_mb", block.body.block_size_mb, block_size_mb(index)),
        ("chain_size_mb", block.body.chain_size_mb, chain_size_mb(index)),
    ] {
        if !((found - expected).abs() <= ACCOUNTING_TOLERANCE) {
            return Err(ChainError::BadAccounting { index, field, expected, found });
        }
    }
    let bad_proof = |reason: String| ChainError::BadProof { index, reason };
    if h.consensus != policy.consensus {
        return Err(bad_proof(format!("sealed with {} on a {} chain", h.consensus, policy.consensus)));
    }
    match h.consensus {
        ConsensusKind::Pow => {
            if h.difficulty_bits != policy.pow_bits {
                return Err(bad_proof(format!(
                    "difficulty {} but chain requires {}",
                    h.difficulty_bits, policy.pow_bits
                )));
            }
            let zeros = leading_zero_bits(&block.hash);
            if zeros < h.difficulty_bits {
                return Err(bad_proof(format!("{zeros} leading zero bits, need {}", h.difficulty_bits)));
            }
        }
        ConsensusKind::Poet => {
            if !(h.poet_wait_ms >= 0.0 && h.poet_wait_ms.is_finite()) {
                return Err(bad_proof(format!("wait {} ms", h.poet_wait_ms)));
            }
            if h.sealer.is_empty() {
                return Err(bad_proof("no elected sealer".into()));
            }
            if h.nonce != 0 || h.difficulty_bits != 0 {
                return Err(bad_proof("PoET block carries a PoW nonce".into()));
            }
        }
    }
    let s = block.body.cc_score;
    if !(0.0..=1.0).contains(&s) {
        return Err(ChainError::BadScore { index, score: s });
    }
    Ok(())
}

/// Everything needed to seal a new block apart from its position.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDraft {
    pub round: u64,
    pub sim_time_ms: u64,
    pub participant_id: String,
    pub model_ref: Digest,
    pub total_time_s: f64,
    pub cc_score: f64,
    /// PoET election result; ignored for PoW.
    pub poet: Option<PoetDraw>,
}

/// An append-only hash-linked list of blocks owned by one participant.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    owner: String,
    policy: ChainPolicy,
    blocks: Vec<Block>,
}

impl Chain {
    /// Creates a chain and seals its genesis block.
    pub fn new(owner: &str, policy: ChainPolicy, genesis: BlockDraft) -> Result<Chain, ChainError> {
        let mut chain = Chain { owner: owner.to_owned(), policy, blocks: Vec::new() };
        let block = chain.seal(genesis);
        chain.validate_and_append(block)?;
        Ok(chain)
    }

    /// Assembles a chain without validating it; see [`verify_chain`].
    pub fn from_parts(owner: String, policy: ChainPolicy, blocks: Vec<Block>) -> Chain {
        Chain { owner, policy, blocks }
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    pub fn policy(&self) -> &ChainPolicy {
        &self.policy
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tip(&self) -> Option<&Block> {
        self.blocks.last()
    }

    pub fn serialized_len(&self) -> usize {
        self.blocks.iter().map(Block::serialized_len).sum()
    }

    /// Builds the next block from `draft` and runs the chain's consensus on it.
    pub fn seal(&self, draft: BlockDraft) -> Block {
        let index = self.tip().map_or(0, |t| t.header.index + 1);
        let prev_hash = self.tip().map_or(Digest::ZERO, |t| t.hash);
        let (sealer, poet_wait_ms) = match (self.policy.consensus, &draft.poet) {
            (ConsensusKind::Poet, Some(d)) => (d.winner.clone(), d.wait_ms),
            _ => (draft.participant_id.clone(), 0.0),
        };
        let mut header = BlockHeader {
            index,
            prev_hash,
            round: draft.round,
            sim_time_ms: draft.sim_time_ms,
            nonce: 0,
            difficulty_bits: 0,
            poet_wait_ms,
            consensus: self.policy.consensus,
            sealer,
        };
        let body = BlockBody {
            participant_id: draft.participant_id,
            model_ref: draft.model_ref,
            total_time_s: draft.total_time_s,
            block_size_mb: block_size_mb(index),
            chain_size_mb: chain_size_mb(index),
            cc_score: draft.cc_score,
        };
        if self.policy.consensus == ConsensusKind::Pow {
            header.difficulty_bits = self.policy.pow_bits;
            header.nonce = pow_mine(&header, &body, self.policy.pow_bits);
        }
        let hash = hash_block(&header, &body);
        Block { header, body, hash }
    }

    pub fn validate_and_append(&mut self, block: Block) -> Result<(), ChainError> {
        validate_block(&block, self.tip(), &self.policy)?;
        self.blocks.push(block);
        Ok(())
    }

    pub fn truncate(&mut self, len: usize) {
        self.blocks.truncate(len);
    }

    /// Mutable access for tamper experiments; bypasses validation.
    pub fn block_mut(&mut self, index: usize) -> Option<&mut Block> {
        self.blocks.get_mut(index)
    }
}

/// Re-validates every block; returns the first failure.
pub fn verify_chain(chain: &Chain) -> Result<(), ChainError> {
    let mut prev: Option<&Block> = None;
    for b in &chain.blocks {
        validate_block(b, prev, &chain.policy)?;
        prev = Some(b);
    }
    Ok(())
}
