//! Per-device chains under PoW and PoET: sealing, verification, tamper
//! detection, and restoring a chain from its per-block metadata files.
//!
//! Run with `cargo run --release --example local_chain`.

use fedchain::chain::{
    block_size_mb, chain_size_mb, export_csv, model_digest, poet_elect, restore_from_metadata, verify_chain,
    BlockDraft, Chain, ChainPolicy, ConsensusKind,
};
use fedchain::fl::ParamVector;

fn draft(owner: &str, round: u64) -> BlockDraft {
    let model = ParamVector::new(vec![round as f64 * 0.1; 11]);
    BlockDraft {
        round,
        sim_time_ms: round * 1_500,
        participant_id: owner.into(),
        model_ref: model_digest(&model),
        total_time_s: 1.5,
        cc_score: 0.8,
        poet: None,
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pow = ChainPolicy { consensus: ConsensusKind::Pow, pow_bits: 12 };
    let mut chain = Chain::new("dev-00", pow, draft("dev-00", 0))?;
    for r in 1..=5 {
        let block = chain.seal(draft("dev-00", r));
        println!("block {} nonce {:>6} hash {}", block.header.index, block.header.nonce, block.hash);
        chain.validate_and_append(block)?;
    }
    verify_chain(&chain)?;
    println!("block 1 is {} MB, chain accounting at block 1 is {} MB", block_size_mb(1), chain_size_mb(1));

    // PoET: the committee member with the shortest exponential wait seals.
    let committee = vec!["dev-03".to_string(), "dev-07".to_string(), "dev-09".to_string()];
    let poet = ChainPolicy { consensus: ConsensusKind::Poet, ..pow };
    let mut poet_chain = Chain::new(
        "dev-01",
        poet,
        BlockDraft { poet: Some(poet_elect(&committee, 1, 0, 50.0)?), ..draft("dev-01", 0) },
    )?;
    for r in 1..=3 {
        let draw = poet_elect(&committee, 1, r, 50.0)?;
        println!("round {r}: {} waited {:.1} ms", draw.winner, draw.wait_ms);
        let b = poet_chain.seal(BlockDraft { poet: Some(draw), ..draft("dev-01", r) });
        poet_chain.validate_and_append(b)?;
    }

    // Flip one bit of a stored score and the chain no longer verifies.
    let mut tampered = chain.clone();
    let b = tampered.block_mut(3).expect("block 3");
    b.body.cc_score = f64::from_bits(b.body.cc_score.to_bits() ^ 1);
    println!("tampered chain: {}", verify_chain(&tampered).unwrap_err());

    // Export, lose chain.csv, rebuild it from block-<n>.txt.
    let dir = std::env::temp_dir().join("fedchain-local-chain");
    let _ = std::fs::remove_dir_all(&dir);
    export_csv(&chain, &dir)?;
    std::fs::remove_file(dir.join("chain.csv"))?;
    let restored = restore_from_metadata(&dir)?;
    assert_eq!(restored, chain);
    println!("restored {} blocks from {}", restored.len(), dir.display());
    Ok(())
}
