//! On-disk chain layout:
//!
//! ```text
//! <dir>/chain.csv          one row per block, header row first
//! <dir>/block-<n>.txt      key=value metadata for block n (sufficient to restore)
//! <dir>/models/<hash>.vec  serialized ParamVector referenced by model_ref
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{verify_chain, Block, BlockBody, BlockHeader, Chain, ChainPolicy, ConsensusKind, Digest};
use crate::error::{Error, Result};
use crate::fl::ParamVector;

pub const CSV_HEADER: [&str; 16] = [
    "index",
    "prev_hash",
    "round",
    "sim_time_ms",
    "nonce",
    "difficulty_bits",
    "poet_wait_ms",
    "consensus",
    "sealer",
    "participant_id",
    "model_ref",
    "total_time_s",
    "block_size_mb",
    "chain_size_mb",
    "cc_score",
    "hash",
];

fn block_fields(b: &Block) -> [String; 16] {
    let h = &b.header;
    let d = &b.body;
    [
        h.index.to_string(),
        h.prev_hash.to_hex(),
        h.round.to_string(),
        h.sim_time_ms.to_string(),
        h.nonce.to_string(),
        h.difficulty_bits.to_string(),
        h.poet_wait_ms.to_string(),
        h.consensus.to_string(),
        h.sealer.clone(),
        d.participant_id.clone(),
        d.model_ref.to_hex(),
        d.total_time_s.to_string(),
        d.block_size_mb.to_string(),
        d.chain_size_mb.to_string(),
        d.cc_score.to_string(),
        b.hash.to_hex(),
    ]
}

fn block_from_fields(get: impl Fn(&str) -> Option<String>) -> std::result::Result<Block, String> {
    let field = |k: &str| get(k).ok_or_else(|| format!("missing field `{k}`"));
    fn num<T: std::str::FromStr>(k: &str, v: String) -> std::result::Result<T, String> {
        v.parse().map_err(|_| format!("field `{k}` has bad value `{v}`"))
    }
    let digest = |k: &str| -> std::result::Result<Digest, String> {
        Digest::from_hex(&field(k)?).map_err(|e| e.to_string())
    };
    let header = BlockHeader {
        index: num("index", field("index")?)?,
        prev_hash: digest("prev_hash")?,
        round: num("round", field("round")?)?,
        sim_time_ms: num("sim_time_ms", field("sim_time_ms")?)?,
        nonce: num("nonce", field("nonce")?)?,
        difficulty_bits: num("difficulty_bits", field("difficulty_bits")?)?,
        poet_wait_ms: num("poet_wait_ms", field("poet_wait_ms")?)?,
        consensus: field("consensus")?.parse::<ConsensusKind>().map_err(|e| e.to_string())?,
        sealer: field("sealer")?,
    };
    let body = BlockBody {
        participant_id: field("participant_id")?,
        model_ref: digest("model_ref")?,
        total_time_s: num("total_time_s", field("total_time_s")?)?,
        block_size_mb: num("block_size_mb", field("block_size_mb")?)?,
        chain_size_mb: num("chain_size_mb", field("chain_size_mb")?)?,
        cc_score: num("cc_score", field("cc_score")?)?,
    };
    Ok(Block { header, body, hash: digest("hash")? })
}

fn block_txt(owner: &str, b: &Block) -> String {
    let mut s = format!("owner={owner}\n");
    for (k, v) in CSV_HEADER.iter().zip(block_fields(b)) {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    }
    s
}

fn txt_name(index: usize) -> String {
    format!("block-{index}")
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `chain.csv` and one `block-<n>.txt` per block.
pub fn export_csv(chain: &Chain, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for (i, b) in chain.blocks().iter().enumerate() {
        w.write_record(block_fields(b))?;
        write(&dir.join(format!("{}.txt", txt_name(i))), block_txt(chain.owner(), b).as_bytes())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv buffer: {e}")))?;
    write(&dir.join("chain.csv"), &bytes)
}

pub fn model_file_name(digest: &Digest) -> String {
    format!("{}.vec", digest.to_hex())
}

/// Stores each vector under `models/<hash>.vec`.
pub fn export_models<'a>(
    models: impl IntoIterator<Item = &'a ParamVector>,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref().join("models");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for m in models {
        let bytes = m.to_bytes();
        write(&dir.join(model_file_name(&Digest::of(&bytes))), &bytes)?;
    }
    Ok(())
}

/// Loads `models/<hash>.vec` and checks it hashes to `digest`.
pub fn load_model(dir: impl AsRef<Path>, digest: &Digest) -> Result<ParamVector> {
    let path = dir.as_ref().join("models").join(model_file_name(digest));
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if Digest::of(&bytes) != *digest {
        return Err(Error::CorruptExport(format!("models/{}", model_file_name(digest))));
    }
    ParamVector::from_bytes(&bytes)
}

fn read_txt(dir: &Path, index: usize) -> Result<Option<(String, Block)>> {
    let name = txt_name(index);
    let path = dir.join(format!("{name}.txt"));
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(&path, e)),
    };
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::CorruptExport(format!("{name}: malformed line `{line}`")))?;
        map.insert(k.to_owned(), v.to_owned());
    }
    let owner =
        map.get("owner").cloned().ok_or_else(|| Error::CorruptExport(format!("{name}: missing owner")))?;
    let block = block_from_fields(|k| map.get(k).cloned())
        .map_err(|e| Error::CorruptExport(format!("{name}: {e}")))?;
    Ok(Some((owner, block)))
}

fn policy_of(genesis: &Block) -> ChainPolicy {
    ChainPolicy { consensus: genesis.header.consensus, pow_bits: genesis.header.difficulty_bits }
}

/// Rebuilds a chain from an export without validating it.
///
/// The per-block `.txt` files are authoritative. When `chain.csv` is present
/// every row must agree with its metadata file; when it is absent the chain is
/// restored from `block-0.txt`, `block-1.txt`, ... alone.
pub fn import_unverified(dir: impl AsRef<Path>) -> Result<Chain> {
    import(dir.as_ref(), true)
}

fn import(dir: &Path, use_csv: bool) -> Result<Chain> {
    let csv_path = dir.join("chain.csv");
    let rows: Option<Vec<Block>> = if use_csv && csv_path.exists() {
        let mut r = csv::ReaderBuilder::new()
            .from_path(&csv_path)
            .map_err(|e| Error::CorruptExport(format!("chain.csv: {e}")))?;
        let headers = r.headers()?.clone();
        if headers.iter().ne(CSV_HEADER.iter().copied()) {
            return Err(Error::CorruptExport("chain.csv: unexpected header".into()));
        }
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::CorruptExport(format!("chain.csv row {i}: {e}")))?;
            let block = block_from_fields(|k| {
                CSV_HEADER.iter().position(|h| *h == k).and_then(|p| rec.get(p)).map(str::to_owned)
            })
            .map_err(|e| Error::CorruptExport(format!("chain.csv row {i}: {e}")))?;
            rows.push(block);
        }
        Some(rows)
    } else {
        None
    };

    let mut owner: Option<String> = None;
    let mut blocks = Vec::new();
    let expected = rows.as_ref().map(Vec::len);
    let mut i = 0;
    loop {
        if expected.is_some_and(|n| i >= n) {
            break;
        }
        let Some((o, block)) = read_txt(dir, i)? else {
            if expected.is_some() || i == 0 {
                return Err(Error::CorruptExport(txt_name(i)));
            }
            break;
        };
        match &owner {
            Some(prev) if prev != &o => {
                return Err(Error::CorruptExport(format!("{}: owner `{o}` != `{prev}`", txt_name(i))))
            }
            None => owner = Some(o),
            _ => {}
        }
        if let Some(rows) = &rows {
            if rows[i] != block {
                return Err(Error::CorruptExport(format!(
                    "{}: disagrees with chain.csv row {i}",
                    txt_name(i)
                )));
            }
        }
        blocks.push(block);
        i += 1;
    }
    let owner = owner.ok_or_else(|| Error::CorruptExport("chain.csv: no blocks".into()))?;
    let policy = policy_of(&blocks[0]);
    Ok(Chain::from_parts(owner, policy, blocks))
}

/// [`import_unverified`] followed by full chain verification.
pub fn import_restore(dir: impl AsRef<Path>) -> Result<Chain> {
    verified(import_unverified(dir)?)
}

/// Rebuilds and verifies a chain from the `block-<n>.txt` files only,
/// ignoring any `chain.csv` (which may be missing or damaged).
pub fn restore_from_metadata(dir: impl AsRef<Path>) -> Result<Chain> {
    verified(import(dir.as_ref(), false)?)
}

fn verified(chain: Chain) -> Result<Chain> {
    verify_chain(&chain)
        .map_err(|e| Error::CorruptExport(format!("{}: {e}", txt_name(e.index() as usize))))?;
    Ok(chain)
}
