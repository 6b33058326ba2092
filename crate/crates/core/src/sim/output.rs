use std::fs;
use std::io::Write;
use std::path::Path;

use super::{RoundReport, SealedBlock, SimOutcome};
use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 20] = [
    "round",
    "status",
    "global_loss",
    "mean_local_loss",
    "gated_out",
    "below_floor",
    "committee",
    "trainers",
    "stragglers",
    "excluded_devices",
    "accepted",
    "rejected",
    "cc_floor",
    "cc_scores",
    "reputation",
    "round_time_s",
    "seal_time_s",
    "clock_s",
    "blocks_sealed",
    "epsilon",
];

pub const STORAGE_HEADER: [&str; 7] =
    ["round", "device_id", "block_index", "block_size_mb", "chain_size_mb", "block_bytes", "chain_bytes"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn list(v: &[String]) -> String {
    v.join(";")
}

fn metrics_row(r: &RoundReport) -> Vec<String> {
    vec![
        r.round.to_string(),
        r.status.as_str().to_owned(),
        r.global_loss.to_string(),
        opt(r.mean_local_loss),
        list(&r.gated_out),
        list(&r.below_floor),
        list(&r.committee),
        list(&r.trainers),
        list(&r.stragglers),
        list(&r.excluded),
        list(&r.accepted),
        list(&r.rejected),
        r.cc_floor.to_string(),
        r.cc_scores.iter().map(|s| format!("{}:{}", s.device_id, s.score)).collect::<Vec<_>>().join(";"),
        r.reputation.iter().map(|(d, s)| format!("{d}:{s}")).collect::<Vec<_>>().join(";"),
        r.round_time_s.to_string(),
        r.seal_time_s.to_string(),
        r.clock_s.to_string(),
        r.blocks.len().to_string(),
        opt(r.epsilon),
    ]
}

/// One row per round. List fields are `;`-joined; score lists are `id:value`.
pub fn write_metrics<W: Write>(reports: &[RoundReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in reports {
        w.write_record(metrics_row(r))?;
    }
    w.flush().map_err(|e| Error::io("metrics.csv", e))
}

/// One row per sealed block, genesis blocks included.
pub fn write_storage<W: Write>(rows: &[SealedBlock], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(STORAGE_HEADER)?;
    for b in rows {
        w.write_record([
            b.round.to_string(),
            b.device_id.clone(),
            b.index.to_string(),
            b.block_size_mb.to_string(),
            b.chain_size_mb.to_string(),
            b.block_bytes.to_string(),
            b.chain_bytes.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("storage.csv", e))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv`, `storage.csv`, `timing.csv`, `final_model.vec` and
/// `chains/<device>/` under `dir`.
///
/// Everything except `timing.csv` is a pure function of the config.
pub fn write_outputs(outcome: &SimOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_metrics(&outcome.reports, create(&dir.join("metrics.csv"))?)?;
    write_storage(outcome.state.storage(), create(&dir.join("storage.csv"))?)?;

    let mut t = csv::Writer::from_writer(create(&dir.join("timing.csv"))?);
    t.write_record(["round", "wall_time_s"])?;
    for r in &outcome.reports {
        t.write_record([r.round.to_string(), r.wall_time_s.to_string()])?;
    }
    t.flush().map_err(|e| Error::io(dir.join("timing.csv"), e))?;

    let model = dir.join("final_model.vec");
    fs::write(&model, outcome.state.global().to_bytes()).map_err(|e| Error::io(&model, e))?;
    outcome.state.export_chains(dir.join("chains"))
}
