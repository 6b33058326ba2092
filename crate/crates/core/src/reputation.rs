//! Event-driven trust scores and the rotating validation committee.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fl::{evaluate, ClientUpdate, Dataset};

pub const MIN_SCORE: f64 = 0.0;
pub const MAX_SCORE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReputationEvent {
    Interested,
    ResponseDelay,
    SuccessfulUpdate,
    ResourceInability,
    DivergentUpdate,
}

impl ReputationEvent {
    pub const ALL: [ReputationEvent; 5] = [
        ReputationEvent::Interested,
        ReputationEvent::ResponseDelay,
        ReputationEvent::SuccessfulUpdate,
        ReputationEvent::ResourceInability,
        ReputationEvent::DivergentUpdate,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ReputationEvent::Interested => "interested",
            ReputationEvent::ResponseDelay => "response_delay",
            ReputationEvent::SuccessfulUpdate => "successful_update",
            ReputationEvent::ResourceInability => "resource_inability",
            ReputationEvent::DivergentUpdate => "divergent_update",
        }
    }
}

impl fmt::Display for ReputationEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for ReputationEvent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ReputationEvent::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown reputation event `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReputationConfig {
    pub initial: f64,
    /// Devices scoring below this are not selected for training.
    pub participation_floor: f64,
    pub interested: f64,
    pub response_delay: f64,
    pub successful_update: f64,
    pub resource_inability: f64,
    pub divergent_update: f64,
}

impl Default for ReputationConfig {
    fn default() -> Self {
        ReputationConfig {
            initial: 50.0,
            participation_floor: 20.0,
            interested: 1.0,
            response_delay: -1.0,
            successful_update: 2.0,
            resource_inability: -1.0,
            divergent_update: -5.0,
        }
    }
}

impl ReputationConfig {
    pub fn delta(&self, event: ReputationEvent) -> f64 {
        match event {
            ReputationEvent::Interested => self.interested,
            ReputationEvent::ResponseDelay => self.response_delay,
            ReputationEvent::SuccessfulUpdate => self.successful_update,
            ReputationEvent::ResourceInability => self.resource_inability,
            ReputationEvent::DivergentUpdate => self.divergent_update,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryEntry {
    pub round: u64,
    pub device_id: String,
    pub event: ReputationEvent,
    pub delta: f64,
}

fn clamp(score: f64) -> f64 {
    score.clamp(MIN_SCORE, MAX_SCORE)
}

/// Trust scores in `[0, 100]` plus the append-only event history.
#[derive(Clone, Debug, PartialEq)]
pub struct ReputationLedger {
    config: ReputationConfig,
    scores: BTreeMap<String, f64>,
    history: Vec<HistoryEntry>,
}

impl ReputationLedger {
    pub fn new(config: ReputationConfig) -> Self {
        ReputationLedger { config, scores: BTreeMap::new(), history: Vec::new() }
    }

    pub fn config(&self) -> &ReputationConfig {
        &self.config
    }

    /// Adds a device at the initial score; a no-op if it is already known.
    pub fn register(&mut self, device_id: &str) {
        self.scores.entry(device_id.to_owned()).or_insert(clamp(self.config.initial));
    }

    pub fn score(&self, device_id: &str) -> Option<f64> {
        self.scores.get(device_id).copied()
    }

    pub fn scores(&self) -> &BTreeMap<String, f64> {
        &self.scores
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn can_participate(&self, device_id: &str) -> bool {
        self.score(device_id).is_some_and(|s| s >= self.config.participation_floor)
    }

    pub fn apply_event(&mut self, device_id: &str, event: ReputationEvent, round: u64) -> Result<f64> {
        let delta = self.config.delta(event);
        let score =
            self.scores.get_mut(device_id).ok_or_else(|| Error::UnknownDevice(device_id.to_owned()))?;
        *score = clamp(*score + delta);
        self.history.push(HistoryEntry { round, device_id: device_id.to_owned(), event, delta });
        Ok(*score)
    }

    /// Recomputes every score from the initial value and the history.
    pub fn replay(&self) -> BTreeMap<String, f64> {
        let mut scores: BTreeMap<String, f64> =
            self.scores.keys().map(|k| (k.clone(), clamp(self.config.initial))).collect();
        for h in &self.history {
            if let Some(s) = scores.get_mut(&h.device_id) {
                *s = clamp(*s + h.delta);
            }
        }
        scores
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Committee {
    pub members: Vec<String>,
    pub round: u64,
}

impl Committee {
    pub fn contains(&self, device_id: &str) -> bool {
        self.members.iter().any(|m| m == device_id)
    }
}

fn rank<'a>(ledger: &ReputationLedger, pool: impl Iterator<Item = &'a String>) -> Vec<String> {
    let mut v: Vec<(f64, &String)> = pool.map(|d| (ledger.score(d).unwrap_or(MIN_SCORE), d)).collect();
    v.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    v.into_iter().map(|(_, d)| d.clone()).collect()
}

/// Top-`m` eligible devices by score, skipping the previous committee unless
/// the fresh pool is too small. Ties go to the lexicographically smaller id.
pub fn select_committee(
    ledger: &ReputationLedger,
    eligible: &[String],
    m: usize,
    prev: &Committee,
    round: u64,
) -> Result<Committee> {
    if m == 0 {
        return Err(Error::InvalidArgument("committee size must be at least 1".into()));
    }
    let eligible: BTreeSet<&String> = eligible.iter().collect();
    if eligible.len() < m {
        return Err(Error::InsufficientCandidates { needed: m, available: eligible.len() });
    }
    let mut members = rank(ledger, eligible.iter().copied().filter(|d| !prev.contains(d)));
    members.truncate(m);
    if members.len() < m {
        let fallback = rank(ledger, eligible.iter().copied().filter(|d| prev.contains(d)));
        members.extend(fallback.into_iter().take(m - members.len()));
    }
    Ok(Committee { members, round })
}

/// Median, averaging the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Maps a validation MSE to a quality score in `(0, 1]`.
pub fn loss_to_score(loss: f64) -> f64 {
    if loss.is_finite() {
        1.0 / (1.0 + loss.max(0.0))
    } else {
        0.0
    }
}

/// The committee's verdict on one update.
#[derive(Clone, Debug, PartialEq)]
pub struct CCScore {
    pub device_id: String,
    pub score: f64,
    pub per_member: Vec<f64>,
    pub accepted: bool,
}

impl CCScore {
    pub fn from_member_scores(device_id: &str, per_member: Vec<f64>, floor: f64) -> Result<Self> {
        let score = median(&per_member).ok_or(Error::EmptyInput)?;
        Ok(CCScore { device_id: device_id.to_owned(), score, accepted: score >= floor, per_member })
    }

    /// Reputation event implied by the verdict.
    pub fn event(&self) -> ReputationEvent {
        if self.accepted {
            ReputationEvent::SuccessfulUpdate
        } else {
            ReputationEvent::DivergentUpdate
        }
    }
}

/// Each member scores the update on its own shard; the median decides.
pub fn committee_validate(
    committee: &Committee,
    update: &ClientUpdate,
    shards: &BTreeMap<String, Dataset>,
    floor: f64,
) -> Result<CCScore> {
    let per_member = committee
        .members
        .iter()
        .map(|m| {
            let shard = shards.get(m).ok_or_else(|| Error::MissingShard(m.clone()))?;
            Ok(loss_to_score(evaluate(&update.params, shard)?))
        })
        .collect::<Result<Vec<_>>>()?;
    CCScore::from_member_scores(&update.device_id, per_member, floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::{generate_synthetic_with_noise, partition, ParamVector};

    fn ledger_with(scores: &[(&str, f64)]) -> ReputationLedger {
        let mut l = ReputationLedger::new(ReputationConfig::default());
        for (d, s) in scores {
            l.scores.insert((*d).to_owned(), *s);
        }
        l
    }

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn apply_event_adds_and_clamps() {
        let mut l = ledger_with(&[("a", 50.0), ("b", 0.0)]);
        assert_eq!(l.apply_event("a", ReputationEvent::SuccessfulUpdate, 0).unwrap(), 52.0);
        assert_eq!(l.apply_event("b", ReputationEvent::DivergentUpdate, 0).unwrap(), 0.0);
        assert!(matches!(l.apply_event("zz", ReputationEvent::Interested, 0), Err(Error::UnknownDevice(_))));
    }

    #[test]
    fn replay_matches_scores() {
        let mut l = ReputationLedger::new(ReputationConfig::default());
        l.register("a");
        l.register("b");
        for r in 0..40 {
            l.apply_event("a", ReputationEvent::SuccessfulUpdate, r).unwrap();
            l.apply_event("b", ReputationEvent::DivergentUpdate, r).unwrap();
        }
        assert_eq!(&l.replay(), l.scores());
        assert_eq!(l.score("a"), Some(100.0));
        assert_eq!(l.score("b"), Some(0.0));
    }

    #[test]
    fn committee_top_m() {
        let l = ledger_with(&[("a", 90.0), ("b", 80.0), ("c", 70.0), ("d", 60.0)]);
        let all = ids(&["a", "b", "c", "d"]);
        let c = select_committee(&l, &all, 2, &Committee::default(), 1).unwrap();
        assert_eq!(c.members, ids(&["a", "b"]));
        let c2 = select_committee(&l, &all, 2, &c, 2).unwrap();
        assert_eq!(c2.members, ids(&["c", "d"]));
    }

    #[test]
    fn committee_ties_lexicographic() {
        let l = ledger_with(&[("d", 50.0), ("b", 50.0), ("c", 50.0), ("a", 50.0)]);
        let c = select_committee(&l, &ids(&["d", "c", "b", "a"]), 2, &Committee::default(), 0).unwrap();
        assert_eq!(c.members, ids(&["a", "b"]));
    }

    #[test]
    fn committee_falls_back_to_previous() {
        let l = ledger_with(&[("a", 90.0), ("b", 80.0), ("c", 70.0)]);
        let prev = Committee { members: ids(&["a", "b"]), round: 0 };
        let c = select_committee(&l, &ids(&["a", "b", "c"]), 2, &prev, 1).unwrap();
        assert_eq!(c.members, ids(&["c", "a"]));
        assert!(matches!(
            select_committee(&l, &ids(&["a"]), 2, &prev, 1),
            Err(Error::InsufficientCandidates { needed: 2, available: 1 })
        ));
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[0.9, 0.7, 0.8]), Some(0.8));
        assert!((median(&[0.6, 0.8]).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn exact_fit_scores_one() {
        let data = generate_synthetic_with_noise(60, 0.0, 5).unwrap();
        let shards = partition(&data.dataset, 3, 0).unwrap();
        let committee = Committee { members: ids(&["m0", "m1", "m2"]), round: 0 };
        let shard_map: BTreeMap<String, Dataset> = committee.members.iter().cloned().zip(shards).collect();
        let update = ClientUpdate {
            device_id: "x".into(),
            params: data.true_params.clone(),
            local_loss: 0.0,
            train_time: 0.0,
        };
        let cc = committee_validate(&committee, &update, &shard_map, 0.5).unwrap();
        assert!((cc.score - 1.0).abs() < 1e-12);
        assert!(cc.accepted);
        assert_eq!(cc.per_member.len(), 3);

        let bad = ClientUpdate { params: ParamVector::new(vec![40.0; 11]), ..update };
        let cc = committee_validate(&committee, &bad, &shard_map, 0.5).unwrap();
        assert!(!cc.accepted);
        assert_eq!(cc.event(), ReputationEvent::DivergentUpdate);
    }

    #[test]
    fn missing_shard() {
        let committee = Committee { members: ids(&["ghost"]), round: 0 };
        let update = ClientUpdate {
            device_id: "x".into(),
            params: ParamVector::zeros(11),
            local_loss: 0.0,
            train_time: 0.0,
        };
        assert!(matches!(
            committee_validate(&committee, &update, &BTreeMap::new(), 0.0),
            Err(Error::MissingShard(_))
        ));
    }

    #[test]
    fn event_names_round_trip() {
        for e in ReputationEvent::ALL {
            assert_eq!(e.as_str().parse::<ReputationEvent>().unwrap(), e);
        }
    }
}
