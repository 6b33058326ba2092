//! The round loop.
//!
//! A round runs nine phases in a fixed order: gate, distribute, train,
//! defend, validate, aggregate, reputation, seal, report. Phases only read
//! shared state; the coordinator applies every mutation between them.

mod config;
mod output;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use config::{DataSource, SimConfig};
pub use output::{write_metrics, write_outputs, write_storage, METRICS_HEADER, STORAGE_HEADER};

use crate::chain::{
    self, model_digest, poet_elect, BlockDraft, Chain, ChainPolicy, ConsensusKind, Digest, PoetDraw,
};
use crate::defense::filter_updates;
use crate::error::{Error, Result};
use crate::fl::{
    add_target_noise, evaluate, fed_avg, generate_synthetic_with_noise, inject_poison, load_turbofan,
    local_train, partition, split_holdout, ClientUpdate, Dataset, ParamVector, PARAM_DIM,
};
use crate::privacy::{epsilon_bound, obfuscate, sensitivity, PrivacyParams};
use crate::registry::{
    check_eligibility, load_roster, Eligibility, Registry, ResourceProbe, ResourceProfile, Role, RosterEntry,
    SimulatedDevice, SimulatedProbe,
};
use crate::reputation::{
    committee_validate, loss_to_score, median, select_committee, CCScore, Committee, ReputationEvent,
    ReputationLedger,
};
use crate::rng::{derive_seed, label, rng_for};

const TAG_ROLES: u64 = 0x726f;
const TAG_DATA: u64 = 0xda7a;
const TAG_TRAIN: u64 = 0x7a1;
const TAG_POISON: u64 = 0xbad;
const TAG_DP: u64 = 0xd9;
const TAG_FILTER: u64 = 0xf11;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Gate,
    Distribute,
    Train,
    Defend,
    Validate,
    Aggregate,
    Reputation,
    Seal,
    Report,
}

impl Phase {
    pub const ORDER: [Phase; 9] = [
        Phase::Gate,
        Phase::Distribute,
        Phase::Train,
        Phase::Defend,
        Phase::Validate,
        Phase::Aggregate,
        Phase::Reputation,
        Phase::Seal,
        Phase::Report,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Gate => "gate",
            Phase::Distribute => "distribute",
            Phase::Train => "train",
            Phase::Defend => "defend",
            Phase::Validate => "validate",
            Phase::Aggregate => "aggregate",
            Phase::Reputation => "reputation",
            Phase::Seal => "seal",
            Phase::Report => "report",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundStatus {
    Aggregated,
    /// Nobody passed the gate; nothing changed except reputation.
    NoEligibleDevices,
    /// Every update was filtered or rejected; the global model is unchanged.
    AllUpdatesRejected,
}

impl RoundStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RoundStatus::Aggregated => "aggregated",
            RoundStatus::NoEligibleDevices => "no_eligible_devices",
            RoundStatus::AllUpdatesRejected => "all_updates_rejected",
        }
    }

    pub fn is_skipped(&self) -> bool {
        *self != RoundStatus::Aggregated
    }

    /// The matching error for skipped rounds.
    pub fn error(&self) -> Option<Error> {
        match self {
            RoundStatus::Aggregated => None,
            RoundStatus::NoEligibleDevices => Some(Error::NoEligibleDevices),
            RoundStatus::AllUpdatesRejected => Some(Error::AllUpdatesRejected),
        }
    }
}

/// One block appended during a round, with its storage accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct SealedBlock {
    pub round: u64,
    pub device_id: String,
    pub index: u64,
    pub block_size_mb: f64,
    pub chain_size_mb: f64,
    pub block_bytes: usize,
    pub chain_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: u64,
    pub status: RoundStatus,
    pub phases: Vec<Phase>,
    /// Loss of the global model on the clean validation split after the round.
    pub global_loss: f64,
    pub mean_local_loss: Option<f64>,
    /// Devices that failed the resource gate or did not answer the probe.
    pub gated_out: Vec<String>,
    /// Devices that passed the gate but sit below the reputation floor.
    pub below_floor: Vec<String>,
    pub committee: Vec<String>,
    pub trainers: Vec<String>,
    pub stragglers: Vec<String>,
    /// Removed by the outlier filter.
    pub excluded: Vec<String>,
    pub cc_floor: f64,
    pub cc_scores: Vec<CCScore>,
    pub accepted: Vec<String>,
    /// Scored below the floor by the committee.
    pub rejected: Vec<String>,
    pub reputation: BTreeMap<String, f64>,
    pub sensitivity: Option<f64>,
    pub epsilon: Option<f64>,
    /// Simulated seconds from distribution to aggregation.
    pub round_time_s: f64,
    /// Simulated seconds spent sealing blocks.
    pub seal_time_s: f64,
    /// Simulated clock at the end of the round.
    pub clock_s: f64,
    pub blocks: Vec<SealedBlock>,
    /// Host wall-clock seconds; not deterministic.
    pub wall_time_s: f64,
}

/// Everything a running simulation owns.
#[derive(Debug)]
pub struct SimState {
    cfg: SimConfig,
    registry: Registry,
    roles: BTreeMap<String, Role>,
    ledger: ReputationLedger,
    shards: BTreeMap<String, Dataset>,
    validation: Dataset,
    global: ParamVector,
    chains: BTreeMap<String, Chain>,
    models: BTreeMap<Digest, ParamVector>,
    committee: Committee,
    round: u64,
    clock_s: f64,
    storage: Vec<SealedBlock>,
}

fn device_ids(n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len().max(2);
    (0..n).map(|i| format!("dev-{i:0width$}")).collect()
}

/// Generated roster: healthy devices with roles drawn from the configured fractions.
pub fn generate_roster(cfg: &SimConfig) -> Vec<RosterEntry> {
    let ids = device_ids(cfg.n_clients);
    let n = ids.len();
    let n_poison = (cfg.poisoner_fraction * n as f64).round() as usize;
    let n_straggle = ((cfg.straggler_fraction * n as f64).round() as usize).min(n - n_poison);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(cfg.seed, &[TAG_ROLES]));
    let mut roles = vec![Role::Honest; n];
    for &i in &order[..n_poison] {
        roles[i] = Role::Poisoner;
    }
    for &i in &order[n_poison..n_poison + n_straggle] {
        roles[i] = Role::Straggler;
    }
    ids.into_iter()
        .zip(roles)
        .map(|(device_id, role)| RosterEntry {
            device_id,
            role,
            device: SimulatedDevice { profile: ResourceProfile::default(), offline: false },
        })
        .collect()
}

fn load_data(cfg: &SimConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic { rows } => {
            Ok(generate_synthetic_with_noise(*rows, cfg.synthetic_noise, derive_seed(cfg.seed, &[TAG_DATA]))?
                .dataset)
        }
        DataSource::Turbofan { path } => load_turbofan(path),
    }
}

impl SimState {
    /// Builds the registry from the configured roster, or generates one.
    pub fn new(cfg: SimConfig) -> Result<SimState> {
        cfg.validate()?;
        let roster = match &cfg.roster {
            Some(path) => load_roster(path)?,
            None => generate_roster(&cfg),
        };
        let mut probe = SimulatedProbe::new(ResourceProfile::default());
        for e in &roster {
            probe.configure(&e.device_id, e.device.clone());
        }
        SimState::with_probe(cfg, &roster, Box::new(probe))
    }

    /// Like [`SimState::new`] but with an explicit roster and probe backend.
    pub fn with_probe(
        cfg: SimConfig,
        roster: &[RosterEntry],
        probe: Box<dyn ResourceProbe>,
    ) -> Result<SimState> {
        cfg.validate()?;
        if roster.len() < 2 {
            return Err(Error::InvalidArgument("roster needs at least 2 devices".into()));
        }
        let mut registry = Registry::new(cfg.seed, probe);
        let mut ledger = ReputationLedger::new(cfg.reputation.clone());
        let mut roles = BTreeMap::new();
        for e in roster {
            registry.register(&e.device_id, e.role, 0)?;
            ledger.register(&e.device_id);
            ledger.apply_event(&e.device_id, ReputationEvent::Interested, 0)?;
            roles.insert(e.device_id.clone(), e.role);
        }

        let data = load_data(&cfg)?;
        let (train, validation) =
            split_holdout(&data, cfg.holdout_fraction, derive_seed(cfg.seed, &[TAG_DATA, 1]))?;
        let parts = partition(&train, roles.len(), derive_seed(cfg.seed, &[TAG_DATA, 2]))?;
        let mut shards = BTreeMap::new();
        for (id, mut shard) in roles.keys().zip(parts) {
            add_target_noise(&mut shard, cfg.noise_level, &mut rng_for(cfg.seed, &[TAG_DATA, 3, label(id)]))?;
            shards.insert(id.clone(), shard);
        }

        let global = ParamVector::zeros(PARAM_DIM);
        let digest = model_digest(&global);
        let policy = ChainPolicy { consensus: cfg.consensus, pow_bits: cfg.pow_bits };
        let mut chains = BTreeMap::new();
        let mut storage = Vec::new();
        for id in roles.keys() {
            let genesis = BlockDraft {
                round: 0,
                sim_time_ms: 0,
                participant_id: id.clone(),
                model_ref: digest,
                total_time_s: 0.0,
                cc_score: 0.0,
                poet: (cfg.consensus == ConsensusKind::Poet)
                    .then(|| PoetDraw { winner: id.clone(), wait_ms: 0.0 }),
            };
            let chain = Chain::new(id, policy, genesis)?;
            storage.push(sealed_row(&chain, 0));
            chains.insert(id.clone(), chain);
        }
        let mut models = BTreeMap::new();
        models.insert(digest, global.clone());

        Ok(SimState {
            cfg,
            registry,
            roles,
            ledger,
            shards,
            validation,
            global,
            chains,
            models,
            committee: Committee::default(),
            round: 0,
            clock_s: 0.0,
            storage,
        })
    }

    /// Replaces the fresh chains with ones exported by an earlier run and
    /// resumes from the newest model they reference.
    pub fn restore_chains(&mut self, chains_dir: impl AsRef<Path>) -> Result<()> {
        let dir = chains_dir.as_ref();
        let mut newest: Option<(u64, u64, Digest, std::path::PathBuf)> = None;
        let mut restored = BTreeMap::new();
        for id in self.roles.keys() {
            let path = dir.join(id);
            if !path.is_dir() {
                continue;
            }
            let chain = chain::import_restore(&path)?;
            if chain.owner() != id || *chain.policy() != self.policy() {
                return Err(Error::CorruptExport(format!(
                    "{id}: exported chain does not match this run's device or consensus"
                )));
            }
            let tip = chain.tip().ok_or_else(|| Error::CorruptExport(format!("{id}: empty chain")))?;
            let key = (tip.header.round, tip.header.sim_time_ms);
            if newest.as_ref().is_none_or(|n| key > (n.0, n.1)) {
                newest = Some((key.0, key.1, tip.body.model_ref, path.clone()));
            }
            for b in chain.blocks() {
                if let Ok(m) = chain::load_model(&path, &b.body.model_ref) {
                    self.models.insert(b.body.model_ref, m);
                }
            }
            restored.insert(id.clone(), chain);
        }
        let Some((round, ms, digest, path)) = newest else {
            return Err(Error::CorruptExport(format!("no device chains under {}", dir.display())));
        };
        self.global = chain::load_model(&path, &digest)?;
        self.round = round;
        self.clock_s = ms as f64 / 1000.0;
        for (id, chain) in restored {
            self.chains.insert(id, chain);
        }
        Ok(())
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn policy(&self) -> ChainPolicy {
        ChainPolicy { consensus: self.cfg.consensus, pow_bits: self.cfg.pow_bits }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn roles(&self) -> &BTreeMap<String, Role> {
        &self.roles
    }

    pub fn ledger(&self) -> &ReputationLedger {
        &self.ledger
    }

    pub fn shards(&self) -> &BTreeMap<String, Dataset> {
        &self.shards
    }

    pub fn validation(&self) -> &Dataset {
        &self.validation
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn chains(&self) -> &BTreeMap<String, Chain> {
        &self.chains
    }

    pub fn models(&self) -> &BTreeMap<Digest, ParamVector> {
        &self.models
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn clock_s(&self) -> f64 {
        self.clock_s
    }

    /// Every block sealed so far, genesis included.
    pub fn storage(&self) -> &[SealedBlock] {
        &self.storage
    }

    pub fn global_loss(&self) -> Result<f64> {
        evaluate(&self.global, &self.validation)
    }

    /// Runs one round. Skipped rounds come back with a non-aggregated status.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let round = self.round + 1;
        self.run_round_inner(round).map_err(|e| Error::Round { round, source: Box::new(e) })
    }

    fn run_round_inner(&mut self, round: u64) -> Result<RoundReport> {
        let started = Instant::now();
        let cfg = self.cfg.clone();
        let mut phases = Vec::with_capacity(Phase::ORDER.len());
        let mut enter = |p: Phase| {
            log::debug!("round {round}: {p}");
            phases.push(p);
        };
        let mut events: Vec<(String, ReputationEvent)> = Vec::new();

        // gate
        enter(Phase::Gate);
        let mut pool = Vec::new();
        let mut gated_out = Vec::new();
        let mut below_floor = Vec::new();
        for id in self.roles.keys() {
            let token = self.registry.token_for(id).ok_or_else(|| Error::UnknownDevice(id.clone()))?;
            let ok = match self.registry.ping_device(&token.token) {
                Ok(profile) => check_eligibility(&profile, &cfg.eligibility) == Eligibility::Eligible,
                Err(Error::ProbeTimeout(_)) => false,
                Err(e) => return Err(e),
            };
            if !ok {
                gated_out.push(id.clone());
                events.push((id.clone(), ReputationEvent::ResourceInability));
            } else if !self.ledger.can_participate(id) {
                below_floor.push(id.clone());
            } else {
                pool.push(id.clone());
            }
        }
        let mut report = RoundReport {
            round,
            status: RoundStatus::Aggregated,
            phases: Vec::new(),
            global_loss: f64::NAN,
            mean_local_loss: None,
            gated_out,
            below_floor,
            committee: Vec::new(),
            trainers: Vec::new(),
            stragglers: Vec::new(),
            excluded: Vec::new(),
            cc_floor: 0.0,
            cc_scores: Vec::new(),
            accepted: Vec::new(),
            rejected: Vec::new(),
            reputation: BTreeMap::new(),
            sensitivity: None,
            epsilon: None,
            round_time_s: 0.0,
            seal_time_s: 0.0,
            clock_s: 0.0,
            blocks: Vec::new(),
            wall_time_s: 0.0,
        };

        if pool.len() < 2 {
            report.status = RoundStatus::NoEligibleDevices;
            for p in &Phase::ORDER[1..] {
                enter(*p);
            }
            self.apply_events(&events, round)?;
            return self.finish(report, phases, started);
        }
        let m = cfg.committee_size.min(pool.len() - 1);
        let committee = select_committee(&self.ledger, &pool, m, &self.committee, round)?;
        let trainers: Vec<String> = pool.iter().filter(|d| !committee.contains(d)).cloned().collect();

        // distribute
        enter(Phase::Distribute);
        let global = self.global.clone();

        // train
        enter(Phase::Train);
        let seed = cfg.seed;
        let roles = &self.roles;
        let shards = &self.shards;
        let submitted = trainers
            .par_iter()
            .map(|id| {
                let shard = shards.get(id).ok_or_else(|| Error::MissingShard(id.clone()))?;
                let mut rng = rng_for(seed, &[TAG_TRAIN, round, label(id)]);
                let mut update = local_train(id, &global, shard, &cfg.train, &mut rng)?;
                if roles[id] == Role::Poisoner {
                    update = inject_poison(
                        &update,
                        cfg.poison_mode,
                        &mut rng_for(seed, &[TAG_POISON, round, label(id)]),
                    )?;
                }
                let clean = update.params.clone();
                if cfg.dp_sigma > 0.0 {
                    let mut rng = rng_for(seed, &[TAG_DP, round, label(id)]);
                    update.params = obfuscate(&update.params, cfg.dp_sigma, &mut rng)?;
                }
                if roles[id] == Role::Straggler {
                    update.train_time += cfg.straggler_delay_s;
                }
                Ok((update, clean))
            })
            .collect::<Result<Vec<(ClientUpdate, ParamVector)>>>()?;
        let (updates, clean): (Vec<ClientUpdate>, Vec<ParamVector>) = submitted.into_iter().unzip();
        for id in &trainers {
            if self.roles[id] == Role::Straggler {
                report.stragglers.push(id.clone());
                events.push((id.clone(), ReputationEvent::ResponseDelay));
            }
        }
        if cfg.dp_sigma > 0.0 && clean.len() >= 2 {
            let s = sensitivity(&clean)?;
            report.sensitivity = Some(s);
            report.epsilon = Some(epsilon_bound(&PrivacyParams {
                sigma: cfg.dp_sigma,
                delta: cfg.dp_delta,
                sensitivity: s,
            })?);
        }
        let slowest = updates.iter().map(|u| u.train_time).fold(0.0, f64::max);
        let upload = cfg.upload_sec * updates.len() as f64;

        // defend
        enter(Phase::Defend);
        let kept = if cfg.defense && updates.len() >= 2 {
            let fc = cfg.filter_config(derive_seed(seed, &[TAG_FILTER, round]), global.clone());
            let outcome = filter_updates(&updates, &fc)?;
            events.extend(outcome.reputation_events());
            report.excluded = outcome.excluded;
            outcome.kept
        } else {
            updates
        };

        // validate
        enter(Phase::Validate);
        let baseline = committee
            .members
            .iter()
            .map(|mb| Ok(loss_to_score(evaluate(&global, &self.shards[mb])?)))
            .collect::<Result<Vec<f64>>>()?;
        let floor = cfg.cc_floor_ratio * median(&baseline).unwrap_or(0.0);
        let scores = kept
            .par_iter()
            .map(|u| committee_validate(&committee, u, &self.shards, floor))
            .collect::<Result<Vec<CCScore>>>()?;
        let eval_rows = committee.members.iter().map(|mb| self.shards[mb].rows()).max().unwrap_or(0);
        let validate_time = cfg.eval_sec_per_sample * (eval_rows * (kept.len() + 1)) as f64;
        let mut accepted = Vec::new();
        for (u, s) in kept.iter().zip(&scores) {
            events.push((s.device_id.clone(), s.event()));
            if s.accepted {
                accepted.push(u.clone());
                report.accepted.push(u.device_id.clone());
            } else {
                report.rejected.push(u.device_id.clone());
            }
        }
        report.cc_floor = floor;
        report.round_time_s = slowest + upload + validate_time;

        // aggregate
        enter(Phase::Aggregate);
        let new_global = if accepted.is_empty() {
            report.status = RoundStatus::AllUpdatesRejected;
            None
        } else {
            let weights: Vec<f64> =
                accepted.iter().map(|u| self.shards[&u.device_id].rows() as f64).collect();
            report.mean_local_loss = Some(
                accepted.iter().zip(&weights).map(|(u, w)| u.local_loss * w).sum::<f64>()
                    / weights.iter().sum::<f64>(),
            );
            Some(fed_avg(&accepted, &weights)?)
        };

        // reputation
        enter(Phase::Reputation);
        self.apply_events(&events, round)?;

        // seal
        enter(Phase::Seal);
        if let Some(g) = new_global {
            let digest = model_digest(&g);
            let poet = match cfg.consensus {
                ConsensusKind::Poet => Some(poet_elect(&committee.members, seed, round, cfg.poet_mean_ms)?),
                ConsensusKind::Pow => None,
            };
            let clock_ms = ((self.clock_s + report.round_time_s) * 1000.0).round() as u64;
            let by_id: BTreeMap<&str, f64> = scores.iter().map(|s| (s.device_id.as_str(), s.score)).collect();
            let sealed = report
                .accepted
                .par_iter()
                .map(|id| {
                    let chain = &self.chains[id];
                    let block = chain.seal(BlockDraft {
                        round,
                        sim_time_ms: clock_ms,
                        participant_id: id.clone(),
                        model_ref: digest,
                        total_time_s: report.round_time_s,
                        cc_score: by_id[id.as_str()],
                        poet: poet.clone(),
                    });
                    (id.clone(), block)
                })
                .collect::<Vec<_>>();
            let mut max_attempts = 0u64;
            for (id, block) in sealed {
                max_attempts = max_attempts.max(block.header.nonce + 1);
                let chain = self.chains.get_mut(&id).expect("accepted device has a chain");
                chain.validate_and_append(block)?;
                let row = sealed_row(chain, round);
                self.storage.push(row.clone());
                report.blocks.push(row);
            }
            report.seal_time_s = match &poet {
                Some(d) => d.wait_ms / 1000.0,
                None => max_attempts as f64 * cfg.hash_sec,
            };
            self.models.insert(digest, g.clone());
            self.global = g;
        }

        // report
        enter(Phase::Report);
        self.committee = committee.clone();
        report.committee = committee.members;
        report.trainers = trainers;
        report.cc_scores = scores;
        self.finish(report, phases, started)
    }

    fn apply_events(&mut self, events: &[(String, ReputationEvent)], round: u64) -> Result<()> {
        for (id, ev) in events {
            self.ledger.apply_event(id, *ev, round)?;
        }
        Ok(())
    }

    fn finish(
        &mut self,
        mut report: RoundReport,
        phases: Vec<Phase>,
        started: Instant,
    ) -> Result<RoundReport> {
        self.round = report.round;
        self.clock_s += report.round_time_s + report.seal_time_s;
        report.clock_s = self.clock_s;
        report.global_loss = self.global_loss()?;
        report.reputation = self.ledger.scores().clone();
        report.phases = phases;
        report.wall_time_s = started.elapsed().as_secs_f64();
        log::info!(
            "round {}: {} loss={} accepted={} excluded={:?} rejected={:?}",
            report.round,
            report.status.as_str(),
            report.global_loss,
            report.accepted.len(),
            report.excluded,
            report.rejected
        );
        Ok(report)
    }

    /// Writes each device's chain and referenced models under `dir/<device>/`.
    pub fn export_chains(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (id, chain) in &self.chains {
            let path = dir.join(id);
            chain::export_csv(chain, &path)?;
            let refs: BTreeSet<Digest> = chain.blocks().iter().map(|b| b.body.model_ref).collect();
            chain::export_models(refs.iter().filter_map(|d| self.models.get(d)), &path)?;
        }
        Ok(())
    }

    /// Re-validates every chain.
    pub fn verify_chains(&self) -> Result<()> {
        for chain in self.chains.values() {
            chain::verify_chain(chain)?;
        }
        Ok(())
    }
}

fn sealed_row(chain: &Chain, round: u64) -> SealedBlock {
    let tip = chain.tip().expect("chain has a block");
    SealedBlock {
        round,
        device_id: chain.owner().to_owned(),
        index: tip.header.index,
        block_size_mb: tip.body.block_size_mb,
        chain_size_mb: tip.body.chain_size_mb,
        block_bytes: tip.serialized_len(),
        chain_bytes: chain.serialized_len(),
    }
}

/// True when the best loss of the last `window` entries improves on the best
/// loss before them by less than `tol`, relative. `losses[0]` is the starting
/// model. Oscillation from rotating participants does not reset the rule.
pub fn converged(losses: &[f64], tol: f64, window: usize) -> bool {
    if window == 0 || losses.len() <= window {
        return false;
    }
    let (before, recent) = losses.split_at(losses.len() - window);
    let best_before = before.iter().copied().fold(f64::INFINITY, f64::min);
    let best_recent = recent.iter().copied().fold(f64::INFINITY, f64::min);
    best_before <= 0.0 || (best_before - best_recent) / best_before < tol
}

#[derive(Debug)]
pub struct SimOutcome {
    pub reports: Vec<RoundReport>,
    pub state: SimState,
    /// True when the run ended on the convergence rule.
    pub converged: bool,
}

/// Runs rounds until `n_rounds` or convergence.
pub fn run_state(mut state: SimState) -> Result<SimOutcome> {
    let mut reports = Vec::new();
    let mut losses = vec![state.global_loss()?];
    let mut stop = false;
    let end = state.round + state.cfg.n_rounds;
    while state.round < end {
        let r = state.run_round()?;
        if !r.status.is_skipped() {
            losses.push(r.global_loss);
        }
        reports.push(r);
        if state.cfg.early_stop && converged(&losses, state.cfg.convergence_tol, state.cfg.convergence_window)
        {
            stop = true;
            break;
        }
    }
    Ok(SimOutcome { reports, state, converged: stop })
}

/// Builds the state from `cfg`, runs it, and writes outputs when `out_dir` is set.
pub fn run_simulation(cfg: SimConfig, out_dir: Option<&Path>) -> Result<SimOutcome> {
    let outcome = run_state(SimState::new(cfg)?)?;
    if let Some(dir) = out_dir {
        write_outputs(&outcome, dir)?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rounds: u64) -> SimConfig {
        SimConfig {
            n_rounds: rounds,
            data: DataSource::Synthetic { rows: 1000 },
            pow_bits: 4,
            early_stop: false,
            ..SimConfig::default()
        }
    }

    #[test]
    fn phases_run_in_order() {
        let mut s = SimState::new(small(1)).unwrap();
        let r = s.run_round().unwrap();
        assert_eq!(r.phases, Phase::ORDER.to_vec());
        assert_eq!(r.status, RoundStatus::Aggregated);
    }

    #[test]
    fn committee_does_not_train() {
        let mut s = SimState::new(small(1)).unwrap();
        let r = s.run_round().unwrap();
        assert_eq!(r.committee.len(), 3);
        assert_eq!(r.trainers.len(), 7);
        assert!(r.trainers.iter().all(|t| !r.committee.contains(t)));
    }

    #[test]
    fn loss_drops_and_chains_grow() {
        let mut s = SimState::new(small(3)).unwrap();
        let l0 = s.global_loss().unwrap();
        for _ in 0..3 {
            s.run_round().unwrap();
        }
        assert!(s.global_loss().unwrap() < l0);
        s.verify_chains().unwrap();
        assert!(s.chains().values().any(|c| c.len() > 1));
    }

    #[test]
    fn offline_devices_are_gated() {
        let mut roster = generate_roster(&small(1));
        roster[0].device.offline = true;
        roster[1].device.profile.cpu_util_pct = 99.0;
        let mut probe = SimulatedProbe::new(ResourceProfile::default());
        for e in &roster {
            probe.configure(&e.device_id, e.device.clone());
        }
        let mut s = SimState::with_probe(small(1), &roster, Box::new(probe)).unwrap();
        let r = s.run_round().unwrap();
        assert_eq!(r.gated_out, vec!["dev-00".to_string(), "dev-01".to_string()]);
        assert_eq!(s.ledger().score("dev-00"), Some(50.0));
    }

    #[test]
    fn nobody_eligible_skips_round() {
        let mut roster = generate_roster(&small(1));
        for e in &mut roster {
            e.device.offline = true;
        }
        let mut probe = SimulatedProbe::new(ResourceProfile::default());
        for e in &roster {
            probe.configure(&e.device_id, e.device.clone());
        }
        let mut s = SimState::with_probe(small(1), &roster, Box::new(probe)).unwrap();
        let before = s.global().clone();
        let r = s.run_round().unwrap();
        assert_eq!(r.status, RoundStatus::NoEligibleDevices);
        assert!(matches!(r.status.error(), Some(Error::NoEligibleDevices)));
        assert_eq!(s.global(), &before);
    }

    #[test]
    fn convergence_rule() {
        assert!(!converged(&[10.0, 9.0, 8.0], 1e-4, 2));
        assert!(converged(&[10.0, 9.0, 9.0, 9.0], 1e-4, 2));
        assert!(!converged(&[10.0, 9.0, 9.0, 8.0], 1e-4, 2));
        // a two-round oscillation around a plateau counts as converged
        assert!(converged(&[10.0, 5.0, 5.001, 5.0, 5.001], 1e-4, 3));
    }
}
