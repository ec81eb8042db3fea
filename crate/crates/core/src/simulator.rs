//! Discrete-event simulation of the slot-based connection protocol:
//! N peers in leaf/ultra modes, admission by free slots, active
//! connecting below the ultra threshold, exponential connection and
//! peer lifetimes, and hazard-driven mode switching. The run emits
//! crawl records in the ingest format, so the whole analytics pipeline
//! can consume simulated overlays.
//!
//! Design notes.
//!
//! Connection demand is a single global Poisson stream of proposals:
//! each event picks a uniform initiator which acts on its own needs
//! (an ultra below its cap proposes an ultra-ultra edge). Per-peer
//! arrival rates are therefore emergent, not imposed. Leaves and
//! ultras below their active thresholds instead batch-fill straight
//! away, retrying on a fast scan clock; that is the protocol's active
//! connect, and it is what makes newly promoted peers jump to the
//! threshold before drifting upward.
//!
//! Mode switches drop every existing connection first. That keeps an
//! edge's endpoint modes fixed for its whole life, which is what lets
//! each peer bucket its neighbors as leaf or ultra without rescanning
//! on every switch.
//!
//! The event loop is strictly sequential with a fixed tie-break
//! (time, kind ordinal, sequence number), and all randomness flows
//! from one seeded generator, so runs are bitwise reproducible. Only
//! distinct runs parallelize.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{CrawlRecord, PeerId, PeerMode, QueueLimits};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config invalid: {0}")]
    Config(String),
    #[error("invariant violated at t={t}s: {what}")]
    Invariant { t: i64, what: String },
    #[error(transparent)]
    Type(#[from] crate::types::TypeError),
}

/// How leaves decide to try for promotion. Kept as an enum so other
/// trigger shapes can slot in without touching the engine.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum PromotionRule {
    /// Each leaf draws an exponential promotion delay at this hazard.
    Hazard { per_hour: f64 },
}

impl PromotionRule {
    fn hazard(&self) -> f64 {
        match self {
            PromotionRule::Hazard { per_hour } => *per_hour,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_peers: usize,
    /// Share of peers starting in ultra mode.
    pub initial_ultra_fraction: f64,
    /// Slot limits for ultra-mode peers.
    pub ultra_limits: QueueLimits,
    /// A leaf holds at most this many ultra connections...
    pub leaf_max_ultra: u32,
    /// ...and actively keeps this many.
    pub leaf_target_ultra: u32,
    /// An ultra that cannot restore at least this many ultra
    /// connections after an active pass degrades to leaf.
    pub core_threshold: u32,
    /// Mean lifetime of a leaf-ultra connection, hours.
    pub leaf_conn_mean_hours: f64,
    /// Mean lifetime of an ultra-ultra connection, hours.
    pub ultra_conn_mean_hours: f64,
    /// Peer churn on/off.
    pub peer_churn: bool,
    pub ultra_lifetime_mean_hours: f64,
    pub leaf_lifetime_mean_hours: f64,
    /// Retry clock for peers sitting below their active threshold,
    /// scans per hour.
    pub active_connect_rate_per_hour: f64,
    /// Global proposal stream: events per peer per hour.
    pub passive_attempt_rate_per_hour: f64,
    pub promotion: PromotionRule,
    /// Rare spontaneous ultra-to-leaf demotion dropping everything.
    pub kickout_hazard_per_hour: f64,
    pub crawl_interval_secs: i64,
    pub duration_hours: f64,
    pub seed: u64,
    pub software_tag: String,
    /// Wire the initial topology near the stable points instead of
    /// letting every peer bootstrap from zero.
    pub warm_start: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_peers: 1000,
            initial_ultra_fraction: 0.075,
            ultra_limits: QueueLimits::default(),
            leaf_max_ultra: 3,
            leaf_target_ultra: 2,
            core_threshold: 2,
            leaf_conn_mean_hours: 2.4,
            ultra_conn_mean_hours: 3.1,
            peer_churn: true,
            ultra_lifetime_mean_hours: 11.23,
            leaf_lifetime_mean_hours: 7.8,
            active_connect_rate_per_hour: 20.0,
            passive_attempt_rate_per_hour: 20.0,
            promotion: PromotionRule::Hazard { per_hour: 0.0088 },
            kickout_hazard_per_hour: 0.002,
            crawl_interval_secs: 1800,
            duration_hours: 23.0,
            seed: 1,
            software_tag: "sim-limewire".into(),
            warm_start: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_peers < 2 {
            return Err(SimError::Config("need at least 2 peers".into()));
        }
        if !(0.0..=1.0).contains(&self.initial_ultra_fraction) {
            return Err(SimError::Config(
                "initial_ultra_fraction outside [0,1]".into(),
            ));
        }
        if self.leaf_target_ultra > self.leaf_max_ultra {
            return Err(SimError::Config("leaf target above leaf max".into()));
        }
        if self.core_threshold > self.ultra_limits.l_u {
            return Err(SimError::Config("core threshold above l_u".into()));
        }
        if self.crawl_interval_secs <= 0 || self.duration_hours <= 0.0 {
            return Err(SimError::Config("non-positive crawl schedule".into()));
        }
        let rates = [
            self.leaf_conn_mean_hours,
            self.ultra_conn_mean_hours,
            self.ultra_lifetime_mean_hours,
            self.leaf_lifetime_mean_hours,
        ];
        if rates.iter().any(|&r| r <= 0.0) {
            return Err(SimError::Config("lifetime means must be positive".into()));
        }
        if self.active_connect_rate_per_hour < 0.0
            || self.passive_attempt_rate_per_hour < 0.0
            || self.promotion.hazard() < 0.0
            || self.kickout_hazard_per_hour < 0.0
        {
            return Err(SimError::Config("rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Which slot pool on the target an attempt asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    /// The initiator is a leaf, occupying one of the target's leaf slots.
    Leaf,
    /// Ultra-ultra edge, occupying ultra slots on both sides.
    Ultra,
}

/// Outcome of one admission check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmitOutcome {
    Accepted,
    NoFreeSlot,
    PeerDeparted,
    AlreadyConnected,
    NotAnUltra,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    PeerLeave(u32),
    PeerJoin,
    ConnectionDrop { a: u32, b: u32, edge_seq: u64 },
    Promotion(u32),
    Kickout(u32),
    ActiveScan(u32),
    PassiveAttempt,
    CrawlTick,
}

impl EventKind {
    fn ordinal(&self) -> u8 {
        match self {
            EventKind::PeerLeave(_) => 0,
            EventKind::PeerJoin => 1,
            EventKind::ConnectionDrop { .. } => 2,
            EventKind::Promotion(_) => 3,
            EventKind::Kickout(_) => 4,
            EventKind::ActiveScan(_) => 5,
            EventKind::PassiveAttempt => 6,
            // snapshots observe a settled instant
            EventKind::CrawlTick => 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SimEvent {
    time_ms: u64,
    kind: EventKind,
    seq: u64,
}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; invert for earliest-first
        (other.time_ms, other.kind.ordinal(), other.seq).cmp(&(
            self.time_ms,
            self.kind.ordinal(),
            self.seq,
        ))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug)]
struct Peer {
    name: PeerId,
    alive: bool,
    mode: PeerMode,
    leaf_neighbors: BTreeSet<u32>,
    ultra_neighbors: BTreeSet<u32>,
    scan_pending: bool,
}

impl Peer {
    fn d_l(&self) -> u32 {
        self.leaf_neighbors.len() as u32
    }

    fn d_u(&self) -> u32 {
        self.ultra_neighbors.len() as u32
    }
}

/// Aggregate run statistics, enough to close the loop against the
/// queue model's estimators.
#[derive(Debug, Clone, Default, Serialize)]
pub struct SimSummary {
    pub peers_created: u64,
    pub peer_deaths: u64,
    pub promotions: u64,
    pub demotions: u64,
    pub kickouts: u64,
    pub edge_accepts: u64,
    pub edge_drops: u64,
    /// Enquiries that reached an alive ultra's leaf slots after the
    /// bootstrap wiring, and how many were admitted.
    pub leaf_enquiries: u64,
    pub leaf_admitted: u64,
    /// Same for ultra-ultra slots.
    pub ultra_enquiries: u64,
    pub ultra_admitted: u64,
    /// One-time wiring burst at t=0, kept apart so rate estimates see
    /// only steady operation.
    pub bootstrap_enquiries: u64,
    /// Peer-hours integrated per mode.
    pub ultra_mode_hours: f64,
    pub leaf_mode_hours: f64,
    pub crawl_ticks: u64,
    pub records_emitted: u64,
}

impl SimSummary {
    /// Mean leaf-slot enquiries arriving per ultra per crawl interval.
    pub fn leaf_enquiry_rate_per_interval(&self, interval_secs: i64) -> f64 {
        if self.ultra_mode_hours == 0.0 {
            return 0.0;
        }
        self.leaf_enquiries as f64 / self.ultra_mode_hours * (interval_secs as f64 / 3600.0)
    }

    pub fn ultra_enquiry_rate_per_interval(&self, interval_secs: i64) -> f64 {
        if self.ultra_mode_hours == 0.0 {
            return 0.0;
        }
        self.ultra_enquiries as f64 / self.ultra_mode_hours * (interval_secs as f64 / 3600.0)
    }
}

/// A finished run: every crawl record plus the summary counters.
#[derive(Debug)]
pub struct SimOutput {
    pub records: Vec<CrawlRecord>,
    pub summary: SimSummary,
}

pub struct Simulation {
    config: SimConfig,
    rng: ChaCha12Rng,
    peers: Vec<Peer>,
    /// Alive ultra-mode peer ids; the candidate pool for every attempt.
    ultras: BTreeSet<u32>,
    alive: Vec<u32>,
    /// (lo, hi) edge key to the sequence number of the live edge.
    edges: BTreeMap<(u32, u32), u64>,
    queue: BinaryHeap<SimEvent>,
    event_seq: u64,
    edge_seq: u64,
    now_ms: u64,
    end_ms: u64,
    summary: SimSummary,
    /// For mode-hour integration.
    last_mode_change_ms: u64,
}

const MS_PER_HOUR: f64 = 3_600_000.0;

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let rng = ChaCha12Rng::seed_from_u64(config.seed);
        let end_ms = (config.duration_hours * MS_PER_HOUR).round() as u64;
        let mut sim = Self {
            config,
            rng,
            peers: Vec::new(),
            ultras: BTreeSet::new(),
            alive: Vec::new(),
            edges: BTreeMap::new(),
            queue: BinaryHeap::new(),
            event_seq: 0,
            edge_seq: 0,
            now_ms: 0,
            end_ms,
            summary: SimSummary::default(),
            last_mode_change_ms: 0,
        };
        sim.bootstrap()?;
        Ok(sim)
    }

    fn schedule(&mut self, time_ms: u64, kind: EventKind) {
        self.event_seq += 1;
        self.queue.push(SimEvent {
            time_ms,
            kind,
            seq: self.event_seq,
        });
    }

    fn schedule_in_hours(&mut self, hours: f64, kind: EventKind) {
        let delay_ms = (hours * MS_PER_HOUR).round().max(0.0) as u64;
        self.schedule(self.now_ms + delay_ms, kind);
    }

    fn exp_hours(&mut self, mean_hours: f64) -> f64 {
        // inverse transform; u in (0,1]
        let u: f64 = 1.0 - self.rng.gen::<f64>();
        -mean_hours * u.ln()
    }

    fn accumulate_mode_hours(&mut self) {
        let dt_hours = (self.now_ms - self.last_mode_change_ms) as f64 / MS_PER_HOUR;
        if dt_hours > 0.0 {
            let ultras = self.ultras.len() as f64;
            let leaves = self.alive.len() as f64 - ultras;
            self.summary.ultra_mode_hours += ultras * dt_hours;
            self.summary.leaf_mode_hours += leaves * dt_hours;
        }
        self.last_mode_change_ms = self.now_ms;
    }

    fn spawn_peer(&mut self, mode: PeerMode) -> u32 {
        let idx = self.peers.len() as u32;
        self.peers.push(Peer {
            name: PeerId(format!("sim-p{idx}")),
            alive: true,
            mode,
            leaf_neighbors: BTreeSet::new(),
            ultra_neighbors: BTreeSet::new(),
            scan_pending: false,
        });
        self.alive.push(idx);
        if mode == PeerMode::Ultra {
            self.ultras.insert(idx);
        }
        self.summary.peers_created += 1;
        // lifetime and mode hazards
        if self.config.peer_churn {
            let mean = match mode {
                PeerMode::Ultra => self.config.ultra_lifetime_mean_hours,
                _ => self.config.leaf_lifetime_mean_hours,
            };
            let life = self.exp_hours(mean);
            self.schedule_in_hours(life, EventKind::PeerLeave(idx));
        }
        match mode {
            PeerMode::Leaf => self.arm_promotion(idx),
            PeerMode::Ultra => self.arm_kickout(idx),
            PeerMode::Unknown => {}
        }
        idx
    }

    fn arm_promotion(&mut self, peer: u32) {
        let hazard = self.config.promotion.hazard();
        if hazard > 0.0 {
            let delay = self.exp_hours(1.0 / hazard);
            self.schedule_in_hours(delay, EventKind::Promotion(peer));
        }
    }

    fn arm_kickout(&mut self, peer: u32) {
        let hazard = self.config.kickout_hazard_per_hour;
        if hazard > 0.0 {
            let delay = self.exp_hours(1.0 / hazard);
            self.schedule_in_hours(delay, EventKind::Kickout(peer));
        }
    }

    fn bootstrap(&mut self) -> Result<(), SimError> {
        let n = self.config.n_peers;
        let n_ultra = ((n as f64) * self.config.initial_ultra_fraction).round() as usize;
        for i in 0..n {
            let mode = if i < n_ultra {
                PeerMode::Ultra
            } else {
                PeerMode::Leaf
            };
            self.spawn_peer(mode);
        }
        if self.config.warm_start && n_ultra >= 2 {
            // pre-wire the ultra core toward its cap
            let target_edges = n_ultra * (self.config.ultra_limits.b_u as usize - 2) / 2;
            let mut failures = 0;
            while self.edges.len() < target_edges && failures < target_edges * 20 {
                let a = self.random_ultra(None);
                let b = self.random_ultra(Some(a));
                if self.try_connect(a, b, SlotKind::Ultra) != AdmitOutcome::Accepted {
                    failures += 1;
                }
            }
        }
        // leaves wire themselves to their target straight away
        let leaves: Vec<u32> = self
            .alive
            .clone()
            .into_iter()
            .filter(|&p| self.peers[p as usize].mode == PeerMode::Leaf)
            .collect();
        for leaf in leaves {
            self.step_active_connect(leaf);
        }
        // the wiring burst is not part of steady operation; keep the
        // enquiry counters clean for rate estimation
        self.summary.bootstrap_enquiries =
            self.summary.leaf_enquiries + self.summary.ultra_enquiries;
        self.summary.leaf_enquiries = 0;
        self.summary.leaf_admitted = 0;
        self.summary.ultra_enquiries = 0;
        self.summary.ultra_admitted = 0;
        // clocks
        self.schedule(0, EventKind::CrawlTick);
        self.arm_passive_stream();
        Ok(())
    }

    fn arm_passive_stream(&mut self) {
        let per_hour = self.config.passive_attempt_rate_per_hour * self.alive.len() as f64;
        if per_hour > 0.0 {
            let delay = self.exp_hours(1.0 / per_hour);
            self.schedule_in_hours(delay, EventKind::PassiveAttempt);
        }
    }

    fn random_alive(&mut self) -> u32 {
        let i = self.rng.gen_range(0..self.alive.len());
        self.alive[i]
    }

    fn random_ultra(&mut self, exclude: Option<u32>) -> u32 {
        loop {
            let i = self.rng.gen_range(0..self.ultras.len());
            let pick = *self.ultras.iter().nth(i).expect("index in range");
            if Some(pick) != exclude {
                return pick;
            }
        }
    }

    /// Admission check on the target side: a free slot of the requested
    /// kind, with distinct outcomes for dead targets and duplicates.
    pub fn admit_outcome(&self, initiator: u32, target: u32, kind: SlotKind) -> AdmitOutcome {
        let t = &self.peers[target as usize];
        if !t.alive {
            return AdmitOutcome::PeerDeparted;
        }
        if t.mode != PeerMode::Ultra {
            return AdmitOutcome::NotAnUltra;
        }
        if t.leaf_neighbors.contains(&initiator) || t.ultra_neighbors.contains(&initiator) {
            return AdmitOutcome::AlreadyConnected;
        }
        let free = match kind {
            SlotKind::Leaf => t.d_l() < self.config.ultra_limits.b_l,
            SlotKind::Ultra => t.d_u() < self.config.ultra_limits.b_u,
        };
        if free {
            AdmitOutcome::Accepted
        } else {
            AdmitOutcome::NoFreeSlot
        }
    }

    /// Full attempt: initiator-side capacity, target-side admission,
    /// then edge creation with a drawn lifetime.
    fn try_connect(&mut self, initiator: u32, target: u32, kind: SlotKind) -> AdmitOutcome {
        if initiator == target {
            return AdmitOutcome::AlreadyConnected;
        }
        let p = &self.peers[initiator as usize];
        if !p.alive {
            return AdmitOutcome::PeerDeparted;
        }
        let initiator_free = match kind {
            SlotKind::Leaf => p.mode == PeerMode::Leaf && p.d_u() < self.config.leaf_max_ultra,
            SlotKind::Ultra => p.mode == PeerMode::Ultra && p.d_u() < self.config.ultra_limits.b_u,
        };
        if !initiator_free {
            return AdmitOutcome::NoFreeSlot;
        }
        let outcome = self.admit_outcome(initiator, target, kind);
        // enquiry accounting: the target saw a real arrival
        match (kind, outcome) {
            (SlotKind::Leaf, AdmitOutcome::Accepted) => {
                self.summary.leaf_enquiries += 1;
                self.summary.leaf_admitted += 1;
            }
            (SlotKind::Leaf, AdmitOutcome::NoFreeSlot) => self.summary.leaf_enquiries += 1,
            (SlotKind::Ultra, AdmitOutcome::Accepted) => {
                self.summary.ultra_enquiries += 1;
                self.summary.ultra_admitted += 1;
            }
            (SlotKind::Ultra, AdmitOutcome::NoFreeSlot) => self.summary.ultra_enquiries += 1,
            _ => {}
        }
        if outcome != AdmitOutcome::Accepted {
            return outcome;
        }
        self.create_edge(initiator, target);
        outcome
    }

    fn create_edge(&mut self, a: u32, b: u32) {
        let key = (a.min(b), a.max(b));
        self.edge_seq += 1;
        self.edges.insert(key, self.edge_seq);
        let a_mode = self.peers[a as usize].mode;
        let b_mode = self.peers[b as usize].mode;
        match b_mode {
            PeerMode::Leaf => self.peers[a as usize].leaf_neighbors.insert(b),
            _ => self.peers[a as usize].ultra_neighbors.insert(b),
        };
        match a_mode {
            PeerMode::Leaf => self.peers[b as usize].leaf_neighbors.insert(a),
            _ => self.peers[b as usize].ultra_neighbors.insert(a),
        };
        self.summary.edge_accepts += 1;
        let mean = if a_mode == PeerMode::Leaf || b_mode == PeerMode::Leaf {
            self.config.leaf_conn_mean_hours
        } else {
            self.config.ultra_conn_mean_hours
        };
        let life = self.exp_hours(mean);
        let (lo, hi) = key;
        self.schedule_in_hours(
            life,
            EventKind::ConnectionDrop {
                a: lo,
                b: hi,
                edge_seq: self.edge_seq,
            },
        );
    }

    fn remove_edge(&mut self, a: u32, b: u32) {
        let key = (a.min(b), a.max(b));
        if self.edges.remove(&key).is_none() {
            return;
        }
        self.peers[a as usize].leaf_neighbors.remove(&b);
        self.peers[a as usize].ultra_neighbors.remove(&b);
        self.peers[b as usize].leaf_neighbors.remove(&a);
        self.peers[b as usize].ultra_neighbors.remove(&a);
        self.summary.edge_drops += 1;
    }

    /// Does this peer currently sit below its active-connect threshold?
    fn wants_active(&self, peer: u32) -> bool {
        let p = &self.peers[peer as usize];
        if !p.alive {
            return false;
        }
        match p.mode {
            PeerMode::Leaf => p.d_u() < self.config.leaf_target_ultra,
            PeerMode::Ultra => p.d_u() < self.config.ultra_limits.l_u,
            PeerMode::Unknown => false,
        }
    }

    fn request_scan(&mut self, peer: u32) {
        if self.peers[peer as usize].scan_pending || self.config.active_connect_rate_per_hour == 0.0
        {
            return;
        }
        self.peers[peer as usize].scan_pending = true;
        let delay = self.exp_hours(1.0 / self.config.active_connect_rate_per_hour);
        self.schedule_in_hours(delay, EventKind::ActiveScan(peer));
    }

    /// How many extra attempts one active pass may burn on full or
    /// otherwise unusable targets before giving up until the next scan.
    const ACTIVE_PASS_SLACK: u32 = 12;

    /// Active connect: attempt uniformly sampled known ultras, without
    /// replacement, until the mode's threshold is reached or the
    /// candidate pool is exhausted. Full targets reject the enquiry and
    /// the initiator moves on; a pass gives up after a bounded number
    /// of failures and retries on its scan clock instead.
    /// Returns the number of attempts issued.
    pub fn step_active_connect(&mut self, peer: u32) -> u32 {
        let mut attempts = 0;
        if self.wants_active(peer) {
            let known = |p: &Peer, u: u32| {
                !p.leaf_neighbors.contains(&u) && !p.ultra_neighbors.contains(&u)
            };
            let mut candidates: Vec<u32> = {
                let p = &self.peers[peer as usize];
                self.ultras
                    .iter()
                    .copied()
                    .filter(|&u| u != peer && known(p, u))
                    .collect()
            };
            let mut budget = {
                let p = &self.peers[peer as usize];
                let need = match p.mode {
                    PeerMode::Leaf => self.config.leaf_target_ultra.saturating_sub(p.d_u()),
                    _ => self.config.ultra_limits.l_u.saturating_sub(p.d_u()),
                };
                need + Self::ACTIVE_PASS_SLACK
            };
            while self.wants_active(peer) && !candidates.is_empty() && budget > 0 {
                let slot = self.rng.gen_range(0..candidates.len());
                let pick = candidates.swap_remove(slot);
                attempts += 1;
                budget -= 1;
                self.try_connect(peer, pick, self.slot_kind_of(peer));
            }
        }
        // demotion check: an ultra that cannot hold the core together
        if let Some(switch) = self.mode_switch_needed(peer) {
            self.apply_mode_switch(peer, switch);
        } else if self.wants_active(peer) {
            self.request_scan(peer);
        }
        attempts
    }

    fn slot_kind_of(&self, peer: u32) -> SlotKind {
        match self.peers[peer as usize].mode {
            PeerMode::Leaf => SlotKind::Leaf,
            _ => SlotKind::Ultra,
        }
    }

    /// The only engine-driven switch: degradation of a starved ultra.
    /// Promotions and kickouts arrive as hazard events instead.
    pub fn mode_switch_needed(&self, peer: u32) -> Option<ModeSwitch> {
        let p = &self.peers[peer as usize];
        if p.alive && p.mode == PeerMode::Ultra && p.d_u() < self.config.core_threshold {
            Some(ModeSwitch::Demote)
        } else {
            None
        }
    }

    fn drop_all_edges(&mut self, peer: u32) {
        let neighbors: Vec<u32> = {
            let p = &self.peers[peer as usize];
            p.leaf_neighbors
                .iter()
                .chain(p.ultra_neighbors.iter())
                .copied()
                .collect()
        };
        for n in neighbors {
            self.remove_edge(peer, n);
            // the counterpart may now be under-connected
            if self.wants_active(n) {
                self.request_scan(n);
            }
        }
    }

    fn apply_mode_switch(&mut self, peer: u32, switch: ModeSwitch) {
        self.accumulate_mode_hours();
        self.drop_all_edges(peer);
        match switch {
            ModeSwitch::Promote => {
                self.peers[peer as usize].mode = PeerMode::Ultra;
                self.ultras.insert(peer);
                self.summary.promotions += 1;
                self.arm_kickout(peer);
                self.step_active_connect(peer);
            }
            ModeSwitch::Demote | ModeSwitch::KickOut => {
                self.peers[peer as usize].mode = PeerMode::Leaf;
                self.ultras.remove(&peer);
                if switch == ModeSwitch::KickOut {
                    self.summary.kickouts += 1;
                } else {
                    self.summary.demotions += 1;
                }
                self.arm_promotion(peer);
                self.step_active_connect(peer);
            }
        }
    }

    fn kill_peer(&mut self, peer: u32) {
        if !self.peers[peer as usize].alive {
            return;
        }
        self.accumulate_mode_hours();
        self.drop_all_edges(peer);
        self.peers[peer as usize].alive = false;
        self.ultras.remove(&peer);
        self.alive.retain(|&p| p != peer);
        self.summary.peer_deaths += 1;
    }

    fn snapshot(
        &mut self,
        sink: &mut dyn FnMut(CrawlRecord) -> Result<(), SimError>,
    ) -> Result<(), SimError> {
        let t = (self.now_ms / 1000) as i64;
        self.check_invariants(t)?;
        for &idx in &self.alive {
            let p = &self.peers[idx as usize];
            let leaf_names: BTreeSet<PeerId> = p
                .leaf_neighbors
                .iter()
                .map(|&n| self.peers[n as usize].name.clone())
                .collect();
            let ultra_names: BTreeSet<PeerId> = p
                .ultra_neighbors
                .iter()
                .map(|&n| self.peers[n as usize].name.clone())
                .collect();
            let record = CrawlRecord::new(
                p.name.clone(),
                t,
                p.mode,
                self.config.software_tag.clone(),
                leaf_names,
                ultra_names,
            )?;
            sink(record)?;
            self.summary.records_emitted += 1;
        }
        self.summary.crawl_ticks += 1;
        Ok(())
    }

    fn check_invariants(&self, t: i64) -> Result<(), SimError> {
        let fail = |what: String| Err(SimError::Invariant { t, what });
        for &idx in &self.alive {
            let p = &self.peers[idx as usize];
            match p.mode {
                PeerMode::Ultra => {
                    if p.d_l() > self.config.ultra_limits.b_l
                        || p.d_u() > self.config.ultra_limits.b_u
                    {
                        return fail(format!(
                            "ultra {} over caps at ({}, {})",
                            p.name,
                            p.d_l(),
                            p.d_u()
                        ));
                    }
                }
                PeerMode::Leaf => {
                    if p.d_l() != 0 {
                        return fail(format!("leaf {} hosts leaves", p.name));
                    }
                    if p.d_u() > self.config.leaf_max_ultra {
                        return fail(format!("leaf {} over ultra cap", p.name));
                    }
                }
                PeerMode::Unknown => return fail("peer with unknown mode".into()),
            }
            for &n in p.leaf_neighbors.iter().chain(p.ultra_neighbors.iter()) {
                let q = &self.peers[n as usize];
                if !q.alive {
                    return fail(format!("{} lists dead neighbor {}", p.name, q.name));
                }
                let symmetric = q.leaf_neighbors.contains(&idx) || q.ultra_neighbors.contains(&idx);
                if !symmetric {
                    return fail(format!("asymmetric edge {} -> {}", p.name, q.name));
                }
            }
        }
        let live = self.edges.len() as u64;
        if self.summary.edge_accepts - self.summary.edge_drops != live {
            return fail(format!(
                "edge conservation broken: {} accepts - {} drops != {} live",
                self.summary.edge_accepts, self.summary.edge_drops, live
            ));
        }
        Ok(())
    }

    fn handle(
        &mut self,
        event: SimEvent,
        sink: &mut dyn FnMut(CrawlRecord) -> Result<(), SimError>,
    ) -> Result<(), SimError> {
        match event.kind {
            EventKind::PeerLeave(peer) => {
                self.kill_peer(peer);
                // closed-system churn: a fresh peer takes the slot
                self.schedule(self.now_ms, EventKind::PeerJoin);
            }
            EventKind::PeerJoin => {
                self.accumulate_mode_hours();
                let idx = self.spawn_peer(PeerMode::Leaf);
                self.step_active_connect(idx);
            }
            EventKind::ConnectionDrop { a, b, edge_seq } => {
                let key = (a, b);
                if self.edges.get(&key) == Some(&edge_seq) {
                    self.remove_edge(a, b);
                    for peer in [a, b] {
                        if self.wants_active(peer) {
                            self.request_scan(peer);
                        }
                    }
                }
            }
            EventKind::Promotion(peer) => {
                let p = &self.peers[peer as usize];
                if p.alive && p.mode == PeerMode::Leaf {
                    self.apply_mode_switch(peer, ModeSwitch::Promote);
                }
            }
            EventKind::Kickout(peer) => {
                let p = &self.peers[peer as usize];
                if p.alive && p.mode == PeerMode::Ultra {
                    self.apply_mode_switch(peer, ModeSwitch::KickOut);
                }
            }
            EventKind::ActiveScan(peer) => {
                self.peers[peer as usize].scan_pending = false;
                if self.peers[peer as usize].alive {
                    self.step_active_connect(peer);
                }
            }
            EventKind::PassiveAttempt => {
                let initiator = self.random_alive();
                let p = &self.peers[initiator as usize];
                // the ambient connection demand: ultras with spare slots
                // keep proposing; other picks are idle ticks
                if p.mode == PeerMode::Ultra
                    && p.d_u() < self.config.ultra_limits.b_u
                    && self.ultras.len() >= 2
                {
                    let target = self.random_ultra(Some(initiator));
                    self.try_connect(initiator, target, SlotKind::Ultra);
                }
                self.arm_passive_stream();
            }
            EventKind::CrawlTick => {
                self.snapshot(sink)?;
                let next = self.now_ms + (self.config.crawl_interval_secs * 1000) as u64;
                if next <= self.end_ms {
                    self.schedule(next, EventKind::CrawlTick);
                }
            }
        }
        Ok(())
    }

    /// Run to the configured duration, handing every crawl record to
    /// `sink` as it is produced. Suits long runs that would not fit in
    /// memory.
    pub fn run_streaming<F>(mut self, mut sink: F) -> Result<SimSummary, SimError>
    where
        F: FnMut(CrawlRecord) -> Result<(), SimError>,
    {
        while let Some(event) = self.queue.pop() {
            if event.time_ms > self.end_ms {
                break;
            }
            self.now_ms = event.time_ms;
            self.handle(event, &mut sink)?;
        }
        self.now_ms = self.end_ms;
        self.accumulate_mode_hours();
        Ok(self.summary)
    }

    /// Run to the configured duration and hand back records + summary.
    pub fn run(self) -> Result<SimOutput, SimError> {
        let mut records = Vec::new();
        let summary = self.run_streaming(|record| {
            records.push(record);
            Ok(())
        })?;
        Ok(SimOutput { records, summary })
    }

    /// Peer count currently alive in ultra mode (test hook).
    pub fn ultra_count(&self) -> usize {
        self.ultras.len()
    }
}

/// The three switch directions the engine applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeSwitch {
    Promote,
    Demote,
    KickOut,
}

/// Convenience: build and run in one call.
pub fn run(config: SimConfig) -> Result<SimOutput, SimError> {
    Simulation::new(config)?.run()
}
