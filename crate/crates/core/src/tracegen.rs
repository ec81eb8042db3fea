//! Random degree-trace synthesis from either queue model.
//!
//! CTDM traces sample the uniformized transfer chain by inverse
//! transform over cumulative column sums; BDTM traces iterate the
//! arrival/thinning recurrence directly, clamping at the degree
//! boundaries. Leaf and ultra coordinates evolve as independent chains.
//!
//! Reproducibility contract: every chain draws from its own ChaCha
//! substream keyed by (trace index, chain), so output is bitwise
//! identical for a fixed seed no matter how many traces are generated
//! in parallel or in what order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson};
use serde::Serialize;
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::queue::{self, QueueError, QueueParams, TransferMatrix};
use crate::types::{CrawlRecord, PeerId, PeerMode, PhaseState, TypeError};

#[derive(Debug, Error)]
pub enum TracegenError {
    #[error("initial state {state} outside the legal range {lo}..={hi} for the {side} chain")]
    BadInitialState {
        state: u32,
        lo: u32,
        hi: u32,
        side: &'static str,
    },
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Type(#[from] TypeError),
}

/// Which model drives the synthetic trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ctdm,
    Bdtm,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ctdm" => Ok(ModelKind::Ctdm),
            "bdtm" => Ok(ModelKind::Bdtm),
            other => Err(format!("unknown model {other:?} (expected ctdm or bdtm)")),
        }
    }
}

/// Everything one synthetic trace needs.
#[derive(Debug, Clone, Serialize)]
pub struct GenConfig {
    pub model: ModelKind,
    pub leaf: QueueParams,
    pub ultra: QueueParams,
    pub x0: PhaseState,
    pub steps: usize,
    pub seed: u64,
    /// Seconds between emitted samples; only affects timestamps.
    pub interval_secs: i64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), TracegenError> {
        let checks = [
            (self.x0.d_l, self.leaf.floor(), self.leaf.cap(), "leaf"),
            (self.x0.d_u, self.ultra.floor(), self.ultra.cap(), "ultra"),
        ];
        for (state, lo, hi, side) in checks {
            if state < lo || state > hi {
                return Err(TracegenError::BadInitialState {
                    state,
                    lo,
                    hi,
                    side,
                });
            }
        }
        Ok(())
    }
}

/// Per-column cumulative sums of a transfer matrix: C(i, j) is the
/// probability of landing at or below index i when leaving j.
#[derive(Debug, Clone)]
pub struct CumulativeMatrix {
    pub floor: u32,
    entries: Vec<Vec<f64>>,
}

impl CumulativeMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i][j]
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }
}

/// Column-wise running sums; the last row of every column reaches 1.
pub fn cumulative(transfer: &TransferMatrix) -> CumulativeMatrix {
    let n = transfer.dim();
    let mut entries = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut acc = 0.0;
        for i in 0..n {
            acc += transfer.get(i, j);
            entries[i][j] = acc;
        }
    }
    CumulativeMatrix {
        floor: transfer.floor,
        entries,
    }
}

/// Inverse-transform step: the unique k with C(k-1, j) <= r < C(k, j),
/// reading C(-1, j) as 0. A draw landing past the last accumulated
/// value (possible only through round-off) clamps to the top index.
pub fn ctdm_step(cumulative: &CumulativeMatrix, current: usize, r: f64) -> usize {
    let n = cumulative.dim();
    for k in 0..n {
        if r < cumulative.get(k, current) {
            return k;
        }
    }
    n - 1
}

fn sample_poisson<R: Rng>(lambda: f64, rng: &mut R) -> u32 {
    if lambda <= 0.0 {
        return 0;
    }
    let dist = Poisson::new(lambda).expect("positive lambda");
    dist.sample(rng) as u32
}

/// One discrete-time step: Poisson(lambda) arrivals, one uniform draw
/// per current connection counting drops at probability mu, result
/// clamped to the legal degree range. Returns the next degree along
/// with the arrival and drop counts that produced it.
pub fn bdtm_step<R: Rng>(degree: u32, params: &QueueParams, rng: &mut R) -> (u32, u32, u32) {
    let arrivals = sample_poisson(params.lambda, rng);
    let mut drops = 0u32;
    for _ in 0..degree {
        if rng.gen::<f64>() <= params.mu {
            drops += 1;
        }
    }
    let raw = degree as i64 + arrivals as i64 - drops as i64;
    let next = raw.clamp(params.floor() as i64, params.cap() as i64) as u32;
    (next, arrivals, drops)
}

/// How one coordinate moved in one step, in connection terms. The
/// clamped boundary at the floor absorbs surplus drops, so `arrivals`
/// and `departures` describe the realized neighbor-set change, not the
/// raw draws.
#[derive(Debug, Clone, Copy)]
struct StepDelta {
    next: u32,
    arrivals: u32,
    departures: u32,
}

enum ChainSampler {
    Ctdm { cumulative: CumulativeMatrix },
    Bdtm { params: QueueParams },
}

impl ChainSampler {
    fn new(model: ModelKind, params: &QueueParams) -> Result<Self, TracegenError> {
        match model {
            ModelKind::Ctdm => Ok(ChainSampler::Ctdm {
                cumulative: cumulative(&queue::ctdm_uniformized_transfer(params)?),
            }),
            ModelKind::Bdtm => {
                // surface bad mu now rather than on the first step
                queue::bdtm_transfer(params)?;
                Ok(ChainSampler::Bdtm { params: *params })
            }
        }
    }

    fn step<R: Rng>(&self, degree: u32, rng: &mut R) -> StepDelta {
        match self {
            ChainSampler::Ctdm { cumulative } => {
                let current = (degree - cumulative.floor) as usize;
                let r = rng.gen::<f64>();
                let next_idx = ctdm_step(cumulative, current, r);
                let next = cumulative.floor + next_idx as u32;
                // the uniformized chain moves one connection at a time
                let (arrivals, departures) = match next_idx.cmp(&current) {
                    std::cmp::Ordering::Greater => (1, 0),
                    std::cmp::Ordering::Less => (0, 1),
                    std::cmp::Ordering::Equal => (0, 0),
                };
                StepDelta {
                    next,
                    arrivals,
                    departures,
                }
            }
            ChainSampler::Bdtm { params } => {
                let (next, arrivals, drops) = bdtm_step(degree, params, rng);
                // reconcile the raw draws with the clamped landing point
                let realized = next as i64 - degree as i64;
                let (arrivals, departures) = reconcile(realized, arrivals, drops);
                StepDelta {
                    next,
                    arrivals,
                    departures,
                }
            }
        }
    }
}

/// Trim raw (arrivals, drops) so their difference matches the clamped
/// degree change, dropping the surplus from whichever side overshot.
fn reconcile(realized: i64, arrivals: u32, drops: u32) -> (u32, u32) {
    let raw = arrivals as i64 - drops as i64;
    if raw == realized {
        return (arrivals, drops);
    }
    if raw < realized {
        // clamped at the floor: some drops never happened
        let excess = (realized - raw) as u32;
        (arrivals, drops.saturating_sub(excess))
    } else {
        // clamped at the cap: some arrivals were turned away
        let excess = (raw - realized) as u32;
        (arrivals.saturating_sub(excess), drops)
    }
}

/// Substream ids; each generated trace owns four, one per concern.
const STREAM_LEAF: u64 = 0;
const STREAM_ULTRA: u64 = 1;
const STREAM_NEIGHBORS: u64 = 2;
const STREAMS_PER_TRACE: u64 = 4;

fn chain_rng(seed: u64, trace_index: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(trace_index * STREAMS_PER_TRACE + stream);
    rng
}

/// Generate the degree sequence: n steps after the initial state, so
/// n+1 samples, timestamped at the configured interval.
pub fn generate(config: &GenConfig) -> Result<Vec<(i64, PhaseState)>, TracegenError> {
    generate_indexed(config, 0)
}

/// Like [`generate`], for the trace at `trace_index` within a batch.
pub fn generate_indexed(
    config: &GenConfig,
    trace_index: u64,
) -> Result<Vec<(i64, PhaseState)>, TracegenError> {
    config.validate()?;
    let leaf_chain = ChainSampler::new(config.model, &config.leaf)?;
    let ultra_chain = ChainSampler::new(config.model, &config.ultra)?;
    let mut leaf_rng = chain_rng(config.seed, trace_index, STREAM_LEAF);
    let mut ultra_rng = chain_rng(config.seed, trace_index, STREAM_ULTRA);
    let mut out = Vec::with_capacity(config.steps + 1);
    let mut state = config.x0;
    out.push((0, state));
    for step in 1..=config.steps {
        let d_l = leaf_chain.step(state.d_l, &mut leaf_rng).next;
        let d_u = ultra_chain.step(state.d_u, &mut ultra_rng).next;
        state = PhaseState { d_l, d_u };
        out.push((step as i64 * config.interval_secs, state));
    }
    Ok(out)
}

/// Pool of synthetic neighbor ids for one side of one trace: arrivals
/// mint fresh ids, departures evict uniformly-chosen victims.
struct NeighborPool {
    prefix: String,
    next_id: u64,
    members: Vec<PeerId>,
}

impl NeighborPool {
    fn new(prefix: String, initial: u32) -> Self {
        let mut pool = Self {
            prefix,
            next_id: 0,
            members: Vec::new(),
        };
        pool.admit(initial);
        pool
    }

    fn admit(&mut self, count: u32) {
        for _ in 0..count {
            self.members
                .push(PeerId(format!("{}{}", self.prefix, self.next_id)));
            self.next_id += 1;
        }
    }

    fn evict<R: Rng>(&mut self, count: u32, rng: &mut R) {
        for _ in 0..count {
            if self.members.is_empty() {
                break;
            }
            let victim = rng.gen_range(0..self.members.len());
            self.members.swap_remove(victim);
        }
    }

    fn as_set(&self) -> std::collections::BTreeSet<PeerId> {
        self.members.iter().cloned().collect()
    }
}

/// Generate a full crawl-record trace in the ingest format, with
/// synthetic neighbor identities so the whole analytics pipeline can
/// run end-to-end on model output.
pub fn generate_records(
    config: &GenConfig,
    trace_index: u64,
) -> Result<Vec<CrawlRecord>, TracegenError> {
    config.validate()?;
    let peer = PeerId(format!("gen-{trace_index}"));
    let software = match config.model {
        ModelKind::Ctdm => "model-ctdm",
        ModelKind::Bdtm => "model-bdtm",
    };
    let leaf_chain = ChainSampler::new(config.model, &config.leaf)?;
    let ultra_chain = ChainSampler::new(config.model, &config.ultra)?;
    let mut leaf_rng = chain_rng(config.seed, trace_index, STREAM_LEAF);
    let mut ultra_rng = chain_rng(config.seed, trace_index, STREAM_ULTRA);
    let mut victim_rng = chain_rng(config.seed, trace_index, STREAM_NEIGHBORS);

    let mut leaves = NeighborPool::new(format!("gen-{trace_index}-l"), config.x0.d_l);
    let mut ultras = NeighborPool::new(format!("gen-{trace_index}-u"), config.x0.d_u);

    let mut records = Vec::with_capacity(config.steps + 1);
    let push = |t: i64, leaves: &NeighborPool, ultras: &NeighborPool| {
        CrawlRecord::new(
            peer.clone(),
            t,
            PeerMode::Ultra,
            software.to_owned(),
            leaves.as_set(),
            ultras.as_set(),
        )
        .map_err(TracegenError::from)
    };
    records.push(push(0, &leaves, &ultras)?);
    let mut state = config.x0;
    for step in 1..=config.steps {
        let leaf_delta = leaf_chain.step(state.d_l, &mut leaf_rng);
        let ultra_delta = ultra_chain.step(state.d_u, &mut ultra_rng);
        leaves.evict(leaf_delta.departures, &mut victim_rng);
        leaves.admit(leaf_delta.arrivals);
        ultras.evict(ultra_delta.departures, &mut victim_rng);
        ultras.admit(ultra_delta.arrivals);
        state = PhaseState {
            d_l: leaf_delta.next,
            d_u: ultra_delta.next,
        };
        debug_assert_eq!(leaves.members.len() as u32, state.d_l);
        debug_assert_eq!(ultras.members.len() as u32, state.d_u);
        records.push(push(step as i64 * config.interval_secs, &leaves, &ultras)?);
    }
    Ok(records)
}

/// Generate many traces; parallel when enabled, with identical output
/// either way thanks to per-trace substreams.
pub fn generate_many(
    config: &GenConfig,
    count: usize,
) -> Result<Vec<Vec<CrawlRecord>>, TracegenError> {
    #[cfg(feature = "parallel")]
    {
        (0..count as u64)
            .into_par_iter()
            .map(|idx| generate_records(config, idx))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        generate_many_sequential(config, count)
    }
}

pub fn generate_many_sequential(
    config: &GenConfig,
    count: usize,
) -> Result<Vec<Vec<CrawlRecord>>, TracegenError> {
    (0..count as u64)
        .map(|idx| generate_records(config, idx))
        .collect()
}
