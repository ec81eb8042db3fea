//! Domain types shared by every other module: phase-space states, crawl
//! records, peer traces, and per-implementation software profiles.
//!
//! All types validate their invariants at construction and are immutable
//! afterwards, so they can be shared freely across threads.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hard upper bound on either degree coordinate. Real overlays top out
/// near 50; anything past this is corrupt input and is rejected at
/// ingest rather than clamped.
pub const DEGREE_CAP: u32 = 128;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TypeError {
    #[error("degree {value} exceeds hard cap {DEGREE_CAP}")]
    DegreeCapExceeded { value: u32 },
    #[error("peer {peer}: leaf and ultra neighbor sets overlap ({count} shared ids)")]
    NeighborSetsOverlap { peer: String, count: usize },
    #[error("peer {peer}: record lists itself as a neighbor")]
    SelfLoop { peer: String },
    #[error("trace records must be strictly increasing in time (t={prev} then t={next})")]
    UnorderedTrace { prev: i64, next: i64 },
    #[error("trace mixes records of peers {first} and {second}")]
    MixedPeers { first: String, second: String },
    #[error("trace must contain at least one record")]
    EmptyTrace,
    #[error("queue limits invalid: {0}")]
    InvalidLimits(String),
    #[error("software profile invalid: {0}")]
    InvalidProfile(String),
}

/// A point (d_l, d_u) in the leaf-degree x ultra-degree lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhaseState {
    pub d_l: u32,
    pub d_u: u32,
}

impl PhaseState {
    pub fn new(d_l: u32, d_u: u32) -> Result<Self, TypeError> {
        if d_l > DEGREE_CAP {
            return Err(TypeError::DegreeCapExceeded { value: d_l });
        }
        if d_u > DEGREE_CAP {
            return Err(TypeError::DegreeCapExceeded { value: d_u });
        }
        Ok(Self { d_l, d_u })
    }

    /// Euclidean norm of the displacement from `self` to `other`.
    pub fn distance(&self, other: &PhaseState) -> f64 {
        let dx = other.d_l as f64 - self.d_l as f64;
        let dy = other.d_u as f64 - self.d_u as f64;
        (dx * dx + dy * dy).sqrt()
    }

    /// Displacement vector `other - self` as reals.
    pub fn displacement_to(&self, other: &PhaseState) -> (f64, f64) {
        (
            other.d_l as f64 - self.d_l as f64,
            other.d_u as f64 - self.d_u as f64,
        )
    }
}

impl fmt::Display for PhaseState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.d_l, self.d_u)
    }
}

/// Role a peer plays in the two-tier overlay at one observation.
///
/// `Unknown` is a first-class observation, not an absence: many crawl
/// responses simply do not state the mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeerMode {
    Leaf,
    Ultra,
    Unknown,
}

impl fmt::Display for PeerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PeerMode::Leaf => write!(f, "leaf"),
            PeerMode::Ultra => write!(f, "ultra"),
            PeerMode::Unknown => write!(f, "unknown"),
        }
    }
}

/// Opaque peer identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PeerId(pub String);

impl PeerId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PeerId {
    fn from(s: &str) -> Self {
        PeerId(s.to_owned())
    }
}

impl From<String> for PeerId {
    fn from(s: String) -> Self {
        PeerId(s)
    }
}

/// One timestamped crawl response for one peer.
///
/// Construction checks the neighbor sets are disjoint, contain no
/// self-loop, and stay under [`DEGREE_CAP`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRecord", into = "RawRecord")]
pub struct CrawlRecord {
    peer_id: PeerId,
    t: i64,
    mode: PeerMode,
    software: String,
    leaf_neighbors: BTreeSet<PeerId>,
    ultra_neighbors: BTreeSet<PeerId>,
}

/// Wire form of a [`CrawlRecord`]: one JSONL object per crawl response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecord {
    pub peer: String,
    pub t: i64,
    pub mode: PeerMode,
    pub sw: String,
    pub leaves: Vec<String>,
    pub ultras: Vec<String>,
}

impl TryFrom<RawRecord> for CrawlRecord {
    type Error = TypeError;

    fn try_from(raw: RawRecord) -> Result<Self, TypeError> {
        CrawlRecord::new(
            PeerId(raw.peer),
            raw.t,
            raw.mode,
            raw.sw,
            raw.leaves.into_iter().map(PeerId).collect(),
            raw.ultras.into_iter().map(PeerId).collect(),
        )
    }
}

impl From<CrawlRecord> for RawRecord {
    fn from(rec: CrawlRecord) -> Self {
        RawRecord {
            peer: rec.peer_id.0,
            t: rec.t,
            mode: rec.mode,
            sw: rec.software,
            leaves: rec.leaf_neighbors.into_iter().map(|p| p.0).collect(),
            ultras: rec.ultra_neighbors.into_iter().map(|p| p.0).collect(),
        }
    }
}

impl CrawlRecord {
    pub fn new(
        peer_id: PeerId,
        t: i64,
        mode: PeerMode,
        software: String,
        leaf_neighbors: BTreeSet<PeerId>,
        ultra_neighbors: BTreeSet<PeerId>,
    ) -> Result<Self, TypeError> {
        let overlap = leaf_neighbors.intersection(&ultra_neighbors).count();
        if overlap > 0 {
            return Err(TypeError::NeighborSetsOverlap {
                peer: peer_id.0,
                count: overlap,
            });
        }
        if leaf_neighbors.contains(&peer_id) || ultra_neighbors.contains(&peer_id) {
            return Err(TypeError::SelfLoop { peer: peer_id.0 });
        }
        // validates the derived state against the cap
        PhaseState::new(leaf_neighbors.len() as u32, ultra_neighbors.len() as u32)?;
        Ok(Self {
            peer_id,
            t,
            mode,
            software,
            leaf_neighbors,
            ultra_neighbors,
        })
    }

    pub fn peer_id(&self) -> &PeerId {
        &self.peer_id
    }

    pub fn t(&self) -> i64 {
        self.t
    }

    pub fn mode(&self) -> PeerMode {
        self.mode
    }

    pub fn software(&self) -> &str {
        &self.software
    }

    pub fn leaf_neighbors(&self) -> &BTreeSet<PeerId> {
        &self.leaf_neighbors
    }

    pub fn ultra_neighbors(&self) -> &BTreeSet<PeerId> {
        &self.ultra_neighbors
    }

    /// The phase-space state derived from this record: neighbor set sizes.
    pub fn state(&self) -> PhaseState {
        PhaseState {
            d_l: self.leaf_neighbors.len() as u32,
            d_u: self.ultra_neighbors.len() as u32,
        }
    }
}

/// Pure function form of [`CrawlRecord::state`].
pub fn state_of(record: &CrawlRecord) -> PhaseState {
    record.state()
}

/// A time-ordered sequence of crawl responses for one peer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerTrace {
    peer_id: PeerId,
    records: Vec<CrawlRecord>,
}

impl PeerTrace {
    pub fn new(records: Vec<CrawlRecord>) -> Result<Self, TypeError> {
        let first = records.first().ok_or(TypeError::EmptyTrace)?;
        let peer_id = first.peer_id.clone();
        for pair in records.windows(2) {
            if pair[1].t <= pair[0].t {
                return Err(TypeError::UnorderedTrace {
                    prev: pair[0].t,
                    next: pair[1].t,
                });
            }
        }
        if let Some(bad) = records.iter().find(|r| r.peer_id != peer_id) {
            return Err(TypeError::MixedPeers {
                first: peer_id.0,
                second: bad.peer_id.0.clone(),
            });
        }
        Ok(Self { peer_id, records })
    }

    pub fn peer_id(&self) -> &PeerId {
        &self.peer_id
    }

    pub fn records(&self) -> &[CrawlRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Phase states in record order.
    pub fn states(&self) -> impl Iterator<Item = PhaseState> + '_ {
        self.records.iter().map(CrawlRecord::state)
    }
}

/// The four-way partition of phase space, in fixed ordinal order.
///
/// The order matters: matrices and distributions over regions are always
/// indexed `[LSR, USR, TB, UDR]`, and states on a shared rectangle edge
/// resolve to the region with the lower ordinal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionId {
    /// Leaf Stable Region.
    Lsr = 0,
    /// Ultra Stable Region.
    Usr = 1,
    /// Transition Belt.
    Tb = 2,
    /// Ultra Degradation Region.
    Udr = 3,
}

impl RegionId {
    pub const ALL: [RegionId; 4] = [RegionId::Lsr, RegionId::Usr, RegionId::Tb, RegionId::Udr];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<RegionId> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegionId::Lsr => write!(f, "LSR"),
            RegionId::Usr => write!(f, "USR"),
            RegionId::Tb => write!(f, "TB"),
            RegionId::Udr => write!(f, "UDR"),
        }
    }
}

/// Inclusive axis-aligned rectangle on the degree lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub d_l_min: u32,
    pub d_l_max: u32,
    pub d_u_min: u32,
    pub d_u_max: u32,
}

impl Rect {
    pub fn new(d_l_min: u32, d_l_max: u32, d_u_min: u32, d_u_max: u32) -> Self {
        Self {
            d_l_min,
            d_l_max,
            d_u_min,
            d_u_max,
        }
    }

    pub fn contains(&self, s: &PhaseState) -> bool {
        s.d_l >= self.d_l_min
            && s.d_l <= self.d_l_max
            && s.d_u >= self.d_u_min
            && s.d_u <= self.d_u_max
    }

    /// True when the two rectangles share interior area (more than an
    /// edge or corner). Shared edges are legal; the ordinal tie-break
    /// decides ownership of points on them.
    pub fn overlaps_area(&self, other: &Rect) -> bool {
        let w = self.d_l_max.min(other.d_l_max) as i64 - self.d_l_min.max(other.d_l_min) as i64;
        let h = self.d_u_max.min(other.d_u_max) as i64 - self.d_u_min.max(other.d_u_min) as i64;
        w > 0 && h > 0
    }
}

/// Slot limits of an ultra-mode peer: `b_l` leaf slots, `b_u` ultra
/// slots, and the active-connect threshold `l_u` below which a peer
/// hunts for ultra connections itself instead of waiting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueLimits {
    pub b_l: u32,
    pub b_u: u32,
    pub l_u: u32,
}

impl QueueLimits {
    pub fn new(b_l: u32, b_u: u32, l_u: u32) -> Result<Self, TypeError> {
        if b_l == 0 {
            return Err(TypeError::InvalidLimits("b_l must be positive".into()));
        }
        if l_u >= b_u {
            return Err(TypeError::InvalidLimits(format!(
                "l_u ({l_u}) must be below b_u ({b_u})"
            )));
        }
        Ok(Self { b_l, b_u, l_u })
    }
}

impl Default for QueueLimits {
    /// LimeWire factory defaults.
    fn default() -> Self {
        Self {
            b_l: 30,
            b_u: 32,
            l_u: 20,
        }
    }
}

/// Rectangles of the four-way partition, one per [`RegionId`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionRects {
    pub lsr: Rect,
    pub usr: Rect,
    pub tb: Rect,
    pub udr: Rect,
}

impl RegionRects {
    pub fn get(&self, region: RegionId) -> &Rect {
        match region {
            RegionId::Lsr => &self.lsr,
            RegionId::Usr => &self.usr,
            RegionId::Tb => &self.tb,
            RegionId::Udr => &self.udr,
        }
    }
}

/// Per-implementation constants: stable points, transition-belt bounds,
/// partition rectangles, and slot limits.
///
/// The stable points and belt bounds are measured properties of each
/// implementation; the rectangles are tunable partition data and can be
/// overridden from a profile file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProfile", into = "RawProfile")]
pub struct SoftwareProfile {
    name: String,
    leaf_stable_point: PhaseState,
    ultra_stable_point: PhaseState,
    belt_lo: u32,
    belt_hi: u32,
    region_rects: RegionRects,
    slot_limits: QueueLimits,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfile {
    name: String,
    leaf_stable_point: PhaseState,
    ultra_stable_point: PhaseState,
    belt_lo: u32,
    belt_hi: u32,
    region_rects: RegionRects,
    slot_limits: QueueLimits,
}

impl TryFrom<RawProfile> for SoftwareProfile {
    type Error = TypeError;

    fn try_from(raw: RawProfile) -> Result<Self, TypeError> {
        SoftwareProfile::new(
            raw.name,
            raw.leaf_stable_point,
            raw.ultra_stable_point,
            raw.belt_lo,
            raw.belt_hi,
            raw.region_rects,
            raw.slot_limits,
        )
    }
}

impl From<SoftwareProfile> for RawProfile {
    fn from(p: SoftwareProfile) -> Self {
        RawProfile {
            name: p.name,
            leaf_stable_point: p.leaf_stable_point,
            ultra_stable_point: p.ultra_stable_point,
            belt_lo: p.belt_lo,
            belt_hi: p.belt_hi,
            region_rects: p.region_rects,
            slot_limits: p.slot_limits,
        }
    }
}

impl SoftwareProfile {
    pub fn new(
        name: String,
        leaf_stable_point: PhaseState,
        ultra_stable_point: PhaseState,
        belt_lo: u32,
        belt_hi: u32,
        region_rects: RegionRects,
        slot_limits: QueueLimits,
    ) -> Result<Self, TypeError> {
        if belt_lo > belt_hi {
            return Err(TypeError::InvalidProfile(format!(
                "belt bounds reversed: {belt_lo} > {belt_hi}"
            )));
        }
        // re-validate the points: serde fills fields directly
        PhaseState::new(leaf_stable_point.d_l, leaf_stable_point.d_u)?;
        PhaseState::new(ultra_stable_point.d_l, ultra_stable_point.d_u)?;
        for (i, a) in RegionId::ALL.iter().enumerate() {
            for b in RegionId::ALL.iter().skip(i + 1) {
                if region_rects.get(*a).overlaps_area(region_rects.get(*b)) {
                    return Err(TypeError::InvalidProfile(format!(
                        "region rectangles {a} and {b} overlap"
                    )));
                }
            }
        }
        if !region_rects.lsr.contains(&leaf_stable_point) {
            return Err(TypeError::InvalidProfile(format!(
                "leaf stable point {leaf_stable_point} outside LSR rectangle"
            )));
        }
        if !region_rects.usr.contains(&ultra_stable_point) {
            return Err(TypeError::InvalidProfile(format!(
                "ultra stable point {ultra_stable_point} outside USR rectangle"
            )));
        }
        Ok(Self {
            name,
            leaf_stable_point,
            ultra_stable_point,
            belt_lo,
            belt_hi,
            region_rects,
            slot_limits,
        })
    }

    /// Built-in LimeWire 4.x profile: stable points (0,2) and (30,32),
    /// transition belt 23..=32, factory slot limits 30/32/20.
    pub fn limewire() -> Self {
        Self::new(
            "limewire".into(),
            PhaseState { d_l: 0, d_u: 2 },
            PhaseState { d_l: 30, d_u: 32 },
            23,
            32,
            RegionRects {
                lsr: Rect::new(0, 5, 0, 10),
                usr: Rect::new(20, 40, 28, 40),
                tb: Rect::new(0, 40, 23, 27),
                udr: Rect::new(6, 40, 0, 22),
            },
            QueueLimits {
                b_l: 30,
                b_u: 32,
                l_u: 20,
            },
        )
        .expect("built-in profile is valid")
    }

    /// Built-in BearShare profile: stable points (0,1) and (45,25),
    /// transition belt 23..=27. Slot limits are estimates consistent
    /// with the stable points; override from a profile file if known.
    pub fn bearshare() -> Self {
        Self::new(
            "bearshare".into(),
            PhaseState { d_l: 0, d_u: 1 },
            PhaseState { d_l: 45, d_u: 25 },
            23,
            27,
            RegionRects {
                lsr: Rect::new(0, 5, 0, 10),
                usr: Rect::new(35, 55, 20, 32),
                tb: Rect::new(0, 34, 23, 27),
                udr: Rect::new(6, 34, 0, 22),
            },
            QueueLimits {
                b_l: 45,
                b_u: 27,
                l_u: 17,
            },
        )
        .expect("built-in profile is valid")
    }

    /// Look up a built-in profile by name.
    pub fn builtin(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "limewire" => Some(Self::limewire()),
            "bearshare" => Some(Self::bearshare()),
            _ => None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn leaf_stable_point(&self) -> PhaseState {
        self.leaf_stable_point
    }

    pub fn ultra_stable_point(&self) -> PhaseState {
        self.ultra_stable_point
    }

    pub fn belt_lo(&self) -> u32 {
        self.belt_lo
    }

    pub fn belt_hi(&self) -> u32 {
        self.belt_hi
    }

    pub fn region_rects(&self) -> &RegionRects {
        &self.region_rects
    }

    pub fn slot_limits(&self) -> QueueLimits {
        self.slot_limits
    }
}
