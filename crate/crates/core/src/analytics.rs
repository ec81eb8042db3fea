//! Phase-space statics and transition dynamics over crawl traces:
//! intensity grids, transition pair fields, stream directions, the
//! four-region partition, its transfer matrix, and the equilibrium
//! distribution.
//!
//! Aggregations over many traces run on rayon when the `parallel`
//! feature is enabled (the default). Every parallel path has a
//! `_sequential` sibling producing identical results; counts and sums
//! are merged commutatively so the split cannot change any output.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::linalg::{self, LinalgError};
use crate::types::{PeerTrace, PhaseState, RegionId, SoftwareProfile};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("transfer matrix column {col} sums to {sum}, not 1")]
    NotColumnStochastic { col: usize, sum: f64 },
    #[error("matrix entry ({row},{col}) = {value} outside [0,1]")]
    EntryOutOfRange { row: usize, col: usize, value: f64 },
    #[error("region chain is reducible; closed classes: {0}")]
    ReducibleChain(String),
    #[error("no transition pairs with both endpoints inside the partition")]
    NoUsablePairs,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// How many peers sat at each lattice point, plus an emission transform
/// tag. The fourth-root transform only affects emitted values; counts
/// stay raw.
#[derive(Debug, Clone, Serialize)]
pub struct IntensityGrid {
    /// counts[d_l][d_u]
    counts: Vec<Vec<u64>>,
    total: u64,
    pub transform: IntensityTransform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityTransform {
    Linear,
    FourthRoot,
}

impl IntensityGrid {
    fn from_counts(counts: BTreeMap<PhaseState, u64>) -> Self {
        let max_l = counts.keys().map(|s| s.d_l).max().unwrap_or(0) as usize;
        let max_u = counts.keys().map(|s| s.d_u).max().unwrap_or(0) as usize;
        let mut grid = vec![vec![0u64; max_u + 1]; max_l + 1];
        let mut total = 0;
        for (state, count) in counts {
            grid[state.d_l as usize][state.d_u as usize] = count;
            total += count;
        }
        Self {
            counts: grid,
            total,
            transform: IntensityTransform::Linear,
        }
    }

    pub fn count(&self, state: &PhaseState) -> u64 {
        self.counts
            .get(state.d_l as usize)
            .and_then(|row| row.get(state.d_u as usize))
            .copied()
            .unwrap_or(0)
    }

    /// Total count; equals the number of contributing records.
    pub fn total(&self) -> u64 {
        self.total
    }

    /// Nonzero cells as (state, raw count, emitted value).
    pub fn cells(&self) -> impl Iterator<Item = (PhaseState, u64, f64)> + '_ {
        self.counts.iter().enumerate().flat_map(move |(dl, row)| {
            row.iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(move |(du, &c)| {
                    let value = match self.transform {
                        IntensityTransform::Linear => c as f64,
                        IntensityTransform::FourthRoot => (c as f64).sqrt().sqrt(),
                    };
                    (
                        PhaseState {
                            d_l: dl as u32,
                            d_u: du as u32,
                        },
                        c,
                        value,
                    )
                })
        })
    }
}

/// Count state occurrences over any record iterator.
pub fn intensity_sequential<'a, I>(states: I) -> IntensityGrid
where
    I: IntoIterator<Item = PhaseState>,
{
    let mut counts: BTreeMap<PhaseState, u64> = BTreeMap::new();
    for state in states {
        *counts.entry(state).or_insert(0) += 1;
    }
    IntensityGrid::from_counts(counts)
}

/// Count state occurrences across traces, in parallel when enabled.
pub fn intensity(traces: &[PeerTrace]) -> IntensityGrid {
    #[cfg(feature = "parallel")]
    {
        let counts = traces
            .par_iter()
            .fold(BTreeMap::<PhaseState, u64>::new, |mut acc, trace| {
                for state in trace.states() {
                    *acc.entry(state).or_insert(0) += 1;
                }
                acc
            })
            .reduce(BTreeMap::new, |mut a, b| {
                for (state, count) in b {
                    *a.entry(state).or_insert(0) += count;
                }
                a
            });
        IntensityGrid::from_counts(counts)
    }
    #[cfg(not(feature = "parallel"))]
    {
        intensity_sequential(traces.iter().flat_map(|t| t.states().collect::<Vec<_>>()))
    }
}

/// Consecutive (from, to) state pairs of one trace: n records yield n-1
/// pairs; traces with fewer than two records yield none.
pub fn transition_pairs(trace: &PeerTrace) -> Vec<(PhaseState, PhaseState)> {
    trace
        .records()
        .windows(2)
        .map(|w| (w[0].state(), w[1].state()))
        .collect()
}

/// All transition pairs across traces, concatenated in trace order.
pub fn transition_pairs_all(traces: &[PeerTrace]) -> Vec<(PhaseState, PhaseState)> {
    #[cfg(feature = "parallel")]
    {
        traces.par_iter().flat_map_iter(transition_pairs).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        transition_pairs_all_sequential(traces)
    }
}

pub fn transition_pairs_all_sequential(traces: &[PeerTrace]) -> Vec<(PhaseState, PhaseState)> {
    traces.iter().flat_map(|t| transition_pairs(t)).collect()
}

/// Lattice cell after optional 2x2 grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Cell {
    pub d_l: u32,
    pub d_u: u32,
}

fn cell_of(state: &PhaseState, group: u32) -> Cell {
    Cell {
        d_l: state.d_l / group,
        d_u: state.d_u / group,
    }
}

/// Mean displacement out of each cell: the "stream direction" field.
#[derive(Debug, Clone, Serialize)]
pub struct StreamField {
    pub group: u32,
    pub min_support: u64,
    pub cells: BTreeMap<Cell, StreamCell>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StreamCell {
    pub mean_dx: f64,
    pub mean_dy: f64,
    pub support: u64,
}

/// Average the displacement of pairs by origin cell. Cells with fewer
/// than `min_support` pairs are omitted.
pub fn stream_field(
    pairs: &[(PhaseState, PhaseState)],
    group: u32,
    min_support: u64,
) -> StreamField {
    assert!(group == 1 || group == 2, "grouping must be 1 or 2");
    let mut sums: BTreeMap<Cell, (f64, f64, u64)> = BTreeMap::new();
    for (from, to) in pairs {
        let (dx, dy) = from.displacement_to(to);
        let entry = sums.entry(cell_of(from, group)).or_insert((0.0, 0.0, 0));
        entry.0 += dx;
        entry.1 += dy;
        entry.2 += 1;
    }
    let cells = sums
        .into_iter()
        .filter(|(_, (_, _, n))| *n >= min_support)
        .map(|(cell, (sx, sy, n))| {
            (
                cell,
                StreamCell {
                    mean_dx: sx / n as f64,
                    mean_dy: sy / n as f64,
                    support: n,
                },
            )
        })
        .collect();
    StreamField {
        group,
        min_support,
        cells,
    }
}

/// Fraction of the displacement length kept when emitting transition
/// field arrows, so lines stay near their cell in plots.
pub const FIELD_SHRINK: f64 = 0.4;

/// One arrow of an incoming/outgoing transition field, in grouped-cell
/// coordinates, already shrunk for emission.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FieldArrow {
    pub dx: f64,
    pub dy: f64,
    /// Displacement length before shrinking, in grouped-cell units.
    pub magnitude: f64,
}

/// Per-cell transition arrows. Outgoing fields key arrows by the cell a
/// transition starts in; incoming fields by the cell it ends in.
#[derive(Debug, Clone, Serialize)]
pub struct TransitionField {
    pub group: u32,
    pub cells: BTreeMap<Cell, Vec<FieldArrow>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FieldDirection {
    Outgoing,
    Incoming,
}

fn transition_field(
    pairs: &[(PhaseState, PhaseState)],
    group: u32,
    direction: FieldDirection,
) -> TransitionField {
    assert!(group == 1 || group == 2, "grouping must be 1 or 2");
    let mut cells: BTreeMap<Cell, Vec<FieldArrow>> = BTreeMap::new();
    for (from, to) in pairs {
        let from_cell = cell_of(from, group);
        let to_cell = cell_of(to, group);
        let dx = to_cell.d_l as f64 - from_cell.d_l as f64;
        let dy = to_cell.d_u as f64 - from_cell.d_u as f64;
        let (key, sign) = match direction {
            FieldDirection::Outgoing => (from_cell, 1.0),
            // incoming arrows point from the origin toward the keyed cell
            FieldDirection::Incoming => (to_cell, 1.0),
        };
        let magnitude = (dx * dx + dy * dy).sqrt();
        cells.entry(key).or_default().push(FieldArrow {
            dx: sign * dx * FIELD_SHRINK,
            dy: sign * dy * FIELD_SHRINK,
            magnitude,
        });
    }
    TransitionField { group, cells }
}

/// Arrows keyed by starting cell; zero-length arrows (self-pairs) are
/// kept as stationary evidence.
pub fn outgoing_field(pairs: &[(PhaseState, PhaseState)], group: u32) -> TransitionField {
    transition_field(pairs, group, FieldDirection::Outgoing)
}

/// Arrows keyed by ending cell.
pub fn incoming_field(pairs: &[(PhaseState, PhaseState)], group: u32) -> TransitionField {
    transition_field(pairs, group, FieldDirection::Incoming)
}

/// P(stay | at state): self-pair share among pairs leaving each state.
/// States with no outgoing pairs are absent from the map.
pub fn stationary_probability(pairs: &[(PhaseState, PhaseState)]) -> BTreeMap<PhaseState, f64> {
    let mut outgoing: BTreeMap<PhaseState, (u64, u64)> = BTreeMap::new();
    for (from, to) in pairs {
        let entry = outgoing.entry(*from).or_insert((0, 0));
        entry.0 += 1;
        if from == to {
            entry.1 += 1;
        }
    }
    outgoing
        .into_iter()
        .map(|(state, (total, stays))| (state, stays as f64 / total as f64))
        .collect()
}

/// Region containing `state`, under the lower-ordinal tie-break for
/// shared edges; `None` when outside all four rectangles.
pub fn region_of(state: &PhaseState, profile: &SoftwareProfile) -> Option<RegionId> {
    RegionId::ALL
        .into_iter()
        .find(|region| profile.region_rects().get(*region).contains(state))
}

/// 4x4 column-stochastic matrix over [LSR, USR, TB, UDR]: entry (i, j)
/// is P(next region = i | current region = j).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionTransferMatrix {
    entries: [[f64; 4]; 4],
}

impl RegionTransferMatrix {
    pub const COLUMN_TOLERANCE: f64 = 1e-9;

    /// Strict constructor: every column must sum to 1 within 1e-9.
    pub fn new(entries: [[f64; 4]; 4]) -> Result<Self, AnalyticsError> {
        Self::validate(&entries, Self::COLUMN_TOLERANCE)?;
        Ok(Self { entries })
    }

    /// Accept a nearly-stochastic matrix (e.g. one printed to four
    /// decimals) and renormalize each column exactly. Column sums must
    /// still be within `tol` of 1 before renormalization.
    pub fn new_renormalized(mut entries: [[f64; 4]; 4], tol: f64) -> Result<Self, AnalyticsError> {
        Self::validate(&entries, tol)?;
        for col in 0..4 {
            let sum: f64 = (0..4).map(|row| entries[row][col]).sum();
            for row in 0..4 {
                entries[row][col] /= sum;
            }
        }
        Ok(Self { entries })
    }

    fn validate(entries: &[[f64; 4]; 4], tol: f64) -> Result<(), AnalyticsError> {
        for col in 0..4 {
            for row in 0..4 {
                let value = entries[row][col];
                if !(0.0..=1.0).contains(&value) {
                    return Err(AnalyticsError::EntryOutOfRange { row, col, value });
                }
            }
            let sum: f64 = (0..4).map(|row| entries[row][col]).sum();
            if (sum - 1.0).abs() > tol {
                return Err(AnalyticsError::NotColumnStochastic { col, sum });
            }
        }
        Ok(())
    }

    pub fn get(&self, to: RegionId, from: RegionId) -> f64 {
        self.entries[to.index()][from.index()]
    }

    pub fn entries(&self) -> &[[f64; 4]; 4] {
        &self.entries
    }

    fn to_matrix(&self) -> linalg::Matrix {
        self.entries.iter().map(|row| row.to_vec()).collect()
    }
}

/// Distribution over the four regions, summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionDistribution {
    entries: [f64; 4],
}

impl RegionDistribution {
    pub fn new(entries: [f64; 4]) -> Result<Self, AnalyticsError> {
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(AnalyticsError::NotColumnStochastic { col: 0, sum });
        }
        if let Some((i, &value)) = entries.iter().enumerate().find(|(_, &v)| v < 0.0) {
            return Err(AnalyticsError::EntryOutOfRange {
                row: i,
                col: 0,
                value,
            });
        }
        Ok(Self { entries })
    }

    pub fn get(&self, region: RegionId) -> f64 {
        self.entries[region.index()]
    }

    pub fn entries(&self) -> &[f64; 4] {
        &self.entries
    }
}

/// Bookkeeping from transfer-matrix estimation: excluded pairs and any
/// region whose column had to fall back to the identity.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TransferDiagnostics {
    /// Pairs with at least one endpoint outside every rectangle.
    pub pairs_outside_partition: u64,
    /// Regions with no outgoing pairs; their columns are identity.
    pub empty_regions: Vec<RegionId>,
}

/// Estimate the region transfer matrix G and the endpoint distribution
/// p from transition pairs. Pairs with an endpoint outside all regions
/// are excluded and tallied. A region with no outgoing pairs gets the
/// identity column and is flagged.
pub fn region_transfer_matrix(
    pairs: &[(PhaseState, PhaseState)],
    profile: &SoftwareProfile,
) -> Result<
    (
        RegionTransferMatrix,
        RegionDistribution,
        TransferDiagnostics,
    ),
    AnalyticsError,
> {
    let mut counts = [[0u64; 4]; 4]; // counts[to][from]
    let mut endpoint_counts = [0u64; 4];
    let mut diagnostics = TransferDiagnostics::default();
    for (from, to) in pairs {
        match (region_of(from, profile), region_of(to, profile)) {
            (Some(from_region), Some(to_region)) => {
                counts[to_region.index()][from_region.index()] += 1;
                endpoint_counts[from_region.index()] += 1;
                endpoint_counts[to_region.index()] += 1;
            }
            _ => diagnostics.pairs_outside_partition += 1,
        }
    }
    let total_endpoints: u64 = endpoint_counts.iter().sum();
    if total_endpoints == 0 {
        return Err(AnalyticsError::NoUsablePairs);
    }
    let mut entries = [[0.0; 4]; 4];
    for from in 0..4 {
        let outgoing: u64 = (0..4).map(|to| counts[to][from]).sum();
        if outgoing == 0 {
            entries[from][from] = 1.0;
            diagnostics
                .empty_regions
                .push(RegionId::from_index(from).unwrap());
        } else {
            for to in 0..4 {
                entries[to][from] = counts[to][from] as f64 / outgoing as f64;
            }
        }
    }
    let p = {
        let mut p = [0.0; 4];
        for (i, &c) in endpoint_counts.iter().enumerate() {
            p[i] = c as f64 / total_endpoints as f64;
        }
        RegionDistribution::new(p)?
    };
    Ok((RegionTransferMatrix::new(entries)?, p, diagnostics))
}

/// Equilibrium h of a region chain: G h = h, sum h = 1, h >= 0.
///
/// Errors when more than one closed communicating class exists (the
/// stationary vector is then not unique), listing the classes.
pub fn equilibrium(g: &RegionTransferMatrix) -> Result<RegionDistribution, AnalyticsError> {
    let h =
        linalg::stationary_of_stochastic(&g.to_matrix(), RegionTransferMatrix::COLUMN_TOLERANCE)
            .map_err(reducible_to_regions)?;
    RegionDistribution::new([h[0], h[1], h[2], h[3]])
}

fn reducible_to_regions(e: LinalgError) -> AnalyticsError {
    match e {
        LinalgError::Reducible(classes) => {
            let named: Vec<String> = classes
                .iter()
                .map(|class| {
                    let names: Vec<String> = class
                        .iter()
                        .filter_map(|&i| RegionId::from_index(i))
                        .map(|r| r.to_string())
                        .collect();
                    format!("{{{}}}", names.join(","))
                })
                .collect();
            AnalyticsError::ReducibleChain(named.join(" "))
        }
        other => AnalyticsError::Linalg(other),
    }
}

/// Equilibrium restricted to the regions that actually have outgoing
/// pairs, with zeros elsewhere. Exact when the unvisited regions are
/// unreachable from the visited ones (their identity columns would
/// otherwise make the full chain reducible).
pub fn equilibrium_restricted(
    g: &RegionTransferMatrix,
    diagnostics: &TransferDiagnostics,
) -> Result<RegionDistribution, AnalyticsError> {
    if diagnostics.empty_regions.is_empty() {
        return equilibrium(g);
    }
    let active: Vec<usize> = (0..4)
        .filter(|i| !diagnostics.empty_regions.iter().any(|r| r.index() == *i))
        .collect();
    if active.is_empty() {
        return Err(AnalyticsError::NoUsablePairs);
    }
    // a region with no outgoing pairs that is still entered from a kept
    // one is absorbing under the identity-column convention; the chain
    // is then genuinely reducible and restriction cannot help
    let mut absorbing = Vec::new();
    for removed in &diagnostics.empty_regions {
        if active.iter().any(|&j| g.entries[removed.index()][j] > 0.0) {
            absorbing.push(removed.to_string());
        }
    }
    if !absorbing.is_empty() {
        return Err(AnalyticsError::ReducibleChain(format!(
            "entered but never left: {{{}}}",
            absorbing.join(",")
        )));
    }
    let sub: linalg::Matrix = active
        .iter()
        .map(|&i| active.iter().map(|&j| g.entries[i][j]).collect())
        .collect();
    let h_sub = linalg::stationary_of_stochastic(&sub, RegionTransferMatrix::COLUMN_TOLERANCE)
        .map_err(|e| match e {
            // translate sub-matrix indices back to region names
            LinalgError::Reducible(classes) => {
                let named: Vec<String> = classes
                    .iter()
                    .map(|class| {
                        let names: Vec<String> = class
                            .iter()
                            .filter_map(|&slot| RegionId::from_index(active[slot]))
                            .map(|r| r.to_string())
                            .collect();
                        format!("{{{}}}", names.join(","))
                    })
                    .collect();
                AnalyticsError::ReducibleChain(named.join(" "))
            }
            other => AnalyticsError::Linalg(other),
        })?;
    let mut h = [0.0; 4];
    for (slot, &i) in active.iter().enumerate() {
        h[i] = h_sub[slot];
    }
    RegionDistribution::new(h)
}
