//! Per-trace classification over the three-region disk partition.
//!
//! Each trace gets a 6-tuple attribute: the share of its reports inside
//! the leaf-stable disk, the ultra-stable disk, and the transition
//! complement (eta_l, eta_t, eta_u), plus per-region crossing ratios
//! (xi_l, xi_t, xi_u). The class is a pure function of that tuple.
//!
//! Crossing ratios are clamped to [0, 1]: a raw ratio can reach 2
//! (every visit both enters and leaves), and clamping makes the
//! "every visit is a single-report excursion" tests read as `xi = 1`.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::types::{PeerTrace, PhaseState, SoftwareProfile};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifierError {
    #[error("region disks overlap: centers {0} apart, radii sum {1}")]
    OverlappingDisks(f64, f64),
    #[error("radii must be positive")]
    NonPositiveRadius,
    #[error("trace has no records")]
    EmptyTrace,
    #[error("eta shares must be non-negative and sum to 1 (got {0})")]
    BadEtaSum(f64),
    #[error("xi ratios must lie in [0,1] and be 0 for unvisited regions")]
    BadXi,
}

/// Euclidean distance between two lattice states.
pub fn distance(a: &PhaseState, b: &PhaseState) -> f64 {
    a.distance(b)
}

/// The classifier's three-way partition: two disks around the stable
/// points and the complement.
#[derive(Debug, Clone, Serialize)]
pub struct ClassifierRegions {
    pub usp: PhaseState,
    pub lsp: PhaseState,
    pub r_u: f64,
    pub r_l: f64,
}

/// Which of the three classifier regions a state falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum DiskRegion {
    Leaf,
    Transition,
    Ultra,
}

impl ClassifierRegions {
    pub const DEFAULT_RADIUS: f64 = 10.0;

    pub fn new(
        usp: PhaseState,
        lsp: PhaseState,
        r_u: f64,
        r_l: f64,
    ) -> Result<Self, ClassifierError> {
        if r_u <= 0.0 || r_l <= 0.0 {
            return Err(ClassifierError::NonPositiveRadius);
        }
        let span = distance(&usp, &lsp);
        if span <= r_u + r_l {
            return Err(ClassifierError::OverlappingDisks(span, r_u + r_l));
        }
        Ok(Self { usp, lsp, r_u, r_l })
    }

    /// Disks of radius 10 around the profile's stable points.
    pub fn from_profile(profile: &SoftwareProfile) -> Result<Self, ClassifierError> {
        Self::new(
            profile.ultra_stable_point(),
            profile.leaf_stable_point(),
            Self::DEFAULT_RADIUS,
            Self::DEFAULT_RADIUS,
        )
    }

    pub fn region_of(&self, state: &PhaseState) -> DiskRegion {
        if distance(state, &self.usp) <= self.r_u {
            DiskRegion::Ultra
        } else if distance(state, &self.lsp) <= self.r_l {
            DiskRegion::Leaf
        } else {
            DiskRegion::Transition
        }
    }
}

/// The 6-tuple trace attribute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceAttributes {
    pub eta_l: f64,
    pub eta_t: f64,
    pub eta_u: f64,
    pub xi_l: f64,
    pub xi_t: f64,
    pub xi_u: f64,
}

impl TraceAttributes {
    pub fn new(
        eta_l: f64,
        eta_t: f64,
        eta_u: f64,
        xi_l: f64,
        xi_t: f64,
        xi_u: f64,
    ) -> Result<Self, ClassifierError> {
        let sum = eta_l + eta_t + eta_u;
        if eta_l < 0.0 || eta_t < 0.0 || eta_u < 0.0 || (sum - 1.0).abs() > 1e-9 {
            return Err(ClassifierError::BadEtaSum(sum));
        }
        for (eta, xi) in [(eta_l, xi_l), (eta_t, xi_t), (eta_u, xi_u)] {
            let in_range = (0.0..=1.0).contains(&xi);
            let zero_when_unvisited = eta > 0.0 || xi == 0.0;
            if !in_range || !zero_when_unvisited {
                return Err(ClassifierError::BadXi);
            }
        }
        Ok(Self {
            eta_l,
            eta_t,
            eta_u,
            xi_l,
            xi_t,
            xi_u,
        })
    }
}

/// Compute the 6-tuple for one trace.
///
/// eta shares are over all reports. xi for region X counts interior
/// transitions that enter or leave X, divided by the reports in X and
/// clamped to 1. Trace start and end are not crossings.
pub fn trace_attributes(
    trace: &PeerTrace,
    regions: &ClassifierRegions,
) -> Result<TraceAttributes, ClassifierError> {
    if trace.is_empty() {
        return Err(ClassifierError::EmptyTrace);
    }
    let assigned: Vec<DiskRegion> = trace.states().map(|s| regions.region_of(&s)).collect();
    let n = assigned.len() as f64;
    let mut reports: BTreeMap<DiskRegion, u64> = BTreeMap::new();
    for region in &assigned {
        *reports.entry(*region).or_insert(0) += 1;
    }
    let mut crossings: BTreeMap<DiskRegion, u64> = BTreeMap::new();
    for pair in assigned.windows(2) {
        if pair[0] != pair[1] {
            *crossings.entry(pair[0]).or_insert(0) += 1; // leave
            *crossings.entry(pair[1]).or_insert(0) += 1; // enter
        }
    }
    let share = |r: DiskRegion| reports.get(&r).copied().unwrap_or(0) as f64 / n;
    let xi = |r: DiskRegion| {
        let visits = reports.get(&r).copied().unwrap_or(0);
        if visits == 0 {
            0.0
        } else {
            (crossings.get(&r).copied().unwrap_or(0) as f64 / visits as f64).min(1.0)
        }
    };
    TraceAttributes::new(
        share(DiskRegion::Leaf),
        share(DiskRegion::Transition),
        share(DiskRegion::Ultra),
        xi(DiskRegion::Leaf),
        xi(DiskRegion::Transition),
        xi(DiskRegion::Ultra),
    )
}

/// The nine trace classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum TraceClass {
    StableLeaf,
    NeverStableUltra,
    StableUltra,
    Bipolar,
    UnstableLeaf,
    TotalChurn,
    StableUltraOccasionalChurn,
    HalfStableUltra,
    HalfUnstableUltra,
}

impl TraceClass {
    pub const ALL: [TraceClass; 9] = [
        TraceClass::StableLeaf,
        TraceClass::NeverStableUltra,
        TraceClass::StableUltra,
        TraceClass::Bipolar,
        TraceClass::UnstableLeaf,
        TraceClass::TotalChurn,
        TraceClass::StableUltraOccasionalChurn,
        TraceClass::HalfStableUltra,
        TraceClass::HalfUnstableUltra,
    ];
}

impl fmt::Display for TraceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            TraceClass::StableLeaf => "stable-leaf",
            TraceClass::NeverStableUltra => "never-stable-ultra",
            TraceClass::StableUltra => "stable-ultra",
            TraceClass::Bipolar => "bipolar",
            TraceClass::UnstableLeaf => "unstable-leaf",
            TraceClass::TotalChurn => "total-churn",
            TraceClass::StableUltraOccasionalChurn => "stable-ultra-occasional-churn",
            TraceClass::HalfStableUltra => "half-stable-ultra",
            TraceClass::HalfUnstableUltra => "half-unstable-ultra",
        };
        f.write_str(name)
    }
}

/// Classify one attribute tuple. Total: every valid tuple maps to
/// exactly one class, decided by the sign pattern of the eta shares and,
/// for the (0, +, +) pattern, the xi comparisons.
pub fn classify(attrs: &TraceAttributes) -> TraceClass {
    let l = attrs.eta_l > 0.0;
    let t = attrs.eta_t > 0.0;
    let u = attrs.eta_u > 0.0;
    match (l, t, u) {
        (true, false, false) => TraceClass::StableLeaf,
        (false, true, false) => TraceClass::NeverStableUltra,
        (false, false, true) => TraceClass::StableUltra,
        (true, false, true) => TraceClass::Bipolar,
        (true, true, false) => TraceClass::UnstableLeaf,
        (true, true, true) => TraceClass::TotalChurn,
        (false, true, true) => {
            if attrs.xi_t == 1.0 {
                TraceClass::StableUltraOccasionalChurn
            } else if attrs.xi_u == 1.0 {
                TraceClass::NeverStableUltra
            } else if attrs.xi_t <= attrs.xi_u {
                TraceClass::HalfStableUltra
            } else {
                TraceClass::HalfUnstableUltra
            }
        }
        // eta sums to 1, so the all-zero pattern cannot arise from a
        // validated tuple
        (false, false, false) => unreachable!("eta shares sum to 1"),
    }
}

/// One classified trace.
#[derive(Debug, Clone, Serialize)]
pub struct ClassifiedTrace {
    pub peer_id: String,
    pub attributes: TraceAttributes,
    pub class: TraceClass,
}

/// Classify every trace; parallel over traces when enabled.
pub fn classify_traces(traces: &[PeerTrace], regions: &ClassifierRegions) -> Vec<ClassifiedTrace> {
    let one = |trace: &PeerTrace| -> Option<ClassifiedTrace> {
        let attributes = trace_attributes(trace, regions).ok()?;
        Some(ClassifiedTrace {
            peer_id: trace.peer_id().to_string(),
            attributes,
            class: classify(&attributes),
        })
    };
    #[cfg(feature = "parallel")]
    {
        traces.par_iter().filter_map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        traces.iter().filter_map(one).collect()
    }
}

pub fn classify_traces_sequential(
    traces: &[PeerTrace],
    regions: &ClassifierRegions,
) -> Vec<ClassifiedTrace> {
    traces
        .iter()
        .filter_map(|trace| {
            let attributes = trace_attributes(trace, regions).ok()?;
            Some(ClassifiedTrace {
                peer_id: trace.peer_id().to_string(),
                attributes,
                class: classify(&attributes),
            })
        })
        .collect()
}

/// Class histogram in the fixed class order.
pub fn class_histogram(classified: &[ClassifiedTrace]) -> BTreeMap<TraceClass, usize> {
    let mut histogram = BTreeMap::new();
    for c in classified {
        *histogram.entry(c.class).or_insert(0) += 1;
    }
    histogram
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{CrawlRecord, PeerId, PeerMode, PeerTrace};
    use std::collections::BTreeSet;

    fn limewire_regions() -> ClassifierRegions {
        ClassifierRegions::from_profile(&SoftwareProfile::limewire()).unwrap()
    }

    fn trace_of(states: &[(u32, u32)]) -> PeerTrace {
        let records: Vec<CrawlRecord> = states
            .iter()
            .enumerate()
            .map(|(i, &(d_l, d_u))| {
                let leaves: BTreeSet<PeerId> = (0..d_l).map(|k| PeerId(format!("l{k}"))).collect();
                let ultras: BTreeSet<PeerId> = (0..d_u).map(|k| PeerId(format!("u{k}"))).collect();
                CrawlRecord::new(
                    "p".into(),
                    i as i64 * 1800,
                    PeerMode::Unknown,
                    "limewire".into(),
                    leaves,
                    ultras,
                )
                .unwrap()
            })
            .collect();
        PeerTrace::new(records).unwrap()
    }

    #[test]
    fn distance_examples() {
        let s = |l, u| PhaseState { d_l: l, d_u: u };
        assert_eq!(distance(&s(0, 0), &s(0, 0)), 0.0);
        assert_eq!(distance(&s(30, 32), &s(30, 22)), 10.0);
        assert!((distance(&s(0, 2), &s(30, 32)) - 1800f64.sqrt()).abs() < 1e-12);
        assert!((distance(&s(0, 2), &s(30, 32)) - 42.4264).abs() < 1e-4);
    }

    #[test]
    fn disk_regions_must_be_disjoint() {
        let s = |l, u| PhaseState { d_l: l, d_u: u };
        assert!(ClassifierRegions::new(s(30, 32), s(0, 2), 10.0, 10.0).is_ok());
        assert!(matches!(
            ClassifierRegions::new(s(10, 10), s(0, 2), 10.0, 10.0),
            Err(ClassifierError::OverlappingDisks(..))
        ));
        assert!(ClassifierRegions::new(s(30, 32), s(0, 2), 0.0, 10.0).is_err());
    }

    #[test]
    fn attributes_all_in_one_region() {
        let regions = limewire_regions();
        let attrs = trace_attributes(&trace_of(&[(0, 2), (0, 2), (1, 3)]), &regions).unwrap();
        assert_eq!((attrs.eta_l, attrs.eta_t, attrs.eta_u), (1.0, 0.0, 0.0));
        assert_eq!((attrs.xi_l, attrs.xi_t, attrs.xi_u), (0.0, 0.0, 0.0));
    }

    #[test]
    fn attributes_alternating_clamp() {
        let regions = limewire_regions();
        // LSR, TR, LSR, TR: three crossings, two reports per region
        let attrs =
            trace_attributes(&trace_of(&[(0, 2), (15, 15), (0, 2), (15, 15)]), &regions).unwrap();
        assert_eq!((attrs.eta_l, attrs.eta_t, attrs.eta_u), (0.5, 0.5, 0.0));
        // raw ratio 3/2 clamps to 1
        assert_eq!(attrs.xi_l, 1.0);
        assert_eq!(attrs.xi_t, 1.0);
    }

    #[test]
    fn attributes_single_excursion() {
        let regions = limewire_regions();
        // 5 reports in USR, one dip to TR and back: raw xi_t = 2/1 -> 1
        let attrs = trace_attributes(
            &trace_of(&[(30, 32), (30, 32), (15, 15), (30, 32), (30, 32), (30, 32)]),
            &regions,
        )
        .unwrap();
        assert!((attrs.eta_u - 5.0 / 6.0).abs() < 1e-12);
        assert!((attrs.eta_t - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(attrs.xi_t, 1.0);
        assert!((attrs.xi_u - 2.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn classify_table_rows() {
        let a = |el, et, eu, xl, xt, xu| TraceAttributes::new(el, et, eu, xl, xt, xu).unwrap();
        assert_eq!(
            classify(&a(1.0, 0.0, 0.0, 0.0, 0.0, 0.0)),
            TraceClass::StableLeaf
        );
        assert_eq!(
            classify(&a(0.0, 1.0, 0.0, 0.0, 0.5, 0.0)),
            TraceClass::NeverStableUltra
        );
        assert_eq!(
            classify(&a(0.0, 0.0, 1.0, 0.0, 0.0, 0.0)),
            TraceClass::StableUltra
        );
        assert_eq!(
            classify(&a(0.5, 0.0, 0.5, 0.2, 0.0, 0.2)),
            TraceClass::Bipolar
        );
        assert_eq!(
            classify(&a(0.5, 0.5, 0.0, 0.5, 0.5, 0.0)),
            TraceClass::UnstableLeaf
        );
        assert_eq!(
            classify(&a(0.3, 0.2, 0.5, 0.1, 0.1, 0.1)),
            TraceClass::TotalChurn
        );
        assert_eq!(
            classify(&a(0.0, 0.1, 0.9, 0.0, 1.0, 0.2)),
            TraceClass::StableUltraOccasionalChurn
        );
        assert_eq!(
            classify(&a(0.0, 0.5, 0.5, 0.0, 0.5, 1.0)),
            TraceClass::NeverStableUltra
        );
        assert_eq!(
            classify(&a(0.0, 0.5, 0.5, 0.0, 0.3, 0.3)),
            TraceClass::HalfStableUltra
        );
        assert_eq!(
            classify(&a(0.0, 0.5, 0.5, 0.0, 0.6, 0.3)),
            TraceClass::HalfUnstableUltra
        );
    }

    /// One synthetic archetype per class; the classifier must recover
    /// all nine labels.
    #[test]
    fn archetype_corpus_recovers_every_class() {
        let regions = limewire_regions();
        let usr = (30, 32);
        let tr = (15, 15);
        let lsr = (0, 2);
        let archetypes: Vec<(&str, Vec<(u32, u32)>, TraceClass)> = vec![
            ("stable_leaf", vec![lsr; 10], TraceClass::StableLeaf),
            (
                "never_stable_ultra",
                vec![tr; 10],
                TraceClass::NeverStableUltra,
            ),
            ("stable_ultra", vec![usr; 10], TraceClass::StableUltra),
            (
                "bipolar",
                vec![lsr, lsr, usr, usr, lsr, lsr],
                TraceClass::Bipolar,
            ),
            (
                "unstable_leaf",
                vec![lsr, tr, lsr, lsr, tr],
                TraceClass::UnstableLeaf,
            ),
            (
                "total_churn",
                vec![lsr, tr, usr, tr, lsr],
                TraceClass::TotalChurn,
            ),
            (
                // single-report dips into TR: xi_t clamps to 1
                "occasional_churn",
                vec![usr, usr, tr, usr, usr, tr, usr],
                TraceClass::StableUltraOccasionalChurn,
            ),
            (
                // long stays on both sides, TR stays longer: xi_t <= xi_u < 1
                "half_stable",
                vec![usr, usr, usr, tr, tr, tr, tr, tr, tr, usr, usr, usr],
                TraceClass::HalfStableUltra,
            ),
            (
                // USR stays longer than TR stays: 1 > xi_t > xi_u
                "half_unstable",
                vec![usr, usr, usr, tr, tr, tr, usr, usr, usr],
                TraceClass::HalfUnstableUltra,
            ),
        ];
        let mut seen = std::collections::BTreeSet::new();
        for (name, states, expected) in archetypes {
            let attrs = trace_attributes(&trace_of(&states), &regions).unwrap();
            let class = classify(&attrs);
            assert_eq!(class, expected, "{name}: attrs {attrs:?}");
            seen.insert(class);
        }
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn invalid_tuples_rejected() {
        assert!(TraceAttributes::new(0.5, 0.5, 0.5, 0.0, 0.0, 0.0).is_err());
        assert!(TraceAttributes::new(1.0, 0.0, 0.0, 0.0, 0.5, 0.0).is_err()); // xi_t > 0 with eta_t = 0
        assert!(TraceAttributes::new(1.0, 0.0, 0.0, 1.5, 0.0, 0.0).is_err());
    }
}
