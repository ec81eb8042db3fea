//! Connection-churn statistics: degree change vs connection change,
//! departure histograms and Poisson fits, session segmentation,
//! exponential lifetime fits, and the leaf/ultra departure correlation.
//!
//! Key distinction throughout: degree churn is the change in neighbor
//! counts; connection churn is the turnover of neighbor identities.
//! A peer can swap half its neighbors while the degree never moves.

use serde::Serialize;
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::types::{CrawlRecord, PeerMode, PeerTrace, PhaseState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChurnError {
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("need at least one session duration")]
    NoDurations,
    #[error("all durations are zero; rate is undefined")]
    ZeroDurations,
    #[error("rate must be positive")]
    ZeroRate,
    #[error("need at least two steps")]
    TooFewSteps,
    #[error("{0} departures have zero variance; correlation undefined")]
    ZeroVariance(&'static str),
}

/// One crawl interval of one trace: how the degree moved and how many
/// connections actually turned over, per side.
#[derive(Debug, Clone, Serialize)]
pub struct ChurnStep {
    pub peer_id: String,
    pub interval: usize,
    pub from_state: PhaseState,
    pub to_state: PhaseState,
    /// Euclidean norm of the degree change.
    pub degree_change: f64,
    /// Neighbors present before but gone after.
    pub leaf_departures: u32,
    pub ultra_departures: u32,
    /// Neighbors present after but not before; the queue model's
    /// arrival side.
    pub leaf_arrivals: u32,
    pub ultra_arrivals: u32,
}

fn departures(prev: &CrawlRecord, next: &CrawlRecord) -> (u32, u32, u32, u32) {
    let leaf_dep = prev
        .leaf_neighbors()
        .difference(next.leaf_neighbors())
        .count() as u32;
    let ultra_dep = prev
        .ultra_neighbors()
        .difference(next.ultra_neighbors())
        .count() as u32;
    let leaf_arr = next
        .leaf_neighbors()
        .difference(prev.leaf_neighbors())
        .count() as u32;
    let ultra_arr = next
        .ultra_neighbors()
        .difference(prev.ultra_neighbors())
        .count() as u32;
    (leaf_dep, ultra_dep, leaf_arr, ultra_arr)
}

/// Per-interval churn steps of one trace; traces with fewer than two
/// records yield none.
pub fn churn_steps(trace: &PeerTrace) -> Vec<ChurnStep> {
    trace
        .records()
        .windows(2)
        .enumerate()
        .map(|(interval, w)| {
            let (leaf_departures, ultra_departures, leaf_arrivals, ultra_arrivals) =
                departures(&w[0], &w[1]);
            let from_state = w[0].state();
            let to_state = w[1].state();
            ChurnStep {
                peer_id: trace.peer_id().to_string(),
                interval,
                from_state,
                to_state,
                degree_change: from_state.distance(&to_state),
                leaf_departures,
                ultra_departures,
                leaf_arrivals,
                ultra_arrivals,
            }
        })
        .collect()
}

/// Churn steps across all traces; parallel over traces when enabled.
pub fn churn_steps_all(traces: &[PeerTrace]) -> Vec<ChurnStep> {
    #[cfg(feature = "parallel")]
    {
        traces.par_iter().flat_map_iter(churn_steps).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        churn_steps_all_sequential(traces)
    }
}

pub fn churn_steps_all_sequential(traces: &[PeerTrace]) -> Vec<ChurnStep> {
    traces.iter().flat_map(churn_steps).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Leaf,
    Ultra,
}

/// Degree floor a step's starting state must clear to count as an
/// ultra-mode observation. Defaults to d_l >= 10 and d_u >= 10.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ModeFilter {
    pub min_d_l: u32,
    pub min_d_u: u32,
}

impl Default for ModeFilter {
    fn default() -> Self {
        Self {
            min_d_l: 10,
            min_d_u: 10,
        }
    }
}

impl ModeFilter {
    /// No filtering at all.
    pub fn none() -> Self {
        Self {
            min_d_l: 0,
            min_d_u: 0,
        }
    }

    fn accepts(&self, step: &ChurnStep) -> bool {
        step.from_state.d_l >= self.min_d_l && step.from_state.d_u >= self.min_d_u
    }
}

/// Normalized frequency of per-interval departure counts.
#[derive(Debug, Clone, Serialize)]
pub struct DepartureHistogram {
    pub side: Side,
    /// counts[k] = number of steps with exactly k departures.
    pub counts: Vec<u64>,
    pub total: u64,
}

impl DepartureHistogram {
    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn frequency(&self, k: usize) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.counts.get(k).copied().unwrap_or(0) as f64 / self.total as f64
        }
    }

    pub fn mean(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let weighted: u64 = self
            .counts
            .iter()
            .enumerate()
            .map(|(k, &c)| k as u64 * c)
            .sum();
        weighted as f64 / self.total as f64
    }

    /// Mean of the distribution renormalized over counts `0..k`.
    pub fn head_mean(&self, k: usize) -> f64 {
        let head = &self.counts[..k.min(self.counts.len())];
        let total: u64 = head.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let weighted: u64 = head.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
        weighted as f64 / total as f64
    }
}

/// Histogram of departure counts among steps passing the mode filter.
pub fn departure_histogram(
    steps: &[ChurnStep],
    side: Side,
    mode_filter: ModeFilter,
) -> DepartureHistogram {
    let mut counts: Vec<u64> = Vec::new();
    let mut total = 0;
    for step in steps.iter().filter(|s| mode_filter.accepts(s)) {
        let k = match side {
            Side::Leaf => step.leaf_departures,
            Side::Ultra => step.ultra_departures,
        } as usize;
        if counts.len() <= k {
            counts.resize(k + 1, 0);
        }
        counts[k] += 1;
        total += 1;
    }
    DepartureHistogram {
        side,
        counts,
        total,
    }
}

/// How a Poisson rate was pulled out of a departure histogram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum FitMethod {
    /// Mean of the full distribution minus one, compensating the
    /// non-Poisson tail; floored at zero.
    MeanMinusOne,
    /// Mean of the distribution renormalized over the first k points.
    HeadKMean { k: usize },
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PoissonFit {
    pub lambda_hat: f64,
    pub method: FitMethod,
    /// Raw (uncalibrated) mean of the full histogram, kept alongside
    /// the estimate so both readings are auditable.
    pub raw_mean: f64,
    pub samples: u64,
}

/// Fit a Poisson rate to the histogram body.
pub fn fit_poisson(hist: &DepartureHistogram, method: FitMethod) -> Result<PoissonFit, ChurnError> {
    if hist.is_empty() {
        return Err(ChurnError::EmptyHistogram);
    }
    let raw_mean = hist.mean();
    let lambda_hat = match method {
        FitMethod::MeanMinusOne => (raw_mean - 1.0).max(0.0),
        FitMethod::HeadKMean { k } => hist.head_mean(k),
    };
    Ok(PoissonFit {
        lambda_hat,
        method,
        raw_mean,
        samples: hist.total,
    })
}

/// One on-line stretch of a peer, delimited by response gaps longer
/// than the break time.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Session {
    pub start: i64,
    pub end: i64,
}

impl Session {
    pub fn duration_secs(&self) -> i64 {
        self.end - self.start
    }

    pub fn duration_hours(&self) -> f64 {
        self.duration_secs() as f64 / 3600.0
    }
}

/// Split a trace into sessions: a gap beyond `break_time_secs` means the
/// peer went off line after the earlier response. Session duration is
/// last response minus first response within the session, so isolated
/// responses give zero-length sessions.
pub fn sessions(trace: &PeerTrace, break_time_secs: i64) -> Vec<Session> {
    assert!(break_time_secs > 0, "break time must be positive");
    let mut out = Vec::new();
    let records = trace.records();
    let mut start = match records.first() {
        Some(r) => r.t(),
        None => return out,
    };
    let mut prev = start;
    for record in &records[1..] {
        let t = record.t();
        if t - prev > break_time_secs {
            out.push(Session { start, end: prev });
            start = t;
        }
        prev = t;
    }
    out.push(Session { start, end: prev });
    out
}

/// Maximum-likelihood exponential rate (1/mean) over session durations,
/// in inverse hours.
///
/// `censor_at_hours` drops durations that reached the threshold: those
/// sessions were still alive when observation ended, and keeping them
/// flattens the tail. Both the rate and the mean are returned so the
/// two presentations cannot be confused.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExponentialFit {
    pub rate_per_hour: f64,
    pub mean_hours: f64,
    pub samples: usize,
}

pub fn fit_exponential(
    durations_hours: &[f64],
    censor_at_hours: Option<f64>,
) -> Result<ExponentialFit, ChurnError> {
    if durations_hours.is_empty() {
        return Err(ChurnError::NoDurations);
    }
    let kept: Vec<f64> = match censor_at_hours {
        Some(limit) => durations_hours
            .iter()
            .copied()
            .filter(|&d| d < limit)
            .collect(),
        None => durations_hours.to_vec(),
    };
    if kept.is_empty() {
        return Err(ChurnError::NoDurations);
    }
    let mean = kept.iter().sum::<f64>() / kept.len() as f64;
    if mean <= 0.0 {
        return Err(ChurnError::ZeroDurations);
    }
    Ok(ExponentialFit {
        rate_per_hour: 1.0 / mean,
        mean_hours: mean,
        samples: kept.len(),
    })
}

/// Mean connection lifetime in hours implied by an aggregate departure
/// rate: per-connection rate is departures-per-hour over mean degree,
/// and the lifetime is its inverse.
pub fn connection_lifetime(mean_degree: f64, departures_per_hour: f64) -> Result<f64, ChurnError> {
    if departures_per_hour <= 0.0 {
        return Err(ChurnError::ZeroRate);
    }
    Ok(mean_degree / departures_per_hour)
}

/// Pearson correlation of (leaf departures, ultra departures) across
/// steps. With `truncate_at = Some(k)` only steps where both sides are
/// below k enter, isolating the body from the common-shock tail.
pub fn departure_correlation(
    steps: &[ChurnStep],
    truncate_at: Option<u32>,
) -> Result<f64, ChurnError> {
    let samples: Vec<(f64, f64)> = steps
        .iter()
        .filter(|s| match truncate_at {
            Some(limit) => s.leaf_departures < limit && s.ultra_departures < limit,
            None => true,
        })
        .map(|s| (s.leaf_departures as f64, s.ultra_departures as f64))
        .collect();
    if samples.len() < 2 {
        return Err(ChurnError::TooFewSteps);
    }
    let n = samples.len() as f64;
    let mean_x = samples.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = samples.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (x, y) in &samples {
        cov += (x - mean_x) * (y - mean_y);
        var_x += (x - mean_x) * (x - mean_x);
        var_y += (y - mean_y) * (y - mean_y);
    }
    if var_x == 0.0 {
        return Err(ChurnError::ZeroVariance("leaf"));
    }
    if var_y == 0.0 {
        return Err(ChurnError::ZeroVariance("ultra"));
    }
    Ok(cov / (var_x.sqrt() * var_y.sqrt()))
}

/// Reported mode wins; otherwise small degrees mean leaf: d_l <= 2 and
/// d_u <= 10.
pub fn infer_mode(record: &CrawlRecord) -> PeerMode {
    match record.mode() {
        PeerMode::Unknown => {
            let s = record.state();
            if s.d_l <= 2 && s.d_u <= 10 {
                PeerMode::Leaf
            } else {
                PeerMode::Ultra
            }
        }
        reported => reported,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{PeerId, PeerTrace};
    use std::collections::BTreeSet;

    fn record(t: i64, mode: PeerMode, leaves: &[&str], ultras: &[&str]) -> CrawlRecord {
        CrawlRecord::new(
            "p".into(),
            t,
            mode,
            "limewire".into(),
            leaves
                .iter()
                .map(|s| PeerId::from(*s))
                .collect::<BTreeSet<_>>(),
            ultras
                .iter()
                .map(|s| PeerId::from(*s))
                .collect::<BTreeSet<_>>(),
        )
        .unwrap()
    }

    fn trace(records: Vec<CrawlRecord>) -> PeerTrace {
        PeerTrace::new(records).unwrap()
    }

    fn refs(v: &[String]) -> Vec<&str> {
        v.iter().map(String::as_str).collect()
    }

    #[test]
    fn identical_records_no_churn() {
        let t = trace(vec![
            record(0, PeerMode::Leaf, &[], &["u1", "u2"]),
            record(1800, PeerMode::Leaf, &[], &["u1", "u2"]),
        ]);
        let steps = churn_steps(&t);
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].degree_change, 0.0);
        assert_eq!(steps[0].leaf_departures, 0);
        assert_eq!(steps[0].ultra_departures, 0);
    }

    #[test]
    fn swapped_neighbors_churn_without_degree_change() {
        // 30 leaves, 7 of them replaced by fresh ids: degree holds still
        let before: Vec<String> = (0..30).map(|i| format!("a{i}")).collect();
        let after: Vec<String> = (0..30)
            .map(|i| {
                if i < 7 {
                    format!("b{i}")
                } else {
                    format!("a{i}")
                }
            })
            .collect();
        let ultras: Vec<String> = (0..32).map(|i| format!("u{i}")).collect();
        let uref: Vec<&str> = ultras.iter().map(String::as_str).collect();
        let bref: Vec<&str> = before.iter().map(String::as_str).collect();
        let aref: Vec<&str> = after.iter().map(String::as_str).collect();
        let t = trace(vec![
            record(0, PeerMode::Ultra, &bref, &uref),
            record(1800, PeerMode::Ultra, &aref, &uref),
        ]);
        let steps = churn_steps(&t);
        assert_eq!(steps[0].degree_change, 0.0);
        assert_eq!(steps[0].leaf_departures, 7);
        assert_eq!(steps[0].leaf_arrivals, 7);
        assert_eq!(steps[0].ultra_departures, 0);
    }

    #[test]
    fn three_four_five_degree_change() {
        let leaves10: Vec<String> = (0..10).map(|i| format!("l{i}")).collect();
        let leaves13: Vec<String> = (0..13).map(|i| format!("l{i}")).collect();
        let ultras20: Vec<String> = (0..20).map(|i| format!("u{i}")).collect();
        let ultras16: Vec<String> = (0..16).map(|i| format!("u{i}")).collect();
        let t = trace(vec![
            record(0, PeerMode::Ultra, &refs(&leaves10), &refs(&ultras20)),
            record(1800, PeerMode::Ultra, &refs(&leaves13), &refs(&ultras16)),
        ]);
        let steps = churn_steps(&t);
        assert_eq!(steps[0].degree_change, 5.0);
        assert_eq!(steps[0].ultra_departures, 4);
        assert_eq!(steps[0].leaf_arrivals, 3);
    }

    #[test]
    fn departure_totals_bounded_by_neighbor_counts() {
        // can't lose more than you had, interval by interval
        let t = trace(vec![
            record(0, PeerMode::Ultra, &["a", "b", "c"], &[]),
            record(1800, PeerMode::Ultra, &["d"], &[]),
            record(3600, PeerMode::Ultra, &[], &[]),
        ]);
        let steps = churn_steps(&t);
        let total_dep: u32 = steps.iter().map(|s| s.leaf_departures).sum();
        let total_held: u32 = t.records()[..t.len() - 1]
            .iter()
            .map(|r| r.leaf_neighbors().len() as u32)
            .sum();
        assert!(total_dep <= total_held);
        // triangle bound per step
        for s in &steps {
            assert!(
                s.degree_change
                    <= (s.leaf_departures + s.ultra_departures + s.leaf_arrivals + s.ultra_arrivals)
                        as f64
            );
        }
    }

    #[test]
    fn histogram_and_filters() {
        let big: Vec<String> = (0..15).map(|i| format!("l{i}")).collect();
        let bigu: Vec<String> = (0..15).map(|i| format!("u{i}")).collect();
        // ultra-mode step: starts at (15,15); leaf-mode step below filter
        let t1 = trace(vec![
            record(0, PeerMode::Ultra, &refs(&big), &refs(&bigu)),
            record(1800, PeerMode::Ultra, &refs(&big[..13]), &refs(&bigu)),
        ]);
        let t2 = trace(vec![
            record(0, PeerMode::Leaf, &[], &["u1"]),
            record(1800, PeerMode::Leaf, &[], &[]),
        ]);
        let steps = churn_steps_all(&[t1, t2]);
        let hist = departure_histogram(&steps, Side::Leaf, ModeFilter::default());
        assert_eq!(hist.total, 1);
        assert_eq!(hist.frequency(2), 1.0);

        let none = departure_histogram(&[], Side::Leaf, ModeFilter::default());
        assert!(none.is_empty());
        assert!(matches!(
            fit_poisson(&none, FitMethod::MeanMinusOne),
            Err(ChurnError::EmptyHistogram)
        ));
    }

    #[test]
    fn histogram_mean_recovers_a_sampled_rate() {
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(58);
        let poisson = rand_distr::Poisson::new(5.8).unwrap();
        let mut counts = vec![0u64; 40];
        for _ in 0..100_000 {
            counts[(poisson.sample(&mut rng) as usize).min(39)] += 1;
        }
        let hist = DepartureHistogram {
            side: Side::Leaf,
            total: counts.iter().sum(),
            counts,
        };
        assert!((hist.mean() - 5.8).abs() < 0.05, "mean {}", hist.mean());
    }

    #[test]
    fn poisson_fit_methods() {
        // point mass at zero: mean-minus-one floors at 0
        let hist = DepartureHistogram {
            side: Side::Leaf,
            counts: vec![10],
            total: 10,
        };
        let fit = fit_poisson(&hist, FitMethod::MeanMinusOne).unwrap();
        assert_eq!(fit.lambda_hat, 0.0);

        // two steps at 5 departures, one tail point at 12: mean 22/3
        let hist = DepartureHistogram {
            side: Side::Leaf,
            counts: vec![0, 0, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 1],
            total: 3,
        };
        let fit = fit_poisson(&hist, FitMethod::MeanMinusOne).unwrap();
        assert!((fit.raw_mean - 22.0 / 3.0).abs() < 1e-12);
        assert!((fit.lambda_hat - (22.0 / 3.0 - 1.0)).abs() < 1e-12);

        // head mean ignores the tail point entirely
        let fit = fit_poisson(&hist, FitMethod::HeadKMean { k: 11 }).unwrap();
        assert!((fit.lambda_hat - 5.0).abs() < 1e-12);
    }

    #[test]
    fn session_splitting() {
        // responses every 30 min for 22.5h: one session
        let records: Vec<CrawlRecord> = (0..46)
            .map(|i| record(i * 1800, PeerMode::Leaf, &[], &["u1"]))
            .collect();
        let t = trace(records);
        let s = sessions(&t, 7200);
        assert_eq!(s.len(), 1);
        assert!((s[0].duration_hours() - 22.5).abs() < 1e-12);

        // two responses 3h apart with a 2h break: two zero-length sessions
        let t = trace(vec![
            record(0, PeerMode::Leaf, &[], &[]),
            record(3 * 3600, PeerMode::Leaf, &[], &[]),
        ]);
        let s = sessions(&t, 7200);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].duration_secs(), 0);
        assert_eq!(s[1].duration_secs(), 0);

        // gaps 0.5h, 2.5h, 0.5h: two sessions of 0.5h each
        let t = trace(vec![
            record(0, PeerMode::Leaf, &[], &[]),
            record(1800, PeerMode::Leaf, &[], &[]),
            record(1800 + 9000, PeerMode::Leaf, &[], &[]),
            record(1800 + 9000 + 1800, PeerMode::Leaf, &[], &[]),
        ]);
        let s = sessions(&t, 7200);
        assert_eq!(s.len(), 2);
        assert!((s[0].duration_hours() - 0.5).abs() < 1e-12);
        assert!((s[1].duration_hours() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn exponential_fit_constant_durations() {
        let fit = fit_exponential(&[10.0, 10.0, 10.0], None).unwrap();
        assert!((fit.rate_per_hour - 0.1).abs() < 1e-12);
        assert!((fit.mean_hours - 10.0).abs() < 1e-12);

        assert!(matches!(
            fit_exponential(&[], None),
            Err(ChurnError::NoDurations)
        ));
        assert!(matches!(
            fit_exponential(&[0.0, 0.0], None),
            Err(ChurnError::ZeroDurations)
        ));
    }

    #[test]
    fn censoring_drops_the_flat_tail() {
        // exponential-ish body plus a pile-up at the observation end
        let mut durations: Vec<f64> = vec![1.0, 2.0, 3.0, 5.0, 8.0];
        durations.extend(std::iter::repeat(22.0).take(5));
        let raw = fit_exponential(&durations, None).unwrap();
        let censored = fit_exponential(&durations, Some(22.0)).unwrap();
        assert!(censored.mean_hours < raw.mean_hours);
        assert_eq!(censored.samples, 5);
    }

    #[test]
    fn connection_lifetime_examples() {
        assert!((connection_lifetime(27.8507, 11.6).unwrap() - 2.4009).abs() < 1e-4);
        assert!((connection_lifetime(29.9443, 9.6).unwrap() - 3.1192).abs() < 1e-4);
        assert_eq!(connection_lifetime(1.0, 1.0).unwrap(), 1.0);
        assert!(connection_lifetime(10.0, 0.0).is_err());
    }

    #[test]
    fn correlation_identical_sides_is_one() {
        let steps: Vec<ChurnStep> = (0..20)
            .map(|i| ChurnStep {
                peer_id: "p".into(),
                interval: i,
                from_state: PhaseState { d_l: 15, d_u: 15 },
                to_state: PhaseState { d_l: 15, d_u: 15 },
                degree_change: 0.0,
                leaf_departures: (i % 5) as u32,
                ultra_departures: (i % 5) as u32,
                leaf_arrivals: 0,
                ultra_arrivals: 0,
            })
            .collect();
        let r = departure_correlation(&steps, None).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_zero_variance_errors() {
        let steps: Vec<ChurnStep> = (0..5)
            .map(|i| ChurnStep {
                peer_id: "p".into(),
                interval: i,
                from_state: PhaseState { d_l: 15, d_u: 15 },
                to_state: PhaseState { d_l: 15, d_u: 15 },
                degree_change: 0.0,
                leaf_departures: 3,
                ultra_departures: i as u32,
                leaf_arrivals: 0,
                ultra_arrivals: 0,
            })
            .collect();
        assert!(matches!(
            departure_correlation(&steps, None),
            Err(ChurnError::ZeroVariance("leaf"))
        ));
    }

    fn synthetic_steps(pairs: Vec<(u32, u32)>) -> Vec<ChurnStep> {
        pairs
            .into_iter()
            .enumerate()
            .map(|(i, (l, u))| ChurnStep {
                peer_id: "p".into(),
                interval: i,
                from_state: PhaseState { d_l: 15, d_u: 15 },
                to_state: PhaseState { d_l: 15, d_u: 15 },
                degree_change: 0.0,
                leaf_departures: l,
                ultra_departures: u,
                leaf_arrivals: 0,
                ultra_arrivals: 0,
            })
            .collect()
    }

    #[test]
    fn independent_departures_are_uncorrelated() {
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(31);
        let leaf = rand_distr::Poisson::new(5.8).unwrap();
        let ultra = rand_distr::Poisson::new(4.8).unwrap();
        let pairs: Vec<(u32, u32)> = (0..100_000)
            .map(|_| (leaf.sample(&mut rng) as u32, ultra.sample(&mut rng) as u32))
            .collect();
        let r = departure_correlation(&synthetic_steps(pairs), None).unwrap();
        assert!(r.abs() < 0.02, "correlation {r}");
    }

    #[test]
    fn common_shock_correlation_concentrates_in_the_tail() {
        use rand::Rng;
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(77);
        let leaf = rand_distr::Poisson::new(5.0).unwrap();
        let ultra = rand_distr::Poisson::new(4.0).unwrap();
        // rare shared burst drives both sides at once
        let pairs: Vec<(u32, u32)> = (0..100_000)
            .map(|_| {
                let shock = if rng.gen::<f64>() < 0.02 {
                    rng.gen_range(10..25)
                } else {
                    0
                };
                (
                    leaf.sample(&mut rng) as u32 + shock,
                    ultra.sample(&mut rng) as u32 + shock,
                )
            })
            .collect();
        let steps = synthetic_steps(pairs);
        let full = departure_correlation(&steps, None).unwrap();
        let truncated = departure_correlation(&steps, Some(11)).unwrap();
        assert!(
            truncated < full,
            "body correlation {truncated} should sit below full {full}"
        );
        assert!(full > 0.5, "shock term should dominate: {full}");
        assert!(
            truncated < 0.1,
            "body should be near-independent: {truncated}"
        );
    }

    #[test]
    fn mode_inference() {
        let unknown_small = record(0, PeerMode::Unknown, &[], &["u1", "u2"]);
        assert_eq!(infer_mode(&unknown_small), PeerMode::Leaf);

        let leaves: Vec<String> = (0..30).map(|i| format!("l{i}")).collect();
        let ultras: Vec<String> = (0..32).map(|i| format!("u{i}")).collect();
        let unknown_big = record(0, PeerMode::Unknown, &refs(&leaves), &refs(&ultras));
        assert_eq!(infer_mode(&unknown_big), PeerMode::Ultra);

        // report wins over the degree criterion
        let reported = record(0, PeerMode::Ultra, &[], &["u1", "u2"]);
        assert_eq!(infer_mode(&reported), PeerMode::Ultra);
    }
}
