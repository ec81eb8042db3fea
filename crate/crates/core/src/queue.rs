//! The double M/M/m/m degree-keeping model: continuous-time generator
//! matrices with closed-form equilibria (CTDM), the binomial-thinning
//! discrete-time variant (BDTM), Erlang-B blocking, and the arrival-rate
//! estimator.
//!
//! Two independent loss systems model one peer: the leaf system lives on
//! degrees `0..=b_l`, the ultra system on `l_u..=b_u`. State index `i`
//! always means degree `floor + i`. Matrix convention: entry `(i, j)` is
//! the rate or probability of moving from state `j` to state `i`, so
//! generator columns sum to 0 and transfer columns sum to 1.
//!
//! All rates are per crawl interval; display conversions happen in the
//! CLI, never here.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::types::QueueLimits;

#[derive(Debug, Error)]
pub enum QueueError {
    #[error("lambda must be non-negative (got {0})")]
    NegativeLambda(f64),
    #[error("mu must be non-negative (got {0})")]
    NegativeMu(f64),
    #[error("mu must be positive for the continuous-time model")]
    ZeroMu,
    #[error("mu is a per-step drop probability in the discrete-time model; {0} > 1")]
    MuAboveOne(f64),
    #[error("server count m must be at least 1")]
    NoServers,
    #[error("stable-point probability q must lie in [0, 1) (got {0})")]
    BadStableProbability(f64),
    #[error("mean departures must be non-negative (got {0})")]
    NegativeDepartures(f64),
    #[error("loss probability must lie in [0, 1] (got {0})")]
    BadLossProbability(f64),
    #[error("transfer matrix is reducible; equilibrium not unique")]
    Reducible,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Parameters of one loss system: arrival rate, per-connection drop
/// rate, servers above the floor, and the floor offset.
///
/// Leaf system: m = b_l, k = 0. Ultra system: m = b_u - l_u, k = l_u.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QueueParams {
    pub lambda: f64,
    pub mu: f64,
    pub m: usize,
    pub k: usize,
}

impl QueueParams {
    pub fn new(lambda: f64, mu: f64, m: usize, k: usize) -> Result<Self, QueueError> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(QueueError::NegativeLambda(lambda));
        }
        if mu < 0.0 || !mu.is_finite() {
            return Err(QueueError::NegativeMu(mu));
        }
        if m == 0 {
            return Err(QueueError::NoServers);
        }
        Ok(Self { lambda, mu, m, k })
    }

    /// Leaf system over degrees `0..=b_l`.
    pub fn leaf(lambda: f64, mu: f64, limits: &QueueLimits) -> Result<Self, QueueError> {
        Self::new(lambda, mu, limits.b_l as usize, 0)
    }

    /// Ultra system over degrees `l_u..=b_u`.
    pub fn ultra(lambda: f64, mu: f64, limits: &QueueLimits) -> Result<Self, QueueError> {
        Self::new(
            lambda,
            mu,
            (limits.b_u - limits.l_u) as usize,
            limits.l_u as usize,
        )
    }

    /// Lowest legal degree.
    pub fn floor(&self) -> u32 {
        self.k as u32
    }

    /// Highest legal degree.
    pub fn cap(&self) -> u32 {
        (self.k + self.m) as u32
    }
}

/// CTMC generator over the m+1 states; columns sum to zero.
#[derive(Debug, Clone, Serialize)]
pub struct GeneratorMatrix {
    pub floor: u32,
    entries: linalg::Matrix,
}

impl GeneratorMatrix {
    pub fn entries(&self) -> &linalg::Matrix {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }
}

/// Column-stochastic one-step transfer matrix over the m+1 states.
#[derive(Debug, Clone, Serialize)]
pub struct TransferMatrix {
    pub floor: u32,
    entries: linalg::Matrix,
}

impl TransferMatrix {
    pub const COLUMN_TOLERANCE: f64 = 1e-9;

    /// Wrap a column-stochastic matrix; columns must sum to 1 within
    /// [`Self::COLUMN_TOLERANCE`].
    pub fn new(floor: u32, entries: linalg::Matrix) -> Result<Self, QueueError> {
        let n = entries.len();
        for j in 0..n {
            let sum: f64 = (0..n).map(|i| entries[i][j]).sum();
            if (sum - 1.0).abs() > Self::COLUMN_TOLERANCE {
                return Err(QueueError::Linalg(LinalgError::BadColumnSum {
                    col: j,
                    sum,
                    expected: 1.0,
                }));
            }
        }
        Ok(Self { floor, entries })
    }

    pub fn entries(&self) -> &linalg::Matrix {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, to: usize, from: usize) -> f64 {
        self.entries[to][from]
    }
}

/// Equilibrium over degrees `floor..=floor+m`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumDist {
    pub floor: u32,
    probs: Vec<f64>,
}

impl EquilibriumDist {
    pub fn new(floor: u32, probs: Vec<f64>) -> Result<Self, QueueError> {
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || probs.iter().any(|&p| p < 0.0) {
            return Err(QueueError::Linalg(LinalgError::BadColumnSum {
                col: 0,
                sum,
                expected: 1.0,
            }));
        }
        Ok(Self { floor, probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// (degree, probability) pairs in degree order.
    pub fn degree_probs(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.probs
            .iter()
            .enumerate()
            .map(move |(i, &p)| (self.floor + i as u32, p))
    }

    /// Mass at the top (full-slot) state: the stable-point probability,
    /// which for the leaf system is exactly the Erlang-B loss.
    pub fn top_state_mass(&self) -> f64 {
        *self.probs.last().expect("never empty")
    }

    pub fn mean_degree(&self) -> f64 {
        self.degree_probs().map(|(d, p)| d as f64 * p).sum()
    }

    pub fn total_variation(&self, other: &EquilibriumDist) -> f64 {
        linalg::total_variation(&self.probs, &other.probs)
    }
}

/// Tridiagonal birth-death generator: up-rate lambda from every state
/// below the cap, down-rate (k+i)*mu from state i above the floor.
pub fn ctdm_generator(params: &QueueParams) -> Result<GeneratorMatrix, QueueError> {
    if params.mu <= 0.0 {
        return Err(QueueError::ZeroMu);
    }
    let n = params.m + 1;
    let mut q = vec![vec![0.0; n]; n];
    for j in 0..n {
        let up = if j < params.m { params.lambda } else { 0.0 };
        let down = if j > 0 {
            (params.k + j) as f64 * params.mu
        } else {
            0.0
        };
        q[j][j] = -(up + down);
        if j < params.m {
            q[j + 1][j] = up;
        }
        if j > 0 {
            q[j - 1][j] = down;
        }
    }
    Ok(GeneratorMatrix {
        floor: params.floor(),
        entries: q,
    })
}

/// Closed-form equilibrium of the CTDM chain:
/// `p_i` proportional to `(lambda/mu)^i * k! / (k+i)!`, which for k = 0
/// is the truncated-Poisson Erlang-B shape `(lambda/mu)^i / i!`.
pub fn ctdm_equilibrium(params: &QueueParams) -> Result<EquilibriumDist, QueueError> {
    if params.mu <= 0.0 {
        return Err(QueueError::ZeroMu);
    }
    let ratio = params.lambda / params.mu;
    let mut weights = Vec::with_capacity(params.m + 1);
    let mut w = 1.0;
    weights.push(w);
    for i in 1..=params.m {
        w *= ratio / (params.k + i) as f64;
        weights.push(w);
    }
    let total: f64 = weights.iter().sum();
    EquilibriumDist::new(
        params.floor(),
        weights.into_iter().map(|w| w / total).collect(),
    )
}

/// Equilibrium straight from the generator's null space. Slower and
/// numerically independent of the closed form; the two must agree.
pub fn ctdm_equilibrium_from_generator(
    generator: &GeneratorMatrix,
) -> Result<EquilibriumDist, QueueError> {
    let p = linalg::stationary_of_generator(generator.entries(), 1e-9)?;
    EquilibriumDist::new(generator.floor, p)
}

/// Erlang-B blocking probability for m servers at offered load a,
/// via the standard recursion B_0 = 1, B_j = a B / (j + a B).
pub fn erlang_b_blocking(m: usize, offered_load: f64) -> f64 {
    let mut blocking = 1.0;
    for j in 1..=m {
        blocking = offered_load * blocking / (j as f64 + offered_load * blocking);
    }
    blocking
}

/// Estimate the new-connection effort rate from the measured
/// stable-point probability q and mean departures u per interval:
/// lambda = u / (1 - q).
pub fn estimate_lambda(q: f64, u: f64) -> Result<f64, QueueError> {
    if !(0.0..1.0).contains(&q) {
        return Err(QueueError::BadStableProbability(q));
    }
    if u < 0.0 {
        return Err(QueueError::NegativeDepartures(u));
    }
    Ok(u / (1.0 - q))
}

/// Split an arrival rate into admitted and rejected shares.
pub fn admitted_rejected(lambda: f64, loss_prob: f64) -> Result<(f64, f64), QueueError> {
    if !(0.0..=1.0).contains(&loss_prob) {
        return Err(QueueError::BadLossProbability(loss_prob));
    }
    Ok((lambda * (1.0 - loss_prob), lambda * loss_prob))
}

/// Binomial pmf row for n trials at probability p, by recurrence.
fn binomial_pmf(n: usize, p: f64) -> Vec<f64> {
    let mut row = vec![0.0; n + 1];
    if p <= 0.0 {
        row[0] = 1.0;
        return row;
    }
    if p >= 1.0 {
        row[n] = 1.0;
        return row;
    }
    let q = 1.0 - p;
    let mut b = q.powi(n as i32);
    row[0] = b;
    for x in 0..n {
        b *= (n - x) as f64 / (x + 1) as f64 * (p / q);
        row[x + 1] = b;
    }
    row
}

/// One-step transfer matrix of the discrete-time chain: each of the
/// `floor + j` current connections drops with probability mu, a
/// Poisson(lambda) batch arrives, and the result clamps to the legal
/// degree range. Mass above the cap folds into the cap state; mass
/// below the floor folds into the floor state, mirroring the boundary
/// clamping of the trace generator.
pub fn bdtm_transfer(params: &QueueParams) -> Result<TransferMatrix, QueueError> {
    if params.mu > 1.0 {
        return Err(QueueError::MuAboveOne(params.mu));
    }
    let m = params.m;
    let n = m + 1;
    let mut t = vec![vec![0.0; n]; n];
    for j in 0..n {
        let degree = params.k + j;
        let drops = binomial_pmf(degree, params.mu);
        for (x, &bx) in drops.iter().enumerate() {
            if bx == 0.0 {
                continue;
            }
            // arrivals below a_cap land exactly; the Poisson tail at or
            // above a_cap would overshoot the cap and folds into it
            let a_cap = (m + x) as i64 - j as i64; // always >= 0 since j <= m
            let mut pois = (-params.lambda).exp();
            let mut below_cap = 0.0;
            for a in 0..a_cap {
                if a > 0 {
                    pois *= params.lambda / a as f64;
                }
                let idx = (j as i64 - x as i64 + a).max(0) as usize;
                t[idx][j] += bx * pois;
                below_cap += pois;
            }
            t[m][j] += bx * (1.0 - below_cap);
        }
    }
    Ok(TransferMatrix {
        floor: params.floor(),
        entries: t,
    })
}

/// Stationary vector of a transfer matrix. Errors when the chain is
/// reducible (e.g. the frozen identity chain).
pub fn bdtm_equilibrium(transfer: &TransferMatrix) -> Result<EquilibriumDist, QueueError> {
    let p = linalg::stationary_of_stochastic(transfer.entries(), TransferMatrix::COLUMN_TOLERANCE)
        .map_err(|e| match e {
            LinalgError::Reducible(_) => QueueError::Reducible,
            other => QueueError::Linalg(other),
        })?;
    EquilibriumDist::new(transfer.floor, p)
}

/// Discrete chain with the same stationary distribution as the CTDM
/// generator, via uniformization: T = I + Q / Lambda with Lambda the
/// largest total exit rate. Used by the trace generator.
pub fn ctdm_uniformized_transfer(params: &QueueParams) -> Result<TransferMatrix, QueueError> {
    let generator = ctdm_generator(params)?;
    let n = generator.dim();
    let rate = (0..n)
        .map(|j| -generator.entries[j][j])
        .fold(0.0f64, f64::max);
    let mut t = vec![vec![0.0; n]; n];
    for j in 0..n {
        for i in 0..n {
            let base = if i == j { 1.0 } else { 0.0 };
            t[i][j] = if rate == 0.0 {
                base
            } else {
                base + generator.entries[i][j] / rate
            };
        }
    }
    Ok(TransferMatrix {
        floor: params.floor(),
        entries: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn limewire_limits() -> QueueLimits {
        QueueLimits::default()
    }

    /// LimeWire leaf system: lambda 9.5 enquiries per interval, mu from
    /// 5.8 departures at mean degree 27.8507.
    fn leaf_params() -> QueueParams {
        QueueParams::leaf(9.5, 5.8 / 27.8507, &limewire_limits()).unwrap()
    }

    fn ultra_params() -> QueueParams {
        QueueParams::ultra(8.0, 4.8 / 29.9443, &limewire_limits()).unwrap()
    }

    #[test]
    fn generator_two_state() {
        let params = QueueParams::new(2.0, 3.0, 1, 0).unwrap();
        let g = ctdm_generator(&params).unwrap();
        assert_eq!(g.entries(), &vec![vec![-2.0, 3.0], vec![2.0, -3.0]]);
    }

    #[test]
    fn generator_columns_sum_to_zero() {
        for params in [leaf_params(), ultra_params()] {
            let g = ctdm_generator(&params).unwrap();
            assert_eq!(g.dim(), params.m + 1);
            for j in 0..g.dim() {
                let sum: f64 = (0..g.dim()).map(|i| g.entries()[i][j]).sum();
                assert!(sum.abs() < 1e-12, "column {j} sums to {sum}");
            }
        }
    }

    #[test]
    fn ultra_generator_death_rates_shifted_by_floor() {
        let params = ultra_params();
        let g = ctdm_generator(&params).unwrap();
        assert_eq!(g.dim(), 13);
        // death rate from state i is (20 + i) * mu
        for i in 1..g.dim() {
            let expected = (20 + i) as f64 * params.mu;
            assert!((g.entries()[i - 1][i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_matches_null_space() {
        let limits = limewire_limits();
        for ratio in [0.1, 1.0, 10.0, 45.6] {
            for params in [
                QueueParams::leaf(ratio, 1.0, &limits).unwrap(),
                QueueParams::ultra(ratio, 1.0, &limits).unwrap(),
            ] {
                let closed = ctdm_equilibrium(&params).unwrap();
                let null =
                    ctdm_equilibrium_from_generator(&ctdm_generator(&params).unwrap()).unwrap();
                for (a, b) in closed.probs().iter().zip(null.probs()) {
                    assert!((a - b).abs() < 1e-10, "ratio {ratio}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn zero_lambda_concentrates_at_floor() {
        let limits = limewire_limits();
        let leaf = ctdm_equilibrium(&QueueParams::leaf(0.0, 0.5, &limits).unwrap()).unwrap();
        assert_eq!(leaf.probs()[0], 1.0);
        let ultra = ctdm_equilibrium(&QueueParams::ultra(0.0, 0.5, &limits).unwrap()).unwrap();
        assert_eq!(ultra.probs()[0], 1.0);
        assert_eq!(ultra.floor, 20);
        assert_eq!(ultra.degree_probs().next().unwrap(), (20, 1.0));
    }

    #[test]
    fn detailed_balance_interior() {
        for params in [leaf_params(), ultra_params()] {
            let eq = ctdm_equilibrium(&params).unwrap();
            let p = eq.probs();
            for i in 0..params.m {
                let lhs = params.lambda * p[i];
                let rhs = (params.k + i + 1) as f64 * params.mu * p[i + 1];
                assert!((lhs - rhs).abs() < 1e-10, "state {i}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn erlang_identity_on_leaf_system() {
        let params = leaf_params();
        let eq = ctdm_equilibrium(&params).unwrap();
        let blocking = erlang_b_blocking(params.m, params.lambda / params.mu);
        assert!((eq.top_state_mass() - blocking).abs() < 1e-12);
        // success rate near the measured 0.63
        assert!((1.0 - blocking - 0.63).abs() < 0.01, "blocking {blocking}");
    }

    #[test]
    fn lambda_estimation_examples() {
        assert!((estimate_lambda(0.36, 5.8).unwrap() - 9.0625).abs() < 1e-12);
        assert!((estimate_lambda(0.39, 4.8).unwrap() - 4.8 / 0.61).abs() < 1e-12);
        assert_eq!(estimate_lambda(0.0, 5.0).unwrap(), 5.0);
        assert!(estimate_lambda(1.0, 5.0).is_err());
        assert!(estimate_lambda(-0.1, 5.0).is_err());
    }

    #[test]
    fn admitted_rejected_split() {
        let (admitted, rejected) = admitted_rejected(9.5, 0.37).unwrap();
        assert!((admitted - 5.985).abs() < 1e-12);
        assert!((rejected - 3.515).abs() < 1e-12);
        let (admitted, rejected) = admitted_rejected(8.0, 0.39).unwrap();
        assert!((admitted - 4.88).abs() < 1e-12);
        assert!((rejected - 3.12).abs() < 1e-12);
        assert_eq!(admitted_rejected(7.0, 0.0).unwrap(), (7.0, 0.0));
        assert!(admitted_rejected(7.0, 1.5).is_err());
    }

    #[test]
    fn binomial_row_sums_to_one() {
        for (n, p) in [(0, 0.5), (5, 0.0), (5, 1.0), (30, 0.21), (52, 0.16)] {
            let row = binomial_pmf(n, p);
            assert_eq!(row.len(), n + 1);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "n={n} p={p} sum={sum}");
        }
    }

    #[test]
    fn bdtm_total_death_goes_to_floor() {
        let params = QueueParams::new(0.0, 1.0, 4, 0).unwrap();
        let t = bdtm_transfer(&params).unwrap();
        for j in 0..t.dim() {
            assert!((t.get(0, j) - 1.0).abs() < 1e-12);
        }
        // absorbing floor still has a unique stationary vector
        let eq = bdtm_equilibrium(&t).unwrap();
        assert_eq!(eq.probs()[0], 1.0);
    }

    #[test]
    fn bdtm_frozen_is_identity_and_reducible() {
        let params = QueueParams::new(0.0, 0.0, 3, 0).unwrap();
        let t = bdtm_transfer(&params).unwrap();
        for j in 0..t.dim() {
            for i in 0..t.dim() {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((t.get(i, j) - expected).abs() < 1e-12);
            }
        }
        assert!(matches!(bdtm_equilibrium(&t), Err(QueueError::Reducible)));
    }

    #[test]
    fn bdtm_columns_stochastic() {
        for params in [
            QueueParams::new(1.0, 0.5, 3, 0).unwrap(),
            QueueParams::leaf(9.5, 0.2083, &limewire_limits()).unwrap(),
            QueueParams::ultra(8.0, 0.1603, &limewire_limits()).unwrap(),
        ] {
            let t = bdtm_transfer(&params).unwrap();
            for j in 0..t.dim() {
                let sum: f64 = (0..t.dim()).map(|i| t.get(i, j)).sum();
                assert!((sum - 1.0).abs() < 1e-12, "column {j} sums to {sum}");
            }
        }
    }

    #[test]
    fn bdtm_floor_fold_matches_enumeration() {
        // small shifted system: degrees 2..=5, all connections thinned,
        // sub-floor landings clamp up to the floor
        let params = QueueParams::new(0.8, 0.4, 3, 2).unwrap();
        let t = bdtm_transfer(&params).unwrap();
        let m = params.m;
        let mut brute = vec![vec![0.0f64; m + 1]; m + 1];
        for j in 0..=m {
            let degree = params.k + j;
            for drops in 0..=degree {
                let choose =
                    (0..drops).fold(1.0, |acc, i| acc * (degree - i) as f64 / (i + 1) as f64);
                let p_drop = choose
                    * params.mu.powi(drops as i32)
                    * (1.0 - params.mu).powi((degree - drops) as i32);
                let mut p_arrival = (-params.lambda).exp();
                for arrivals in 0..200usize {
                    if arrivals > 0 {
                        p_arrival *= params.lambda / arrivals as f64;
                    }
                    let landing =
                        (j as i64 - drops as i64 + arrivals as i64).clamp(0, m as i64) as usize;
                    brute[landing][j] += p_drop * p_arrival;
                }
            }
        }
        for j in 0..=m {
            for i in 0..=m {
                assert!(
                    (t.get(i, j) - brute[i][j]).abs() < 1e-9,
                    "entry ({i},{j}): {} vs {}",
                    t.get(i, j),
                    brute[i][j]
                );
            }
        }
    }

    #[test]
    fn bdtm_equilibrium_matches_power_iteration() {
        let params = QueueParams::new(1.0, 0.5, 3, 0).unwrap();
        let t = bdtm_transfer(&params).unwrap();
        let eq = bdtm_equilibrium(&t).unwrap();
        // independent route: iterate the map until it stops moving
        let n = t.dim();
        let mut v = vec![1.0 / n as f64; n];
        for _ in 0..20_000 {
            let mut next = vec![0.0; n];
            for j in 0..n {
                for i in 0..n {
                    next[i] += t.get(i, j) * v[j];
                }
            }
            v = next;
        }
        for (a, b) in eq.probs().iter().zip(&v) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn bdtm_approaches_ctdm_as_step_shrinks() {
        let params = leaf_params();
        let ctdm = ctdm_equilibrium(&params).unwrap();
        let mut last_tv = f64::INFINITY;
        for denom in [1.0, 2.0, 4.0, 8.0] {
            let scaled =
                QueueParams::new(params.lambda / denom, params.mu / denom, params.m, params.k)
                    .unwrap();
            let eq = bdtm_equilibrium(&bdtm_transfer(&scaled).unwrap()).unwrap();
            let tv = eq.total_variation(&ctdm);
            assert!(tv < last_tv, "TV not shrinking at step 1/{denom}: {tv}");
            last_tv = tv;
        }
    }

    #[test]
    fn uniformized_transfer_keeps_the_equilibrium() {
        for params in [leaf_params(), ultra_params()] {
            let closed = ctdm_equilibrium(&params).unwrap();
            let t = ctdm_uniformized_transfer(&params).unwrap();
            for j in 0..t.dim() {
                let sum: f64 = (0..t.dim()).map(|i| t.get(i, j)).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
            let eq = bdtm_equilibrium(&t).unwrap();
            for (a, b) in closed.probs().iter().zip(eq.probs()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn params_validation() {
        assert!(QueueParams::new(-1.0, 0.5, 3, 0).is_err());
        assert!(QueueParams::new(1.0, -0.5, 3, 0).is_err());
        assert!(QueueParams::new(1.0, 0.5, 0, 0).is_err());
        let zero_mu = QueueParams::new(1.0, 0.0, 3, 0).unwrap();
        assert!(matches!(
            ctdm_equilibrium(&zero_mu),
            Err(QueueError::ZeroMu)
        ));
        let big_mu = QueueParams::new(1.0, 1.5, 3, 0).unwrap();
        assert!(matches!(
            bdtm_transfer(&big_mu),
            Err(QueueError::MuAboveOne(_))
        ));
    }
}
