//! Cross-module integration: model-generated traces through the ingest
//! and analytics pipeline, the simulator closed against the queue
//! estimators, and long-run convergence of the trace generators.

use std::io::Cursor;

use overlay_core::analytics;
use overlay_core::churn::{self, ModeFilter, Side};
use overlay_core::ingest::{self, FileFormat, TraceStore};
use overlay_core::linalg::total_variation;
use overlay_core::queue::{ctdm_equilibrium, QueueParams};
use overlay_core::simulator::{self, PromotionRule, SimConfig};
use overlay_core::tracegen::{self, GenConfig, ModelKind};
use overlay_core::types::{PeerMode, PhaseState, QueueLimits};

fn limewire_leaf() -> QueueParams {
    QueueParams::leaf(9.5, 5.8 / 27.8507, &QueueLimits::default()).unwrap()
}

fn limewire_ultra() -> QueueParams {
    QueueParams::ultra(8.0, 4.8 / 29.9443, &QueueLimits::default()).unwrap()
}

/// Generated traces must flow through file round-trip and analytics
/// with no diagnostics and exact conservation.
#[test]
fn generated_traces_feed_the_analytics_pipeline() {
    let config = GenConfig {
        model: ModelKind::Bdtm,
        leaf: limewire_leaf(),
        ultra: limewire_ultra(),
        x0: PhaseState { d_l: 28, d_u: 30 },
        steps: 200,
        seed: 9,
        interval_secs: 1800,
    };
    let traces = tracegen::generate_many(&config, 20).unwrap();
    let mut store = TraceStore::new();
    for trace in traces {
        for record in trace {
            store.insert(record).unwrap();
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("generated.jsonl.gz");
    ingest::write_crawl_file(&store, &path, FileFormat::Jsonl).unwrap();
    let (parsed, diagnostics) = ingest::parse_crawl_file(&path, FileFormat::Jsonl).unwrap();
    assert!(diagnostics.is_empty(), "{diagnostics:?}");
    assert_eq!(parsed.record_count(), 20 * 201);

    let traces = parsed.traces();
    let grid = analytics::intensity(&traces);
    assert_eq!(grid.total(), 20 * 201);
    let pairs = analytics::transition_pairs_all(&traces);
    assert_eq!(pairs.len(), 20 * 200);

    // every generated state respects the systems' degree ranges
    for (state, _, _) in grid.cells() {
        assert!(state.d_l <= 30);
        assert!((20..=32).contains(&state.d_u));
    }
}

/// The simulator, churn estimators, and queue model close the loop:
/// rates fitted from simulated crawls land near the configured truth.
#[test]
fn simulator_fits_close_the_loop() {
    // freeze the population so the only dynamics are slot-keeping
    let config = SimConfig {
        n_peers: 1000,
        peer_churn: false,
        promotion: PromotionRule::Hazard { per_hour: 0.0 },
        kickout_hazard_per_hour: 0.0,
        duration_hours: 12.0,
        seed: 5150,
        ..SimConfig::default()
    };
    let interval_hours = config.crawl_interval_secs as f64 / 3600.0;
    let out = simulator::run(config.clone()).unwrap();

    let mut jsonl = String::new();
    for r in &out.records {
        jsonl.push_str(&serde_json::to_string(r).unwrap());
        jsonl.push('\n');
    }
    let (store, diagnostics) = ingest::parse_jsonl(Cursor::new(jsonl));
    assert!(diagnostics.is_empty());

    let traces = store.traces();
    let steps = churn::churn_steps_all(&traces);
    let filter = ModeFilter::default();
    let hist = churn::departure_histogram(&steps, Side::Leaf, filter);
    let u = hist.mean();

    let ultra_steps: Vec<_> = steps
        .iter()
        .filter(|s| s.from_state.d_l >= filter.min_d_l && s.from_state.d_u >= filter.min_d_u)
        .collect();
    let n = ultra_steps.len() as f64;
    let mean_d_l = ultra_steps
        .iter()
        .map(|s| s.from_state.d_l as f64)
        .sum::<f64>()
        / n;

    // drop-rate recovery: every leaf-ultra edge lives Exp(2.4h), so the
    // per-connection drop probability per interval is interval/2.4
    let mu_hat = u / mean_d_l;
    let mu_true = interval_hours / config.leaf_conn_mean_hours;
    let mu_err = (mu_hat - mu_true).abs() / mu_true;
    assert!(
        mu_err < 0.15,
        "mu_hat {mu_hat:.4} vs configured {mu_true:.4} ({:.1}% off)",
        mu_err * 100.0
    );

    // arrival-rate recovery: lambda = u / (1 - q) against the enquiry
    // stream the simulator actually counted
    let q = ultra_steps
        .iter()
        .filter(|s| s.from_state.d_l >= config.ultra_limits.b_l)
        .count() as f64
        / n;
    let lambda_hat = overlay_core::queue::estimate_lambda(q, u).unwrap();
    let lambda_measured = out
        .summary
        .leaf_enquiry_rate_per_interval(config.crawl_interval_secs);
    let lambda_err = (lambda_hat - lambda_measured).abs() / lambda_measured;
    assert!(
        lambda_err < 0.15,
        "lambda_hat {lambda_hat:.3} vs measured stream {lambda_measured:.3} ({:.1}% off)",
        lambda_err * 100.0
    );
}

/// Longer runs get closer to the model equilibrium: total variation at
/// 1e3/1e4/1e5/1e6 steps shrinks (within a small noise band) and ends
/// deep under the long-run gate.
#[test]
fn generator_convergence_ladder() {
    for model in [ModelKind::Ctdm, ModelKind::Bdtm] {
        let config = GenConfig {
            model,
            leaf: limewire_leaf(),
            ultra: limewire_ultra(),
            x0: PhaseState { d_l: 28, d_u: 30 },
            steps: 1_000_000,
            seed: 314,
            interval_secs: 1800,
        };
        let trace = tracegen::generate(&config).unwrap();
        let leaf_model = match model {
            ModelKind::Ctdm => ctdm_equilibrium(&config.leaf).unwrap(),
            ModelKind::Bdtm => overlay_core::queue::bdtm_equilibrium(
                &overlay_core::queue::bdtm_transfer(&config.leaf).unwrap(),
            )
            .unwrap(),
        };
        let tv_at = |n: usize| {
            let mut counts = vec![0u64; config.leaf.m + 1];
            for (_, s) in &trace[..n] {
                counts[s.d_l as usize] += 1;
            }
            let emp: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
            total_variation(&emp, leaf_model.probs())
        };
        let ladder: Vec<f64> = [1_000, 10_000, 100_000, 1_000_000]
            .iter()
            .map(|&n| tv_at(n))
            .collect();
        for window in ladder.windows(2) {
            assert!(
                window[1] < window[0] * 1.25 + 0.003,
                "{model:?}: TV ladder not shrinking: {ladder:?}"
            );
        }
        assert!(
            ladder[3] < ladder[0] && ladder[3] < 0.01,
            "{model:?}: ladder {ladder:?}"
        );
    }
}

/// Transfer-matrix estimation recovers a known region chain from
/// sampled transitions.
#[test]
fn region_chain_recovery_from_samples() {
    use overlay_core::types::{RegionId, SoftwareProfile};
    use rand::Rng;
    use rand::SeedableRng;

    let profile = SoftwareProfile::limewire();
    // one representative lattice point per region
    let anchors = [
        PhaseState { d_l: 0, d_u: 2 },   // LSR
        PhaseState { d_l: 30, d_u: 32 }, // USR
        PhaseState { d_l: 10, d_u: 25 }, // TB
        PhaseState { d_l: 15, d_u: 10 }, // UDR
    ];
    for (anchor, region) in anchors.iter().zip(RegionId::ALL) {
        assert_eq!(analytics::region_of(anchor, &profile), Some(region));
    }
    // ground-truth column-stochastic chain, columns = from-region
    let truth = [
        [0.70, 0.05, 0.20, 0.10],
        [0.10, 0.80, 0.30, 0.20],
        [0.15, 0.10, 0.40, 0.10],
        [0.05, 0.05, 0.10, 0.60],
    ];
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1234);
    let mut state = 0usize;
    let mut pairs = Vec::with_capacity(100_000);
    for _ in 0..100_000 {
        let r: f64 = rng.gen();
        let mut acc = 0.0;
        let mut next = 3;
        for (i, row) in truth.iter().enumerate() {
            acc += row[state];
            if r < acc {
                next = i;
                break;
            }
        }
        pairs.push((anchors[state], anchors[next]));
        state = next;
    }
    let (g, _, diag) = analytics::region_transfer_matrix(&pairs, &profile).unwrap();
    assert_eq!(diag.pairs_outside_partition, 0);
    assert!(diag.empty_regions.is_empty());
    for from in RegionId::ALL {
        for to in RegionId::ALL {
            let got = g.get(to, from);
            let want = truth[to.index()][from.index()];
            assert!(
                (got - want).abs() < 0.02,
                "entry ({to},{from}): {got:.4} vs {want:.4}"
            );
        }
    }
}

/// With churn off and steady arrivals, an ultra's leaf degree behaves
/// as the loss queue the model says it is: its long-run distribution
/// approaches the CTDM equilibrium driven by the measured enquiry
/// rate. The leaf-slot side is the clean regime for this: leaves
/// always initiate, so only target-side blocking is in play.
#[test]
fn simulator_approaches_ctdm_equilibrium() {
    // twenty ultras so no single queue dominates the finite leaf pool
    let config = SimConfig {
        n_peers: 280,
        initial_ultra_fraction: 0.0715,
        peer_churn: false,
        promotion: PromotionRule::Hazard { per_hour: 0.0 },
        kickout_hazard_per_hour: 0.0,
        passive_attempt_rate_per_hour: 0.0,
        // a ten-thousand-interval horizon, sampled every fourth one;
        // the streaming sink keeps memory flat
        crawl_interval_secs: 7200,
        duration_hours: 5000.0,
        seed: 303,
        ..SimConfig::default()
    };
    let limits = config.ultra_limits;
    let interval_hours = config.crawl_interval_secs as f64 / 3600.0;

    let m = limits.b_l as usize;
    let mut counts = vec![0u64; m + 1];
    let mut per_peer: std::collections::BTreeMap<String, Vec<u64>> = Default::default();
    let summary = simulator::Simulation::new(config.clone())
        .unwrap()
        .run_streaming(|record| {
            if record.mode() == PeerMode::Ultra {
                let idx = record.state().d_l as usize;
                counts[idx] += 1;
                per_peer
                    .entry(record.peer_id().to_string())
                    .or_insert_with(|| vec![0u64; m + 1])[idx] += 1;
            }
            Ok(())
        })
        .unwrap();

    let lambda = summary.leaf_enquiry_rate_per_interval(config.crawl_interval_secs);
    let mu = interval_hours / config.leaf_conn_mean_hours;
    let params = QueueParams::leaf(lambda, mu, &limits).unwrap();
    let model = ctdm_equilibrium(&params).unwrap();

    let total: u64 = counts.iter().sum();
    let pooled: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let tv_pooled = total_variation(&pooled, model.probs());
    assert!(
        tv_pooled < 0.1,
        "pooled TV {tv_pooled:.4} (lambda {lambda:.2}/interval, mu {mu:.4})"
    );

    // individual degree processes behave the same way
    assert_eq!(per_peer.len(), 20);
    for (peer, c) in &per_peer {
        let n: u64 = c.iter().sum();
        let emp: Vec<f64> = c.iter().map(|&x| x as f64 / n as f64).collect();
        let tv = total_variation(&emp, model.probs());
        assert!(tv < 0.1, "peer {peer}: TV {tv:.4} over {n} samples");
    }
}

/// The simulated phase-space structure is a property of the defaults,
/// not of one lucky seed: the stable-region concentration and the
/// churn-dominance signature hold across seeds at full scale.
#[test]
fn simulation_phenomena_hold_across_seeds() {
    use overlay_core::classifier::{self, ClassifierRegions, TraceClass};
    use overlay_core::types::{RegionId, SoftwareProfile};

    let profile = SoftwareProfile::limewire();
    let regions = ClassifierRegions::from_profile(&profile).unwrap();
    for seed in [1u64, 77, 20301] {
        let config = SimConfig {
            seed,
            ..SimConfig::default()
        };
        let out = simulator::run(config).unwrap();
        let mut store = TraceStore::new();
        for record in out.records {
            store.insert(record).unwrap();
        }
        let ultra_samples: Vec<_> = store
            .records()
            .filter(|r| r.mode() == PeerMode::Ultra)
            .collect();
        let usr = ultra_samples
            .iter()
            .filter(|r| analytics::region_of(&r.state(), &profile) == Some(RegionId::Usr))
            .count();
        let usr_share = usr as f64 / ultra_samples.len().max(1) as f64;
        assert!(usr_share > 0.4, "seed {seed}: USR share {usr_share:.2}");

        let traces = store.traces();
        let classified = classifier::classify_traces(&traces, &regions);
        let stable: std::collections::BTreeSet<&str> = classified
            .iter()
            .filter(|c| {
                c.class == TraceClass::StableUltra
                    || c.class == TraceClass::StableUltraOccasionalChurn
            })
            .map(|c| c.peer_id.as_str())
            .collect();
        assert!(!stable.is_empty(), "seed {seed}: no stable ultras");
        let steps = churn::churn_steps_all(&traces);
        let stable_steps: Vec<_> = steps
            .iter()
            .filter(|s| stable.contains(s.peer_id.as_str()))
            .collect();
        let n = stable_steps.len() as f64;
        let degree: f64 = stable_steps.iter().map(|s| s.degree_change).sum::<f64>() / n;
        let departures: f64 = stable_steps
            .iter()
            .map(|s| {
                let l = s.leaf_departures as f64;
                let u = s.ultra_departures as f64;
                (l * l + u * u).sqrt()
            })
            .sum::<f64>()
            / n;
        assert!(
            departures > 1.8 * degree,
            "seed {seed}: departures {departures:.2} vs degree change {degree:.2}"
        );
    }
}

/// Simulated stores survive the strict-validation path: every record
/// re-validates on parse, and the per-peer traces are time-ordered.
#[test]
fn simulated_records_revalidate() {
    let config = SimConfig {
        n_peers: 150,
        duration_hours: 3.0,
        seed: 8,
        ..SimConfig::default()
    };
    let out = simulator::run(config).unwrap();
    let mut store = TraceStore::new();
    for record in out.records {
        store.insert(record).unwrap();
    }
    for trace in store.traces() {
        let mut last = i64::MIN;
        for record in trace.records() {
            assert!(record.t() > last);
            last = record.t();
            assert_ne!(record.mode(), PeerMode::Unknown);
        }
    }
    assert_eq!(store.time_range().unwrap().0, 0);
    assert!(store.software_index().contains_key("sim-limewire"));
}
