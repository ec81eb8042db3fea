//! Subcommand implementations: thin orchestration over the library
//! modules, emitting CSV artifacts with fixed column order plus one
//! JSON run report each.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;

use overlay_core::analytics::{self, IntensityTransform};
use overlay_core::churn::{self, FitMethod, ModeFilter, Side};
use overlay_core::classifier::{self, ClassifierRegions, TraceClass};
use overlay_core::ingest::{self, FileFormat, TraceStore};
use overlay_core::linalg::total_variation;
use overlay_core::queue::{self, EquilibriumDist, QueueParams};
use overlay_core::simulator::{self, SimConfig};
use overlay_core::tracegen::{self, GenConfig, ModelKind};
use overlay_core::types::{PeerMode, PhaseState, RegionId};

use crate::report::{file_digest, InputDigest, RunReport};
use crate::{AppError, CommonArgs};

fn ensure_out_dir(dir: &Path) -> Result<(), AppError> {
    fs::create_dir_all(dir)
        .map_err(|e| AppError::input(format!("cannot create {}: {e}", dir.display())))
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, AppError> {
    let path = dir.join(name);
    fs::write(&path, contents)
        .map_err(|e| AppError::input(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

/// Load a crawl file, guessing the format from the extension unless
/// overridden; line diagnostics go to stderr and into the report.
fn load_store(
    input: &Path,
    format: Option<FileFormat>,
    report: &mut RunReport,
) -> Result<TraceStore, AppError> {
    let format = format
        .or_else(|| FileFormat::from_path(input))
        .ok_or_else(|| {
            AppError::input(format!(
                "cannot guess format of {}; pass --format",
                input.display()
            ))
        })?;
    let (store, diagnostics) = ingest::parse_crawl_file(input, format)?;
    if !diagnostics.is_empty() {
        eprintln!(
            "warning: {} line(s) rejected while reading {}",
            diagnostics.len(),
            input.display()
        );
        for d in diagnostics.iter().take(10) {
            eprintln!("  line {}: {}", d.line, d.reason);
        }
        if store.is_empty() {
            return Err(AppError::input(format!(
                "no valid records in {} ({} rejected lines)",
                input.display(),
                diagnostics.len()
            )));
        }
    }
    report.add_section("diagnostics", &diagnostics);
    report.input = Some(InputDigest {
        path: input.display().to_string(),
        sha256: file_digest(input)?,
        peers: store.peer_count(),
        records: store.record_count(),
    });
    Ok(store)
}

// ---------------------------------------------------------------- analyze

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Crawl trace file (.jsonl/.csv, optionally .gz).
    #[arg(long)]
    pub input: PathBuf,
    /// Input format override.
    #[arg(long)]
    pub format: Option<String>,
    /// Cell grouping for the transition fields (1 or 2).
    #[arg(long, default_value_t = 2)]
    pub group: u32,
    /// Minimum pairs per cell for the stream field.
    #[arg(long, default_value_t = 10)]
    pub min_support: u64,
    /// Emit intensity values as their fourth root.
    #[arg(long)]
    pub fourth_root: bool,
}

#[derive(Serialize)]
struct AnalyzeEcho<'a> {
    input: String,
    group: u32,
    min_support: u64,
    fourth_root: bool,
    profile: &'a str,
}

pub fn analyze(common: &CommonArgs, args: &AnalyzeArgs) -> Result<(), AppError> {
    let profile = common.load_profile()?;
    ensure_out_dir(&common.out_dir)?;
    let mut report = RunReport::new("analyze");
    report.seed = Some(common.seed.unwrap_or(1));
    report.profile = Some(profile.name().to_owned());
    report.set_config(&AnalyzeEcho {
        input: args.input.display().to_string(),
        group: args.group,
        min_support: args.min_support,
        fourth_root: args.fourth_root,
        profile: profile.name(),
    });

    if !(args.group == 1 || args.group == 2) {
        return Err(AppError::input("--group must be 1 or 2"));
    }
    let format = parse_format(args.format.as_deref())?;
    let store = load_store(&args.input, format, &mut report)?;
    if store.is_empty() {
        report.add_section("empty", &true);
        let path = report.write(&common.out_dir)?;
        println!("empty input; report at {}", path.display());
        return Ok(());
    }
    let traces = store.traces();

    // intensity grid
    let mut grid = analytics::intensity(&traces);
    if args.fourth_root {
        grid.transform = IntensityTransform::FourthRoot;
    }
    let mut csv = String::from("d_l,d_u,count,value\n");
    for (state, count, value) in grid.cells() {
        csv.push_str(&format!("{},{},{count},{value}\n", state.d_l, state.d_u));
    }
    write_artifact(&common.out_dir, "analyze_intensity.csv", &csv)?;
    report.add_section(
        "intensity",
        &serde_json::json!({"records": grid.total(), "transform": grid.transform}),
    );

    // transition pairs, stream and directional fields
    let pairs = analytics::transition_pairs_all(&traces);
    let stream = analytics::stream_field(&pairs, args.group, args.min_support);
    let mut csv = String::from("d_l,d_u,vx,vy,support\n");
    for (cell, s) in &stream.cells {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            cell.d_l, cell.d_u, s.mean_dx, s.mean_dy, s.support
        ));
    }
    write_artifact(&common.out_dir, "analyze_stream_field.csv", &csv)?;
    let stream_rows: Vec<_> = stream
        .cells
        .iter()
        .map(|(cell, s)| {
            serde_json::json!({
                "d_l": cell.d_l, "d_u": cell.d_u,
                "vx": s.mean_dx, "vy": s.mean_dy, "support": s.support,
            })
        })
        .collect();
    report.add_section("stream_field", &stream_rows);

    for (name, field) in [
        (
            "analyze_outgoing_field.csv",
            analytics::outgoing_field(&pairs, args.group),
        ),
        (
            "analyze_incoming_field.csv",
            analytics::incoming_field(&pairs, args.group),
        ),
    ] {
        let mut csv = String::from("d_l,d_u,vx,vy,magnitude\n");
        for (cell, arrows) in &field.cells {
            for a in arrows {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    cell.d_l, cell.d_u, a.dx, a.dy, a.magnitude
                ));
            }
        }
        write_artifact(&common.out_dir, name, &csv)?;
    }

    // stationary probability per state
    let stationary = analytics::stationary_probability(&pairs);
    let mut csv = String::from("d_l,d_u,stay_probability\n");
    for (state, p) in &stationary {
        csv.push_str(&format!("{},{},{p}\n", state.d_l, state.d_u));
    }
    write_artifact(&common.out_dir, "analyze_stationary.csv", &csv)?;

    // region transfer matrix, measured distribution, equilibrium
    if pairs.is_empty() {
        report.add_section("regions", &"no transition pairs (single-record traces)");
    } else {
        match analytics::region_transfer_matrix(&pairs, &profile) {
            Ok((g, p, diag)) => {
                let mut csv = String::from("from,to_lsr,to_usr,to_tb,to_udr\n");
                for from in RegionId::ALL {
                    csv.push_str(&from.to_string());
                    for to in RegionId::ALL {
                        csv.push_str(&format!(",{}", g.get(to, from)));
                    }
                    csv.push('\n');
                }
                write_artifact(&common.out_dir, "analyze_transfer_matrix.csv", &csv)?;
                let h = analytics::equilibrium_restricted(&g, &diag)?;
                report.add_section(
                    "regions",
                    &serde_json::json!({
                        "transfer_matrix": g,
                        "measured_distribution": p,
                        "equilibrium": h,
                        "diagnostics": diag,
                    }),
                );
            }
            Err(analytics::AnalyticsError::NoUsablePairs) => {
                report.add_section("regions", &"no pairs inside the region partition");
            }
            Err(e) => return Err(e.into()),
        }
    }

    report.add_section("stationary_states", &stationary.len());
    let path = report.write(&common.out_dir)?;
    println!(
        "analyzed {} records from {} peers; artifacts in {}; report at {}",
        store.record_count(),
        store.peer_count(),
        common.out_dir.display(),
        path.display()
    );
    Ok(())
}

fn parse_format(s: Option<&str>) -> Result<Option<FileFormat>, AppError> {
    s.map(|f| {
        f.parse::<FileFormat>()
            .map_err(|e| AppError::input(e.to_string()))
    })
    .transpose()
}

// ---------------------------------------------------------------- classify

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub format: Option<String>,
    /// Drop peers with fewer responses than this before classifying.
    #[arg(long, default_value_t = 10)]
    pub min_records: usize,
    /// Disk radius around both stable points.
    #[arg(long, default_value_t = 10.0)]
    pub radius: f64,
}

pub fn classify(common: &CommonArgs, args: &ClassifyArgs) -> Result<(), AppError> {
    let profile = common.load_profile()?;
    ensure_out_dir(&common.out_dir)?;
    let mut report = RunReport::new("classify");
    report.seed = Some(common.seed.unwrap_or(1));
    report.profile = Some(profile.name().to_owned());
    report.set_config(&serde_json::json!({
        "input": args.input.display().to_string(),
        "min_records": args.min_records,
        "radius": args.radius,
    }));

    let format = parse_format(args.format.as_deref())?;
    let store = load_store(&args.input, format, &mut report)?;
    let filtered = store.filter(&ingest::Filter {
        min_records: args.min_records,
        ..Default::default()
    });
    let regions = ClassifierRegions::new(
        profile.ultra_stable_point(),
        profile.leaf_stable_point(),
        args.radius,
        args.radius,
    )?;
    let traces = filtered.traces();
    let classified = classifier::classify_traces(&traces, &regions);

    let mut csv = String::from("peer,eta_l,eta_t,eta_u,xi_l,xi_t,xi_u,class\n");
    for c in &classified {
        let a = &c.attributes;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.peer_id, a.eta_l, a.eta_t, a.eta_u, a.xi_l, a.xi_t, a.xi_u, c.class
        ));
    }
    write_artifact(&common.out_dir, "classify_traces.csv", &csv)?;

    let histogram = classifier::class_histogram(&classified);
    let total = classified.len().max(1);
    let mut rows = Vec::new();
    println!("{:<32} {:>6} {:>7}", "class", "peers", "share");
    for class in TraceClass::ALL {
        let count = histogram.get(&class).copied().unwrap_or(0);
        let share = count as f64 / total as f64;
        println!(
            "{:<32} {:>6} {:>6.1}%",
            class.to_string(),
            count,
            share * 100.0
        );
        rows.push(serde_json::json!({
            "class": class.to_string(),
            "peers": count,
            "share": share,
        }));
    }
    report.add_section("histogram", &rows);
    report.add_section("classified", &classified.len());
    let path = report.write(&common.out_dir)?;
    println!(
        "classified {} traces (of {} peers before the min-records filter); report at {}",
        classified.len(),
        store.peer_count(),
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- fit

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub format: Option<String>,
    /// Session break time in hours.
    #[arg(long, default_value_t = 2.0)]
    pub break_hours: f64,
    /// Drop sessions at least this long when fitting lifetimes.
    #[arg(long)]
    pub censor_hours: Option<f64>,
    /// Head length for the head-mean Poisson fit.
    #[arg(long, default_value_t = 11)]
    pub head_points: usize,
    /// Correlation truncation threshold.
    #[arg(long, default_value_t = 11)]
    pub truncate_at: u32,
}

#[derive(Serialize)]
struct SideFit {
    side: String,
    method: String,
    lambda_hat: f64,
    raw_mean: f64,
    samples: u64,
    mode_filter: String,
}

pub fn fit(common: &CommonArgs, args: &FitArgs) -> Result<(), AppError> {
    let profile = common.load_profile()?;
    ensure_out_dir(&common.out_dir)?;
    let mut report = RunReport::new("fit");
    report.seed = Some(common.seed.unwrap_or(1));
    report.profile = Some(profile.name().to_owned());
    report.set_config(&serde_json::json!({
        "input": args.input.display().to_string(),
        "break_hours": args.break_hours,
        "censor_hours": args.censor_hours,
        "head_points": args.head_points,
        "truncate_at": args.truncate_at,
    }));

    let format = parse_format(args.format.as_deref())?;
    let store = load_store(&args.input, format, &mut report)?;
    let traces = store.traces();
    let steps = churn::churn_steps_all(&traces);
    let mode_filter = ModeFilter::default();

    // departure histograms and Poisson fits for both sides
    let mut fits = Vec::new();
    let mut hist_csv = String::from("side,departures,steps,frequency\n");
    let mut departure_means = BTreeMap::new();
    for side in [Side::Leaf, Side::Ultra] {
        let hist = churn::departure_histogram(&steps, side, mode_filter);
        for (k, &count) in hist.counts.iter().enumerate() {
            hist_csv.push_str(&format!("{:?},{k},{count},{}\n", side, hist.frequency(k)));
        }
        if hist.is_empty() {
            continue;
        }
        departure_means.insert(format!("{side:?}").to_lowercase(), hist.mean());
        for method in [
            FitMethod::MeanMinusOne,
            FitMethod::HeadKMean {
                k: args.head_points,
            },
        ] {
            let fit = churn::fit_poisson(&hist, method)?;
            fits.push(SideFit {
                side: format!("{side:?}").to_lowercase(),
                method: match method {
                    FitMethod::MeanMinusOne => "mean_minus_one".into(),
                    FitMethod::HeadKMean { k } => format!("head_{k}_mean"),
                },
                lambda_hat: fit.lambda_hat,
                raw_mean: fit.raw_mean,
                samples: fit.samples,
                mode_filter: format!(
                    "d_l>={} and d_u>={}",
                    mode_filter.min_d_l, mode_filter.min_d_u
                ),
            });
        }
    }
    write_artifact(&common.out_dir, "fit_departure_histograms.csv", &hist_csv)?;
    report.add_section("poisson_fits", &fits);

    // sessions and lifetime fits
    let break_secs = (args.break_hours * 3600.0).round() as i64;
    let durations: Vec<f64> = traces
        .iter()
        .flat_map(|t| churn::sessions(t, break_secs))
        .map(|s| s.duration_hours())
        .collect();
    // best-effort: degenerate session sets (all zero-length, or all
    // censored away) are reported, not fatal
    match churn::fit_exponential(&durations, None) {
        Ok(all) => report.add_section("session_fit_all", &all),
        Err(e) => report.add_section("session_fit_all", &e.to_string()),
    }
    if let Some(limit) = args.censor_hours {
        match churn::fit_exponential(&durations, Some(limit)) {
            Ok(censored) => report.add_section("session_fit_censored", &censored),
            Err(e) => report.add_section("session_fit_censored", &e.to_string()),
        }
    }

    // lifetimes split by the mode a peer actually held, inferring the
    // missing modes from the degree criterion
    let mut by_mode: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for trace in &traces {
        let modes: std::collections::BTreeSet<PeerMode> =
            trace.records().iter().map(churn::infer_mode).collect();
        let bucket = if modes.len() > 1 {
            "churn"
        } else if modes.contains(&PeerMode::Ultra) {
            "ultra_only"
        } else {
            "leaf_only"
        };
        by_mode.entry(bucket).or_default().extend(
            churn::sessions(trace, break_secs)
                .iter()
                .map(|s| s.duration_hours()),
        );
    }
    let mut mode_fits = serde_json::Map::new();
    for (bucket, durations) in &by_mode {
        let entry = match churn::fit_exponential(durations, args.censor_hours) {
            Ok(fit) => serde_json::to_value(fit).expect("fit serializes"),
            Err(_) => serde_json::json!({"sessions": durations.len(), "fit": null}),
        };
        mode_fits.insert((*bucket).to_owned(), entry);
    }
    report.add_section("session_fit_by_mode", &mode_fits);

    // stable-point occupancy, arrival-rate estimates, implied lifetimes
    let interval_hours = median_interval_hours(&store).unwrap_or(0.5);
    let limits = profile.slot_limits();
    let ultra_steps: Vec<&churn::ChurnStep> = steps
        .iter()
        .filter(|s| {
            s.from_state.d_l >= mode_filter.min_d_l && s.from_state.d_u >= mode_filter.min_d_u
        })
        .collect();
    if !ultra_steps.is_empty() {
        let n = ultra_steps.len() as f64;
        let mean_d_l: f64 = ultra_steps
            .iter()
            .map(|s| s.from_state.d_l as f64)
            .sum::<f64>()
            / n;
        let mean_d_u: f64 = ultra_steps
            .iter()
            .map(|s| s.from_state.d_u as f64)
            .sum::<f64>()
            / n;
        let q_leaf = ultra_steps
            .iter()
            .filter(|s| s.from_state.d_l >= limits.b_l)
            .count() as f64
            / n;
        let q_ultra = ultra_steps
            .iter()
            .filter(|s| s.from_state.d_u >= limits.b_u)
            .count() as f64
            / n;
        let mut estimates = serde_json::Map::new();
        for (side, q, mean_degree) in [("leaf", q_leaf, mean_d_l), ("ultra", q_ultra, mean_d_u)] {
            let u = departure_means.get(side).copied().unwrap_or(0.0);
            let lambda = if q < 1.0 {
                queue::estimate_lambda(q, u)?
            } else {
                f64::NAN
            };
            let departures_per_hour = u / interval_hours;
            let lifetime = if departures_per_hour > 0.0 {
                Some(churn::connection_lifetime(
                    mean_degree,
                    departures_per_hour,
                )?)
            } else {
                None
            };
            estimates.insert(
                side.to_owned(),
                serde_json::json!({
                    "stable_point_probability": q,
                    "mean_departures_per_interval": u,
                    "lambda_per_interval": lambda,
                    "mean_degree": mean_degree,
                    "connection_lifetime_hours": lifetime,
                }),
            );
        }
        report.add_section("arrival_estimates", &estimates);
    }

    // departure correlation, full and truncated
    if let Ok(full) = churn::departure_correlation(&steps, None) {
        let truncated = churn::departure_correlation(&steps, Some(args.truncate_at)).ok();
        report.add_section(
            "departure_correlation",
            &serde_json::json!({"full": full, "truncated": truncated, "truncate_at": args.truncate_at}),
        );
    }

    let path = report.write(&common.out_dir)?;
    println!(
        "fitted churn statistics over {} steps from {} peers; report at {}",
        steps.len(),
        store.peer_count(),
        path.display()
    );
    Ok(())
}

/// Median gap between consecutive responses, in hours.
fn median_interval_hours(store: &TraceStore) -> Option<f64> {
    let mut gaps: Vec<i64> = Vec::new();
    for trace in store.traces() {
        for w in trace.records().windows(2) {
            gaps.push(w[1].t() - w[0].t());
        }
    }
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_unstable();
    Some(gaps[gaps.len() / 2] as f64 / 3600.0)
}

// ---------------------------------------------------------------- model

/// Rates and limits as read from a `--params` TOML file. Explicit CLI
/// flags win over file values, which win over the built-in defaults
/// (the measured LimeWire operating point).
#[derive(Debug, Clone, Copy, Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParamsFile {
    pub lambda_l: Option<f64>,
    pub mu_l: Option<f64>,
    pub lambda_u: Option<f64>,
    pub mu_u: Option<f64>,
    pub b_l: Option<u32>,
    pub b_u: Option<u32>,
    pub l_u: Option<u32>,
}

/// Shared rate/limit flags for the model-driven subcommands.
#[derive(Debug, Args)]
pub struct RateArgs {
    /// TOML file with any of: lambda_l, mu_l, lambda_u, mu_u, b_l,
    /// b_u, l_u.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Leaf-system arrival rate per interval (default 9.5).
    #[arg(long)]
    pub lambda_l: Option<f64>,
    /// Leaf-system per-connection drop rate per interval.
    #[arg(long)]
    pub mu_l: Option<f64>,
    /// Ultra-system arrival rate per interval (default 8).
    #[arg(long)]
    pub lambda_u: Option<f64>,
    /// Ultra-system per-connection drop rate per interval.
    #[arg(long)]
    pub mu_u: Option<f64>,
    /// Override the profile's leaf slot cap.
    #[arg(long)]
    pub b_l: Option<u32>,
    /// Override the profile's ultra slot cap.
    #[arg(long)]
    pub b_u: Option<u32>,
    /// Override the profile's active-connect threshold.
    #[arg(long)]
    pub l_u: Option<u32>,
}

/// Effective rates and limits after the precedence is applied.
struct EffectiveRates {
    lambda_l: f64,
    mu_l: f64,
    lambda_u: f64,
    mu_u: f64,
    limits: overlay_core::types::QueueLimits,
}

impl RateArgs {
    fn resolve(
        &self,
        profile: &overlay_core::types::SoftwareProfile,
    ) -> Result<EffectiveRates, AppError> {
        let file: ModelParamsFile = match &self.params {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| AppError::input(format!("cannot read {}: {e}", path.display())))?;
                toml::from_str(&text)
                    .map_err(|e| AppError::input(format!("{} invalid: {e}", path.display())))?
            }
            None => ModelParamsFile::default(),
        };
        let mut limits = profile.slot_limits();
        if let Some(b_l) = self.b_l.or(file.b_l) {
            limits.b_l = b_l;
        }
        if let Some(b_u) = self.b_u.or(file.b_u) {
            limits.b_u = b_u;
        }
        if let Some(l_u) = self.l_u.or(file.l_u) {
            limits.l_u = l_u;
        }
        if limits.l_u >= limits.b_u || limits.b_l == 0 {
            return Err(AppError::input(
                "limits invalid: need b_l > 0 and l_u < b_u",
            ));
        }
        Ok(EffectiveRates {
            lambda_l: self.lambda_l.or(file.lambda_l).unwrap_or(9.5),
            mu_l: self.mu_l.or(file.mu_l).unwrap_or(5.8 / 27.8507),
            lambda_u: self.lambda_u.or(file.lambda_u).unwrap_or(8.0),
            mu_u: self.mu_u.or(file.mu_u).unwrap_or(4.8 / 29.9443),
            limits,
        })
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub rates: RateArgs,
    /// Empirical distribution CSV (degree,probability) to overlay.
    #[arg(long)]
    pub empirical: Option<PathBuf>,
    /// Which side the empirical distribution describes.
    #[arg(long, default_value = "leaf")]
    pub empirical_side: String,
}

fn equilibrium_csv(eq: &EquilibriumDist) -> String {
    let mut csv = String::from("degree,probability\n");
    for (degree, p) in eq.degree_probs() {
        csv.push_str(&format!("{degree},{p}\n"));
    }
    csv
}

pub fn model(common: &CommonArgs, args: &ModelArgs) -> Result<(), AppError> {
    let profile = common.load_profile()?;
    ensure_out_dir(&common.out_dir)?;
    let rates = args.rates.resolve(&profile)?;

    let mut report = RunReport::new("model");
    report.seed = Some(common.seed.unwrap_or(1));
    report.profile = Some(profile.name().to_owned());
    report.set_config(&serde_json::json!({
        "lambda_l": rates.lambda_l, "mu_l": rates.mu_l,
        "lambda_u": rates.lambda_u, "mu_u": rates.mu_u,
        "limits": rates.limits,
    }));

    let leaf = QueueParams::leaf(rates.lambda_l, rates.mu_l, &rates.limits)?;
    let ultra = QueueParams::ultra(rates.lambda_u, rates.mu_u, &rates.limits)?;

    let mut side_summaries = serde_json::Map::new();
    for (name, params) in [("leaf", leaf), ("ultra", ultra)] {
        let ctdm = queue::ctdm_equilibrium(&params)?;
        write_artifact(
            &common.out_dir,
            &format!("model_ctdm_{name}.csv"),
            &equilibrium_csv(&ctdm),
        )?;
        let bdtm = queue::bdtm_equilibrium(&queue::bdtm_transfer(&params)?)?;
        write_artifact(
            &common.out_dir,
            &format!("model_bdtm_{name}.csv"),
            &equilibrium_csv(&bdtm),
        )?;
        let blocking = ctdm.top_state_mass();
        let (admitted, rejected) = queue::admitted_rejected(params.lambda, blocking)?;
        side_summaries.insert(
            name.to_owned(),
            serde_json::json!({
                "lambda": params.lambda,
                "mu": params.mu,
                "blocking": blocking,
                "success_rate": 1.0 - blocking,
                "admitted_per_interval": admitted,
                "rejected_per_interval": rejected,
                "mean_degree": ctdm.mean_degree(),
                "ctdm_bdtm_tv": ctdm.total_variation(&bdtm),
            }),
        );
        println!(
            "{name}: blocking {blocking:.4}, admitted {admitted:.3}/interval, rejected {rejected:.3}/interval, mean degree {:.2}",
            ctdm.mean_degree()
        );
    }
    report.add_section("systems", &side_summaries);

    if let Some(path) = &args.empirical {
        let side = args.empirical_side.as_str();
        let params = match side {
            "leaf" => leaf,
            "ultra" => ultra,
            other => {
                return Err(AppError::input(format!(
                    "empirical side must be leaf or ultra, got {other:?}"
                )))
            }
        };
        let empirical = read_empirical(path, &params)?;
        let model_eq = queue::ctdm_equilibrium(&params)?;
        let tv = total_variation(&empirical, model_eq.probs());
        let overlay: Vec<_> = model_eq
            .degree_probs()
            .zip(&empirical)
            .map(|((degree, model_p), &emp_p)| {
                serde_json::json!({"degree": degree, "model": model_p, "empirical": emp_p})
            })
            .collect();
        report.add_section(
            "empirical_overlay",
            &serde_json::json!({"side": side, "total_variation": tv, "points": overlay}),
        );
        println!("empirical overlay ({side}): TV(model, data) = {tv:.4}");
    }

    let path = report.write(&common.out_dir)?;
    println!(
        "model artifacts in {}; report at {}",
        common.out_dir.display(),
        path.display()
    );
    Ok(())
}

/// Read a (degree,probability) CSV onto the system's degree range,
/// renormalizing to sum 1.
fn read_empirical(path: &Path, params: &QueueParams) -> Result<Vec<f64>, AppError> {
    let text = fs::read_to_string(path)
        .map_err(|e| AppError::input(format!("cannot read {}: {e}", path.display())))?;
    let mut probs = vec![0.0f64; params.m + 1];
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.to_ascii_lowercase().starts_with("degree") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let degree: i64 = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| AppError::input(format!("{}:{}: bad degree", path.display(), i + 1)))?;
        let p: f64 = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| {
                AppError::input(format!("{}:{}: bad probability", path.display(), i + 1))
            })?;
        let idx = degree - params.k as i64;
        if idx < 0 || idx > params.m as i64 {
            return Err(AppError::input(format!(
                "{}:{}: degree {degree} outside {}..={}",
                path.display(),
                i + 1,
                params.floor(),
                params.cap()
            )));
        }
        probs[idx as usize] = p;
    }
    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        return Err(AppError::input("empirical distribution sums to zero"));
    }
    Ok(probs.into_iter().map(|p| p / total).collect())
}

// ---------------------------------------------------------------- generate

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Which model drives the chains: ctdm or bdtm.
    #[arg(long, default_value = "ctdm")]
    pub model: String,
    /// Steps per trace (samples = steps + 1).
    #[arg(long, default_value_t = 46)]
    pub n: usize,
    /// Number of independent traces.
    #[arg(long, default_value_t = 1)]
    pub traces: usize,
    /// Initial leaf degree.
    #[arg(long, default_value_t = 28)]
    pub x0_l: u32,
    /// Initial ultra degree.
    #[arg(long, default_value_t = 30)]
    pub x0_u: u32,
    #[command(flatten)]
    pub rates: RateArgs,
    /// Seconds between samples.
    #[arg(long, default_value_t = 1800)]
    pub interval: i64,
    /// Output JSONL path (.gz honored); defaults into --out-dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn generate(common: &CommonArgs, args: &GenerateArgs) -> Result<(), AppError> {
    let profile = common.load_profile()?;
    ensure_out_dir(&common.out_dir)?;
    let rates = args.rates.resolve(&profile)?;
    let model: ModelKind = args.model.parse().map_err(AppError::input)?;
    let config = GenConfig {
        model,
        leaf: QueueParams::leaf(rates.lambda_l, rates.mu_l, &rates.limits)?,
        ultra: QueueParams::ultra(rates.lambda_u, rates.mu_u, &rates.limits)?,
        x0: PhaseState::new(args.x0_l, args.x0_u)?,
        steps: args.n,
        seed: common.seed.unwrap_or(1),
        interval_secs: args.interval,
    };

    let mut store = TraceStore::new();
    for trace in tracegen::generate_many(&config, args.traces)? {
        for record in trace {
            store
                .insert(record)
                .map_err(|e| AppError::Internal(format!("generated record rejected: {e}")))?;
        }
    }
    let out_path = args
        .out
        .clone()
        .unwrap_or_else(|| common.out_dir.join("generated.jsonl"));
    ingest::write_crawl_file(&store, &out_path, FileFormat::Jsonl)?;

    let mut report = RunReport::new("generate");
    report.seed = Some(common.seed.unwrap_or(1));
    report.profile = Some(profile.name().to_owned());
    report.set_config(&config);
    report.add_section(
        "output",
        &serde_json::json!({
            "path": out_path.display().to_string(),
            "traces": args.traces,
            "records": store.record_count(),
        }),
    );
    let report_path = report.write(&common.out_dir)?;
    println!(
        "generated {} traces x {} samples into {}; report at {}",
        args.traces,
        args.n + 1,
        out_path.display(),
        report_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML config; every field optional, defaults are the calibrated
    /// LimeWire-like run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the peer count.
    #[arg(long)]
    pub peers: Option<usize>,
    /// Override the simulated duration.
    #[arg(long)]
    pub duration_hours: Option<f64>,
    /// Output JSONL path (.gz honored); defaults into --out-dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn simulate(common: &CommonArgs, args: &SimulateArgs) -> Result<(), AppError> {
    ensure_out_dir(&common.out_dir)?;
    let mut config: SimConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| AppError::input(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str(&text)
                .map_err(|e| AppError::input(format!("{} invalid: {e}", path.display())))?
        }
        None => SimConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(peers) = args.peers {
        config.n_peers = peers;
    }
    if let Some(hours) = args.duration_hours {
        config.duration_hours = hours;
    }

    let output = simulator::run(config.clone())?;
    let mut store = TraceStore::new();
    for record in output.records {
        store
            .insert(record)
            .map_err(|e| AppError::Internal(format!("simulator record rejected: {e}")))?;
    }
    let out_path = args
        .out
        .clone()
        .unwrap_or_else(|| common.out_dir.join("simulated.jsonl.gz"));
    ingest::write_crawl_file(&store, &out_path, FileFormat::Jsonl)?;

    let mut report = RunReport::new("simulate");
    report.seed = Some(config.seed);
    report.set_config(&config);
    report.add_section("summary", &output.summary);
    report.add_section(
        "output",
        &serde_json::json!({
            "path": out_path.display().to_string(),
            "peers": store.peer_count(),
            "records": store.record_count(),
        }),
    );
    let report_path = report.write(&common.out_dir)?;
    println!(
        "simulated {} peers for {}h: {} records into {}; report at {}",
        config.n_peers,
        config.duration_hours,
        store.record_count(),
        out_path.display(),
        report_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- report

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run-report JSON files to summarize.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
}

pub fn report_summary(args: &ReportArgs) -> Result<(), AppError> {
    for path in &args.reports {
        let text = fs::read_to_string(path)
            .map_err(|e| AppError::input(format!("cannot read {}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| AppError::input(format!("{} is not a report: {e}", path.display())))?;
        let command = value["command"].as_str().unwrap_or("?");
        let version = value["tool_version"].as_str().unwrap_or("?");
        println!("== {} (overlay-phase {version}, {command})", path.display());
        if let Some(input) = value.get("input").filter(|v| !v.is_null()) {
            println!(
                "   input {} ({} peers, {} records, sha256 {})",
                input["path"].as_str().unwrap_or("?"),
                input["peers"],
                input["records"],
                input["sha256"].as_str().map(|s| &s[..12]).unwrap_or("?")
            );
        }
        if let Some(seed) = value.get("seed").and_then(|v| v.as_u64()) {
            println!("   seed {seed}");
        }
        if let Some(sections) = value.get("sections").and_then(|v| v.as_object()) {
            for (name, body) in sections {
                let rendered = serde_json::to_string(body).unwrap_or_default();
                let clipped: String = rendered.chars().take(160).collect();
                let suffix = if rendered.chars().count() > 160 {
                    "..."
                } else {
                    ""
                };
                println!("   {name}: {clipped}{suffix}");
            }
        }
        let _ = std::io::stdout().flush();
    }
    Ok(())
}
