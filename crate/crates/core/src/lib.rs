//! Degree dynamics of two-tier unstructured p2p overlays.
//!
//! A peer's connectivity at one instant is a point (d_l, d_u) on the
//! leaf-degree x ultra-degree lattice; crawl traces become paths on
//! that lattice. This crate covers the whole workflow over such
//! traces:
//!
//! - [`types`]: validated domain types (records, traces, profiles);
//! - [`ingest`]: JSONL/CSV parsing with per-line diagnostics;
//! - [`analytics`]: intensity grids, transition fields, the four-region
//!   partition with its transfer matrix and equilibrium;
//! - [`classifier`]: per-trace stability classes over the two-disk
//!   partition;
//! - [`churn`]: connection-vs-degree churn, departure fits, sessions,
//!   lifetimes;
//! - [`queue`]: the double M/M/m/m degree-keeping model, continuous and
//!   discrete time;
//! - [`tracegen`]: seeded synthetic degree traces from either model;
//! - [`simulator`]: a discrete-event slot-protocol overlay that
//!   regenerates the measured phenomena from first principles.
//!
//! Heavy per-trace aggregations run on rayon under the default
//! `parallel` feature; disabling it leaves byte-identical results on a
//! single thread.
//!
//! ```
//! use overlay_core::queue::{ctdm_equilibrium, erlang_b_blocking, QueueParams};
//! use overlay_core::types::QueueLimits;
//!
//! // leaf-slot system at its measured operating point: 9.5 enquiries
//! // per crawl interval against 5.8 departures at mean degree 27.85
//! let limits = QueueLimits::default();
//! let params = QueueParams::leaf(9.5, 5.8 / 27.8507, &limits)?;
//! let equilibrium = ctdm_equilibrium(&params)?;
//!
//! // the full-slot probability is exactly the Erlang-B loss
//! let blocking = erlang_b_blocking(params.m, params.lambda / params.mu);
//! assert!((equilibrium.top_state_mass() - blocking).abs() < 1e-12);
//! assert!((equilibrium.mean_degree() - 28.5).abs() < 0.1);
//! # Ok::<(), overlay_core::queue::QueueError>(())
//! ```

pub mod analytics;
pub mod churn;
pub mod classifier;
pub mod ingest;
pub mod linalg;
pub mod queue;
pub mod simulator;
pub mod tracegen;
pub mod types;
