//! Parse, validate, and persist crawl traces.
//!
//! The canonical on-disk format is JSON Lines, one crawl response per
//! line with fields `peer`, `t`, `mode`, `sw`, `leaves`, `ultras`. A CSV
//! alternative flattens the neighbor sets into `;`-joined strings.
//! Files ending in `.gz` are transparently (de)compressed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{CrawlRecord, PeerId, PeerMode, PeerTrace, RawRecord, TypeError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("unsupported format {0:?} (expected jsonl or csv)")]
    UnknownFormat(String),
}

/// Input/output encodings understood by the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Jsonl,
    Csv,
}

impl std::str::FromStr for FileFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, IngestError> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(FileFormat::Jsonl),
            "csv" => Ok(FileFormat::Csv),
            other => Err(IngestError::UnknownFormat(other.to_owned())),
        }
    }
}

impl FileFormat {
    /// Guess from the file name, ignoring a trailing `.gz`.
    pub fn from_path(path: &Path) -> Option<FileFormat> {
        let name = path.file_name()?.to_str()?;
        let stem = name.strip_suffix(".gz").unwrap_or(name);
        if stem.ends_with(".jsonl") || stem.ends_with(".json") {
            Some(FileFormat::Jsonl)
        } else if stem.ends_with(".csv") {
            Some(FileFormat::Csv)
        } else {
            None
        }
    }
}

/// Why one input line was rejected. Never fatal: parsing reports every
/// bad line and keeps going.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostic {
    pub line: usize,
    pub reason: String,
}

/// Validated crawl records grouped into per-peer traces.
#[derive(Debug, Clone, Default)]
pub struct TraceStore {
    traces: BTreeMap<PeerId, Vec<CrawlRecord>>,
}

impl TraceStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert one validated record, keeping per-peer time order.
    /// Duplicate (peer, t) pairs are rejected.
    pub fn insert(&mut self, record: CrawlRecord) -> Result<(), TypeError> {
        let records = self.traces.entry(record.peer_id().clone()).or_default();
        let t = record.t();
        match records.binary_search_by_key(&t, |r| r.t()) {
            Ok(_) => Err(TypeError::UnorderedTrace { prev: t, next: t }),
            Err(pos) => {
                records.insert(pos, record);
                Ok(())
            }
        }
    }

    pub fn peer_count(&self) -> usize {
        self.traces.len()
    }

    pub fn record_count(&self) -> usize {
        self.traces.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &CrawlRecord> {
        self.traces.values().flatten()
    }

    pub fn get(&self, peer: &PeerId) -> Option<PeerTrace> {
        self.traces
            .get(peer)
            .map(|records| PeerTrace::new(records.clone()).expect("store keeps traces valid"))
    }

    /// Materialize all traces, in peer-id order.
    pub fn traces(&self) -> Vec<PeerTrace> {
        self.traces
            .values()
            .map(|records| PeerTrace::new(records.clone()).expect("store keeps traces valid"))
            .collect()
    }

    /// Earliest and latest timestamp over all records.
    pub fn time_range(&self) -> Option<(i64, i64)> {
        let mut range: Option<(i64, i64)> = None;
        for records in self.traces.values() {
            let (first, last) = match (records.first(), records.last()) {
                (Some(f), Some(l)) => (f.t(), l.t()),
                _ => continue,
            };
            range = Some(match range {
                None => (first, last),
                Some((lo, hi)) => (lo.min(first), hi.max(last)),
            });
        }
        range
    }

    /// Distinct software tags with record counts.
    pub fn software_index(&self) -> BTreeMap<String, usize> {
        let mut index = BTreeMap::new();
        for record in self.records() {
            *index.entry(record.software().to_owned()).or_insert(0) += 1;
        }
        index
    }

    /// Sub-store of records matching `software`/`mode`, then of peers
    /// with at least `min_records` surviving records. The original
    /// store is untouched.
    pub fn filter(&self, filter: &Filter) -> TraceStore {
        let mut out = TraceStore::new();
        for records in self.traces.values() {
            let kept: Vec<CrawlRecord> = records
                .iter()
                .filter(|r| {
                    filter
                        .software
                        .as_ref()
                        .map_or(true, |sw| r.software() == sw)
                        && filter.mode.map_or(true, |m| r.mode() == m)
                })
                .cloned()
                .collect();
            if kept.len() >= filter.min_records.max(1) {
                for record in kept {
                    out.insert(record).expect("records were already valid");
                }
            }
        }
        out
    }
}

/// Record- and peer-level predicates for [`TraceStore::filter`].
#[derive(Debug, Clone, Default)]
pub struct Filter {
    pub software: Option<String>,
    pub mode: Option<PeerMode>,
    pub min_records: usize,
}

fn open_reader(path: &Path) -> Result<Box<dyn BufRead>, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    Ok(Box::new(BufReader::new(reader)))
}

fn open_writer(path: &Path) -> Result<Box<dyn Write>, IngestError> {
    let file = File::create(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let writer: Box<dyn Write> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzEncoder::new(file, flate2::Compression::default()))
    } else {
        Box::new(file)
    };
    Ok(Box::new(BufWriter::new(writer)))
}

/// Load a crawl file. Unreadable files are fatal; malformed lines are
/// returned as per-line diagnostics, never silently dropped.
pub fn parse_crawl_file(
    path: &Path,
    format: FileFormat,
) -> Result<(TraceStore, Vec<Diagnostic>), IngestError> {
    let reader = open_reader(path)?;
    match format {
        FileFormat::Jsonl => Ok(parse_jsonl(reader)),
        FileFormat::Csv => Ok(parse_csv(reader)),
    }
}

/// Parse JSONL from any reader; line numbers are 1-based.
pub fn parse_jsonl<R: BufRead>(reader: R) -> (TraceStore, Vec<Diagnostic>) {
    let mut store = TraceStore::new();
    let mut diagnostics = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                diagnostics.push(Diagnostic {
                    line: line_no,
                    reason: format!("read error: {e}"),
                });
                continue;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CrawlRecord>(&line) {
            Ok(record) => {
                if let Err(e) = store.insert(record) {
                    diagnostics.push(Diagnostic {
                        line: line_no,
                        reason: duplicate_or(e),
                    });
                }
            }
            Err(e) => diagnostics.push(Diagnostic {
                line: line_no,
                reason: e.to_string(),
            }),
        }
    }
    (store, diagnostics)
}

fn duplicate_or(e: TypeError) -> String {
    match e {
        TypeError::UnorderedTrace { prev, next } if prev == next => {
            format!("duplicate record at t={prev} for this peer")
        }
        other => other.to_string(),
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct CsvRow {
    peer: String,
    t: i64,
    mode: PeerMode,
    sw: String,
    leaves: String,
    ultras: String,
}

fn split_ids(joined: &str) -> Vec<String> {
    joined
        .split(';')
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Parse the CSV flattening (`leaves`/`ultras` as `;`-joined ids).
pub fn parse_csv<R: Read>(reader: R) -> (TraceStore, Vec<Diagnostic>) {
    let mut store = TraceStore::new();
    let mut diagnostics = Vec::new();
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    for (idx, row) in csv_reader.deserialize::<CsvRow>().enumerate() {
        let line_no = idx + 2; // header is line 1
        match row {
            Ok(row) => {
                let raw = RawRecord {
                    peer: row.peer,
                    t: row.t,
                    mode: row.mode,
                    sw: row.sw,
                    leaves: split_ids(&row.leaves),
                    ultras: split_ids(&row.ultras),
                };
                match CrawlRecord::try_from(raw) {
                    Ok(record) => {
                        if let Err(e) = store.insert(record) {
                            diagnostics.push(Diagnostic {
                                line: line_no,
                                reason: duplicate_or(e),
                            });
                        }
                    }
                    Err(e) => diagnostics.push(Diagnostic {
                        line: line_no,
                        reason: e.to_string(),
                    }),
                }
            }
            Err(e) => diagnostics.push(Diagnostic {
                line: line_no,
                reason: e.to_string(),
            }),
        }
    }
    (store, diagnostics)
}

/// Write every record in peer-id, then time order.
pub fn write_crawl_file(
    store: &TraceStore,
    path: &Path,
    format: FileFormat,
) -> Result<(), IngestError> {
    let mut writer = open_writer(path)?;
    let map_io = |source: io::Error| IngestError::Io {
        path: path.display().to_string(),
        source,
    };
    match format {
        FileFormat::Jsonl => {
            for record in store.records() {
                let json = serde_json::to_string(record).expect("records always serialize");
                writeln!(writer, "{json}").map_err(map_io)?;
            }
        }
        FileFormat::Csv => {
            let mut csv_writer = csv::Writer::from_writer(writer);
            for record in store.records() {
                let row = CsvRow {
                    peer: record.peer_id().to_string(),
                    t: record.t(),
                    mode: record.mode(),
                    sw: record.software().to_owned(),
                    leaves: join_ids(record.leaf_neighbors().iter()),
                    ultras: join_ids(record.ultra_neighbors().iter()),
                };
                csv_writer
                    .serialize(row)
                    .map_err(|e| io::Error::new(io::ErrorKind::Other, e))
                    .map_err(map_io)?;
            }
            csv_writer.flush().map_err(map_io)?;
            return Ok(());
        }
    }
    writer.flush().map_err(map_io)
}

fn join_ids<'a, I: Iterator<Item = &'a PeerId>>(ids: I) -> String {
    ids.map(PeerId::as_str).collect::<Vec<_>>().join(";")
}
