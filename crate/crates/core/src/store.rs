//! Embedded, file-backed persistence with streaming ingestion,
//! time-window queries, and the chronological experiment split.
//!
//! Layout is one line-delimited file per record kind under the store
//! directory. Writes go through a temp file and rename, so readers
//! never observe a partially written record.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Corpus, Incident, IncidentLink, LinkMethod, Outage, Record, TimeWindow};
use crate::scope::ScopeResult;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {source}")]
    Schema {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("cannot split an empty corpus")]
    EmptyCorpus,
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
}

/// Per-kind tallies for one ingestion pass. `accepted` counts records
/// as seen on the stream; duplicates overwrite previously stored ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestCounts {
    pub incidents: usize,
    pub outages: usize,
    pub links: usize,
    pub malformed: usize,
    /// Line numbers (1-based) of skipped malformed records.
    pub malformed_lines: Vec<usize>,
}

impl IngestCounts {
    pub fn total_accepted(&self) -> usize {
        self.incidents + self.outages + self.links
    }
}

type LinkKey = (String, String, LinkMethod);

/// Single-writer, multi-reader embedded store.
#[derive(Debug, Default)]
pub struct Store {
    dir: Option<PathBuf>,
    incidents: BTreeMap<String, Incident>,
    outages: BTreeMap<String, Outage>,
    links: BTreeMap<LinkKey, IncidentLink>,
    scopes: BTreeMap<String, ScopeResult>,
}

const INCIDENTS_FILE: &str = "incidents.jsonl";
const OUTAGES_FILE: &str = "outages.jsonl";
const LINKS_FILE: &str = "links.jsonl";
const SCOPES_FILE: &str = "scopes.jsonl";

impl Store {
    /// In-memory store with no backing directory.
    pub fn in_memory() -> Self {
        Store::default()
    }

    /// Opens (creating if needed) a store rooted at `dir` and loads any
    /// existing records.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|source| StoreError::Io {
            path: dir.clone(),
            source,
        })?;
        let mut store = Store {
            dir: Some(dir.clone()),
            ..Store::default()
        };
        for file in [INCIDENTS_FILE, OUTAGES_FILE, LINKS_FILE] {
            let path = dir.join(file);
            if path.exists() {
                let text = fs::read_to_string(&path).map_err(|source| StoreError::Io {
                    path: path.clone(),
                    source,
                })?;
                for (idx, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let record = Record::parse_line(line)
                        .map_err(|source| StoreError::Schema { line: idx + 1, source })?;
                    store.put_record(record);
                }
            }
        }
        let scope_path = dir.join(SCOPES_FILE);
        if scope_path.exists() {
            let text = fs::read_to_string(&scope_path).map_err(|source| StoreError::Io {
                path: scope_path.clone(),
                source,
            })?;
            for (idx, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let scope: ScopeResult = serde_json::from_str(line)
                    .map_err(|source| StoreError::Schema { line: idx + 1, source })?;
                store.scopes.insert(scope.outage_id.clone(), scope);
            }
        }
        Ok(store)
    }

    fn put_record(&mut self, record: Record) {
        match record {
            Record::Incident(inc) => {
                self.incidents.insert(inc.id.clone(), inc);
            }
            Record::Outage(outage) => {
                self.outages.insert(outage.id.clone(), outage);
            }
            Record::Link(link) => {
                let key = (link.a.clone(), link.b.clone(), link.method);
                self.links.insert(key, link);
            }
        }
    }

    /// Streaming ingestion of the line-delimited interchange format.
    /// Malformed lines are skipped and counted; well-formed records are
    /// upserted by id (links by endpoint pair and method).
    pub fn ingest(&mut self, reader: impl BufRead) -> Result<IngestCounts, StoreError> {
        let mut counts = IngestCounts::default();
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|source| StoreError::Io {
                path: self.dir.clone().unwrap_or_default(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            match Record::parse_line(&line) {
                Ok(record) => {
                    match &record {
                        Record::Incident(_) => counts.incidents += 1,
                        Record::Outage(_) => counts.outages += 1,
                        Record::Link(_) => counts.links += 1,
                    }
                    self.put_record(record);
                }
                Err(_) => {
                    counts.malformed += 1;
                    counts.malformed_lines.push(idx + 1);
                }
            }
        }
        self.flush()?;
        Ok(counts)
    }

    pub fn ingest_records(&mut self, records: impl IntoIterator<Item = Record>) -> IngestCounts {
        let mut counts = IngestCounts::default();
        for record in records {
            match &record {
                Record::Incident(_) => counts.incidents += 1,
                Record::Outage(_) => counts.outages += 1,
                Record::Link(_) => counts.links += 1,
            }
            self.put_record(record);
        }
        counts
    }

    pub fn ingest_corpus(&mut self, corpus: &Corpus) -> IngestCounts {
        self.ingest_records(crate::domain::corpus_to_records(corpus))
    }

    fn write_atomic(&self, file: &str, contents: &str) -> Result<(), StoreError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let path = dir.join(file);
        let tmp = dir.join(format!("{file}.tmp"));
        let mut f = fs::File::create(&tmp).map_err(|source| StoreError::Io {
            path: tmp.clone(),
            source,
        })?;
        f.write_all(contents.as_bytes())
            .and_then(|_| f.sync_all())
            .map_err(|source| StoreError::Io {
                path: tmp.clone(),
                source,
            })?;
        fs::rename(&tmp, &path).map_err(|source| StoreError::Io { path, source })
    }

    /// Persists all state to the backing directory (no-op when in-memory).
    pub fn flush(&self) -> Result<(), StoreError> {
        let mut incidents = String::new();
        for inc in self.incidents.values() {
            incidents.push_str(&Record::Incident(inc.clone()).to_line());
            incidents.push('\n');
        }
        self.write_atomic(INCIDENTS_FILE, &incidents)?;
        let mut outages = String::new();
        for o in self.outages.values() {
            outages.push_str(&Record::Outage(o.clone()).to_line());
            outages.push('\n');
        }
        self.write_atomic(OUTAGES_FILE, &outages)?;
        let mut links = String::new();
        for l in self.links.values() {
            links.push_str(&Record::Link(l.clone()).to_line());
            links.push('\n');
        }
        self.write_atomic(LINKS_FILE, &links)?;
        let mut scopes = String::new();
        for s in self.scopes.values() {
            scopes.push_str(&serde_json::to_string(s).expect("scope serializes"));
            scopes.push('\n');
        }
        self.write_atomic(SCOPES_FILE, &scopes)
    }

    /// Canonical byte dump of the full store contents, independent of
    /// ingestion order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for inc in self.incidents.values() {
            out.push_str(&Record::Incident(inc.clone()).to_line());
            out.push('\n');
        }
        for o in self.outages.values() {
            out.push_str(&Record::Outage(o.clone()).to_line());
            out.push('\n');
        }
        for l in self.links.values() {
            out.push_str(&Record::Link(l.clone()).to_line());
            out.push('\n');
        }
        out
    }

    pub fn incident(&self, id: &str) -> Option<&Incident> {
        self.incidents.get(id)
    }

    pub fn outage(&self, id: &str) -> Option<&Outage> {
        self.outages.get(id)
    }

    pub fn incidents(&self) -> impl Iterator<Item = &Incident> {
        self.incidents.values()
    }

    pub fn outages(&self) -> impl Iterator<Item = &Outage> {
        self.outages.values()
    }

    pub fn links(&self) -> impl Iterator<Item = &IncidentLink> {
        self.links.values()
    }

    pub fn incident_count(&self) -> usize {
        self.incidents.len()
    }

    pub fn outage_count(&self) -> usize {
        self.outages.len()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn put_scope(&mut self, scope: ScopeResult) {
        self.scopes.insert(scope.outage_id.clone(), scope);
    }

    pub fn scope(&self, outage_id: &str) -> Option<&ScopeResult> {
        self.scopes.get(outage_id)
    }

    pub fn scopes(&self) -> impl Iterator<Item = &ScopeResult> {
        self.scopes.values()
    }

    /// Incidents with `created_at` inside the closed window, sorted by
    /// (created_at, id) ascending.
    pub fn query_window(&self, window: TimeWindow) -> Vec<Incident> {
        let mut hits: Vec<Incident> = self
            .incidents
            .values()
            .filter(|inc| window.contains(inc.created_at))
            .cloned()
            .collect();
        hits.sort_by(|x, y| (x.created_at, &x.id).cmp(&(y.created_at, &y.id)));
        hits
    }

    /// Materializes the full store contents as a corpus value.
    pub fn snapshot(&self) -> Corpus {
        Corpus {
            incidents: self.incidents.clone(),
            outages: self.outages.clone(),
            links: self.links.values().cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderKey {
    DeclaredAt,
}

/// Train/validation/test split ratios over chronologically ordered
/// outages. Default is 0.7/0.1/0.2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub order_key: OrderKey,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: [0.7, 0.1, 0.2],
            order_key: OrderKey::DeclaredAt,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), StoreError> {
        let sum: f64 = self.ratios.iter().sum();
        if self.ratios.iter().any(|r| *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(StoreError::InvalidRatios(self.ratios));
        }
        Ok(())
    }
}

/// The incidents an outage carries into its split: its seeds plus every
/// incident directly linked to a seed.
fn relevant_incident_ids(corpus: &Corpus, outage: &Outage) -> BTreeSet<String> {
    let mut ids: BTreeSet<String> = outage.seed_incident_ids.iter().cloned().collect();
    for link in &corpus.links {
        if ids.contains(&link.a) {
            ids.insert(link.b.clone());
        } else if ids.contains(&link.b) {
            ids.insert(link.a.clone());
        }
    }
    ids.retain(|id| corpus.incidents.contains_key(id));
    ids
}

fn sub_corpus(corpus: &Corpus, outages: &[&Outage]) -> Corpus {
    let mut split = Corpus::default();
    let mut keep: BTreeSet<String> = BTreeSet::new();
    for outage in outages {
        split.insert_outage((*outage).clone());
        keep.extend(relevant_incident_ids(corpus, outage));
    }
    for id in &keep {
        if let Some(inc) = corpus.incidents.get(id) {
            split.insert_incident(inc.clone());
        }
    }
    split.links = corpus
        .links
        .iter()
        .filter(|l| keep.contains(&l.a) && keep.contains(&l.b))
        .cloned()
        .collect();
    split
}

/// Splits outages chronologically by (declared_at, id): the first
/// `⌊r0·n⌋` go to train, the next `⌊r1·n⌋` to validation, and the
/// remainder to test. Each outage carries its relevant incidents and
/// links into its split.
pub fn chronological_split(
    corpus: &Corpus,
    spec: &SplitSpec,
) -> Result<(Corpus, Corpus, Corpus), StoreError> {
    spec.validate()?;
    let n = corpus.outages.len();
    if n == 0 {
        return Err(StoreError::EmptyCorpus);
    }
    let mut ordered: Vec<&Outage> = corpus.outages.values().collect();
    ordered.sort_by(|x, y| (x.declared_at, &x.id).cmp(&(y.declared_at, &y.id)));
    let n_train = (spec.ratios[0] * n as f64).floor() as usize;
    let n_val = (spec.ratios[1] * n as f64).floor() as usize;
    let train = sub_corpus(corpus, &ordered[..n_train]);
    let val = sub_corpus(corpus, &ordered[n_train..n_train + n_val]);
    let test = sub_corpus(corpus, &ordered[n_train + n_val..]);
    Ok((train, val, test))
}
