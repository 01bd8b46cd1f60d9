//! Core data model shared by every other module: incidents, outages,
//! incident links, and corpus-level validation.
//!
//! All types are immutable values and safe to share across threads.
//! Canonical serialization is line-delimited JSON with ISO-8601
//! timestamps, one record per line, tagged by `kind`.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Severity runs 0..=4; 0 is highest priority.
pub const MAX_SEVERITY: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncidentSource {
    Monitor,
    Manual,
}

/// One monitored service interruption record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incident {
    pub id: String,
    pub title: String,
    pub description: String,
    pub severity: u8,
    pub service: String,
    pub component: String,
    pub created_at: DateTime<Utc>,
    pub source: IncidentSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutageState {
    Active,
    Mitigated,
    Resolved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpactPersistence {
    Persistent,
    Intermittent,
}

/// A declared multi-incident event. `impact_start` is T1 and
/// `summary_completed_at` is T2 in time-to-summary computations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outage {
    pub id: String,
    pub title: String,
    /// Engineer-written reference summary; may be empty before one exists.
    pub summary: String,
    pub impact_start: Option<DateTime<Utc>>,
    pub declared_at: DateTime<Utc>,
    pub engaged_at: Option<DateTime<Utc>>,
    pub summary_completed_at: Option<DateTime<Utc>>,
    pub state: OutageState,
    pub large_customer_impact: bool,
    pub impact_persistence: ImpactPersistence,
    pub seed_incident_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkMethod {
    Rule,
    History,
    Model,
}

impl fmt::Display for LinkMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinkMethod::Rule => write!(f, "rule"),
            LinkMethod::History => write!(f, "history"),
            LinkMethod::Model => write!(f, "model"),
        }
    }
}

/// An undirected, provenance-tagged edge between two incidents.
/// Endpoints are stored in canonical (lexicographic) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentLink {
    pub a: String,
    pub b: String,
    pub method: LinkMethod,
    pub confidence: f64,
    pub created_at: DateTime<Utc>,
}

impl IncidentLink {
    /// Builds a link with endpoints canonicalized so that
    /// `new(a, b, ..)` and `new(b, a, ..)` store identical records.
    pub fn new(
        a: impl Into<String>,
        b: impl Into<String>,
        method: LinkMethod,
        confidence: f64,
        created_at: DateTime<Utc>,
    ) -> Self {
        let (mut a, mut b) = (a.into(), b.into());
        if b < a {
            std::mem::swap(&mut a, &mut b);
        }
        IncidentLink {
            a,
            b,
            method,
            confidence,
            created_at,
        }
    }

    pub fn pair(&self) -> (&str, &str) {
        (&self.a, &self.b)
    }
}

/// Closed time interval used by window queries and link rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl TimeWindow {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Result<Self, DomainError> {
        if start > end {
            return Err(DomainError::InvalidWindow { start, end });
        }
        Ok(TimeWindow { start, end })
    }

    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        self.start <= t && t <= self.end
    }
}

/// Id-indexed collections of incidents and outages plus their links.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub incidents: BTreeMap<String, Incident>,
    pub outages: BTreeMap<String, Outage>,
    pub links: Vec<IncidentLink>,
}

impl Corpus {
    pub fn insert_incident(&mut self, incident: Incident) {
        self.incidents.insert(incident.id.clone(), incident);
    }

    pub fn insert_outage(&mut self, outage: Outage) {
        self.outages.insert(outage.id.clone(), outage);
    }

    pub fn is_empty(&self) -> bool {
        self.incidents.is_empty() && self.outages.is_empty() && self.links.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("outage {outage_id}: missing timestamp {which}")]
    MissingTimestamp {
        outage_id: String,
        which: &'static str,
    },
    #[error("outage {outage_id}: summary completed before impact start")]
    NegativeDuration { outage_id: String },
    #[error("invalid time window: start {start} after end {end}")]
    InvalidWindow {
        start: DateTime<Utc>,
        end: DateTime<Utc>,
    },
    #[error("duration unit must be positive")]
    NonPositiveUnit,
}

/// Time to summary: (T2 - T1) expressed in multiples of `unit`.
pub fn compute_tts(outage: &Outage, unit: Duration) -> Result<f64, DomainError> {
    if unit <= Duration::zero() {
        return Err(DomainError::NonPositiveUnit);
    }
    let t1 = outage
        .impact_start
        .ok_or_else(|| DomainError::MissingTimestamp {
            outage_id: outage.id.clone(),
            which: "impact_start",
        })?;
    let t2 = outage
        .summary_completed_at
        .ok_or_else(|| DomainError::MissingTimestamp {
            outage_id: outage.id.clone(),
            which: "summary_completed_at",
        })?;
    if t2 < t1 {
        return Err(DomainError::NegativeDuration {
            outage_id: outage.id.clone(),
        });
    }
    Ok((t2 - t1).num_seconds() as f64 / unit.num_seconds() as f64)
}

/// One failed invariant, reported as data rather than an error.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub record_id: String,
    pub message: String,
}

impl Violation {
    fn new(record_id: impl Into<String>, message: impl Into<String>) -> Self {
        Violation {
            record_id: record_id.into(),
            message: message.into(),
        }
    }
}

/// Checks every type invariant plus referential integrity. Returns an
/// empty list iff the corpus is fully consistent.
pub fn validate_corpus(corpus: &Corpus) -> Vec<Violation> {
    let mut out = Vec::new();
    for (id, inc) in &corpus.incidents {
        if inc.id.is_empty() || inc.id != *id {
            out.push(Violation::new(id.clone(), "incident id empty or mismatched"));
        }
        if inc.title.is_empty() {
            out.push(Violation::new(id.clone(), "incident title is empty"));
        }
        if inc.severity > MAX_SEVERITY {
            out.push(Violation::new(
                id.clone(),
                format!("severity {} outside 0..=4", inc.severity),
            ));
        }
    }
    for (id, outage) in &corpus.outages {
        if outage.id.is_empty() || outage.id != *id {
            out.push(Violation::new(id.clone(), "outage id empty or mismatched"));
        }
        if outage.seed_incident_ids.is_empty() {
            out.push(Violation::new(id.clone(), "outage has no seed incidents"));
        }
        if let Some(t1) = outage.impact_start {
            if t1 > outage.declared_at {
                out.push(Violation::new(id.clone(), "impact_start after declared_at"));
            }
            if let Some(t2) = outage.summary_completed_at {
                if t2 < t1 {
                    out.push(Violation::new(
                        id.clone(),
                        "summary_completed_at before impact_start",
                    ));
                }
            }
        }
        if let (Some(engaged), declared) = (outage.engaged_at, outage.declared_at) {
            if declared > engaged {
                out.push(Violation::new(id.clone(), "declared_at after engaged_at"));
            }
        }
        for seed in &outage.seed_incident_ids {
            if !corpus.incidents.contains_key(seed) {
                out.push(Violation::new(
                    id.clone(),
                    format!("seed incident {seed} not in corpus"),
                ));
            }
        }
    }
    for link in &corpus.links {
        let link_id = format!("{}--{}", link.a, link.b);
        if link.a == link.b {
            out.push(Violation::new(link_id.clone(), "link endpoints identical"));
        }
        if link.a > link.b {
            out.push(Violation::new(
                link_id.clone(),
                "link endpoints not in canonical order",
            ));
        }
        if !(0.0..=1.0).contains(&link.confidence) {
            out.push(Violation::new(link_id.clone(), "confidence outside [0,1]"));
        }
        if link.method == LinkMethod::Rule && link.confidence != 1.0 {
            out.push(Violation::new(
                link_id.clone(),
                "rule link confidence must be 1.0",
            ));
        }
        for end in [&link.a, &link.b] {
            if !corpus.incidents.contains_key(end) {
                out.push(Violation::new(
                    link_id.clone(),
                    format!("link endpoint {end} not in corpus"),
                ));
            }
        }
    }
    out
}

/// One line of the canonical line-delimited interchange format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Incident(Incident),
    Outage(Outage),
    Link(IncidentLink),
}

impl Record {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serialization cannot fail")
    }

    pub fn parse_line(line: &str) -> Result<Record, serde_json::Error> {
        serde_json::from_str(line)
    }
}

/// Flattens a corpus into interchange records: incidents, outages, then
/// links, each in deterministic order.
pub fn corpus_to_records(corpus: &Corpus) -> Vec<Record> {
    let mut records: Vec<Record> = Vec::new();
    records.extend(corpus.incidents.values().cloned().map(Record::Incident));
    records.extend(corpus.outages.values().cloned().map(Record::Outage));
    let mut links = corpus.links.clone();
    links.sort_by(|x, y| (&x.a, &x.b, x.method).cmp(&(&y.a, &y.b, y.method)));
    records.extend(links.into_iter().map(Record::Link));
    records
}
