//! Shared plumbing for the CLI commands and the HTTP service: error
//! classification into exit codes, store/corpus helpers, backend
//! construction, and the scope-derivation fallback used when no
//! assessed scope has been persisted yet.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use chrono::Utc;
use outagekit::backends::{
    BackendDescriptor, BackendKind, ConcatBackend, ExtractiveMock, GenerationBackend, IrBackend,
    IrExample, RemoteCompletionBackend,
};
use outagekit::domain::{Corpus, Incident, LinkMethod, Outage, OutageState};
use outagekit::scope::{
    load_rules_file, load_model_file, train_similarity, ComponentGraph, LinkRule, ProvenanceTag,
    ScopeResult, SimilarityModel, FEATURE_COUNT, MODEL_VERSION,
};
use outagekit::store::{Store, StoreError};
use outagekit::summarize::{build_context, ContextMode, ContextText};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AppConfig, ConfigError};

/// Exit code 2 for configuration problems, 1 for data problems.
#[derive(Debug)]
pub enum AppError {
    Config(String),
    Data(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Data(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            AppError::Config(m) | AppError::Data(m) => m,
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Config(e.to_string())
    }
}

impl From<StoreError> for AppError {
    fn from(e: StoreError) -> Self {
        AppError::Data(e.to_string())
    }
}

pub fn data_err(e: impl std::fmt::Display) -> AppError {
    AppError::Data(e.to_string())
}

pub fn open_store(config: &AppConfig) -> Result<Store, AppError> {
    Ok(Store::open(&config.store_dir)?)
}

/// Reads a line-delimited corpus from a file or stdin (`-`).
pub fn read_corpus(path: &Path) -> Result<Corpus, AppError> {
    let mut store = Store::in_memory();
    if path == Path::new("-") {
        store.ingest(std::io::stdin().lock())?;
    } else {
        let file = std::fs::File::open(path)
            .map_err(|e| AppError::Data(format!("cannot open {}: {e}", path.display())))?;
        store.ingest(std::io::BufReader::new(file))?;
    }
    Ok(store.snapshot())
}

/// Writes a corpus in the canonical line-delimited order.
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<(), AppError> {
    let mut text = String::new();
    for record in outagekit::domain::corpus_to_records(corpus) {
        text.push_str(&record.to_line());
        text.push('\n');
    }
    write_text(&text, path)
}

pub fn write_text(text: &str, path: &Path) -> Result<(), AppError> {
    if path == Path::new("-") {
        std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(data_err)
    } else {
        std::fs::write(path, text)
            .map_err(|e| AppError::Data(format!("cannot write {}: {e}", path.display())))
    }
}

pub fn load_rules(config: &AppConfig) -> Result<Vec<LinkRule>, AppError> {
    match &config.rule_file {
        Some(path) => load_rules_file(path).map_err(|e| AppError::Config(e.to_string())),
        None => Ok(Vec::new()),
    }
}

/// A model that never links: similarity is capped at 1.0 and linking
/// requires strictly exceeding the threshold.
pub fn disabled_model() -> SimilarityModel {
    SimilarityModel {
        vocabulary: Default::default(),
        weights: [1.0 / FEATURE_COUNT as f64; FEATURE_COUNT],
        threshold: 1.0,
        version: MODEL_VERSION,
    }
}

/// Loads the configured model; a configured-but-missing file is a
/// config error, no configured file means the model linker is off.
pub fn load_model(config: &AppConfig) -> Result<SimilarityModel, AppError> {
    match &config.model_file {
        Some(_) => {
            let path = config.require_model_file()?;
            load_model_file(path).map_err(|e| AppError::Data(e.to_string()))
        }
        None => Ok(disabled_model()),
    }
}

pub fn build_graph(store: &Store) -> Result<ComponentGraph, AppError> {
    let corpus = store.snapshot();
    let links: Vec<_> = corpus.links.clone();
    outagekit::scope::build_component_graph(&links, &corpus).map_err(data_err)
}

/// Labels training pairs from the store's historical links: every link
/// is a positive, negatives are sampled uniformly from unlinked pairs.
pub fn pairs_from_links(
    store: &Store,
    negative_ratio: usize,
    seed: u64,
) -> Result<Vec<(Incident, Incident, bool)>, AppError> {
    let linked: BTreeSet<(String, String)> = store
        .links()
        .map(|l| (l.a.clone(), l.b.clone()))
        .collect();
    let incidents: Vec<&Incident> = store.incidents().collect();
    let mut pairs = Vec::new();
    for link in store.links() {
        let (Some(a), Some(b)) = (store.incident(&link.a), store.incident(&link.b)) else {
            return Err(AppError::Data(format!(
                "link references missing incident: {} -- {}",
                link.a, link.b
            )));
        };
        pairs.push((a.clone(), b.clone(), true));
    }
    if pairs.is_empty() {
        return Err(AppError::Data(
            "no historical links in store; cannot train a model".into(),
        ));
    }
    let wanted = pairs.len() * negative_ratio;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut negatives = 0usize;
    let mut attempts = 0usize;
    while negatives < wanted && attempts < wanted * 50 {
        attempts += 1;
        let a = incidents.choose(&mut rng).unwrap();
        let b = incidents.choose(&mut rng).unwrap();
        if a.id == b.id {
            continue;
        }
        let key = if a.id <= b.id {
            (a.id.clone(), b.id.clone())
        } else {
            (b.id.clone(), a.id.clone())
        };
        if linked.contains(&key) {
            continue;
        }
        pairs.push(((*a).clone(), (*b).clone(), false));
        negatives += 1;
    }
    Ok(pairs)
}

pub fn train_model_from_store(
    store: &Store,
    negative_ratio: usize,
    seed: u64,
) -> Result<SimilarityModel, AppError> {
    let pairs = pairs_from_links(store, negative_ratio, seed)?;
    train_similarity(&pairs, negative_ratio as f64).map_err(data_err)
}

/// Relevant incidents implied by seeds plus directly linked neighbors;
/// the fallback when no assessed ScopeResult has been persisted.
pub fn derived_scope(corpus: &Corpus, outage: &Outage) -> ScopeResult {
    let mut provenance: std::collections::BTreeMap<String, BTreeSet<ProvenanceTag>> =
        Default::default();
    for id in &outage.seed_incident_ids {
        provenance
            .entry(id.clone())
            .or_default()
            .insert(ProvenanceTag::Seed);
    }
    let seed_ids: BTreeSet<&str> = outage.seed_incident_ids.iter().map(String::as_str).collect();
    for link in &corpus.links {
        let tag = match link.method {
            LinkMethod::Rule => ProvenanceTag::Rule,
            LinkMethod::History => ProvenanceTag::History,
            LinkMethod::Model => ProvenanceTag::Model,
        };
        if seed_ids.contains(link.a.as_str()) && !seed_ids.contains(link.b.as_str()) {
            provenance.entry(link.b.clone()).or_default().insert(tag);
        } else if seed_ids.contains(link.b.as_str()) && !seed_ids.contains(link.a.as_str()) {
            provenance.entry(link.a.clone()).or_default().insert(tag);
        }
    }
    provenance.retain(|id, _| corpus.incidents.contains_key(id));
    let mut incidents: Vec<&Incident> = provenance
        .keys()
        .map(|id| &corpus.incidents[id])
        .collect();
    incidents.sort_by(|x, y| {
        (x.severity, x.created_at, &x.id).cmp(&(y.severity, y.created_at, &y.id))
    });
    ScopeResult {
        outage_id: outage.id.clone(),
        incidents: incidents.into_iter().map(|i| i.id.clone()).collect(),
        provenance,
        assessed_at: Utc::now(),
    }
}

/// Persisted scope when present, derived fallback otherwise.
pub fn scope_for<'a>(store: &'a Store, corpus: &Corpus, outage: &Outage) -> ScopeResult {
    match store.scope(&outage.id) {
        Some(scope) => scope.clone(),
        None => derived_scope(corpus, outage),
    }
}

/// The incidents of a scope resolved against a corpus, in scope order.
pub fn scope_incidents(corpus: &Corpus, scope: &ScopeResult) -> Vec<Incident> {
    scope
        .incidents
        .iter()
        .filter_map(|id| corpus.incidents.get(id).cloned())
        .collect()
}

pub fn context_for_outage(
    corpus: &Corpus,
    scope: &ScopeResult,
    outage: &Outage,
    mode: ContextMode,
    max_chars: usize,
) -> Result<ContextText, AppError> {
    let incidents = scope_incidents(corpus, scope);
    let title = (mode == ContextMode::SummaryGivenTitle).then(|| outage.title.as_str());
    build_context(&incidents, mode, title, max_chars).map_err(data_err)
}

/// Retrieval-baseline training examples: one per summarized outage.
pub fn ir_examples(
    store: &Store,
    corpus: &Corpus,
    mode: ContextMode,
    max_chars: usize,
) -> Vec<IrExample> {
    let mut examples = Vec::new();
    for outage in corpus.outages.values() {
        let completion = match mode {
            ContextMode::Title => outage.title.clone(),
            _ => outage.summary.clone(),
        };
        if completion.is_empty() || outage.state == OutageState::Active {
            continue;
        }
        let scope = scope_for(store, corpus, outage);
        if let Ok(context) = context_for_outage(corpus, &scope, outage, mode, max_chars) {
            examples.push(IrExample {
                context: context.text,
                completion,
                declared_at: outage.declared_at,
                outage_id: outage.id.clone(),
            });
        }
    }
    examples
}

/// Instantiates the configured backend. The retrieval baseline needs a
/// training set, supplied by the caller from whichever corpus applies.
pub fn make_backend(
    descriptor: &BackendDescriptor,
    ir_train: Vec<IrExample>,
) -> Result<Box<dyn GenerationBackend>, AppError> {
    descriptor
        .validate()
        .map_err(|e| AppError::Config(e.to_string()))?;
    Ok(match descriptor.kind {
        BackendKind::ExtractiveMock => Box::new(ExtractiveMock),
        BackendKind::ConcatBaseline => Box::new(ConcatBackend),
        BackendKind::IrBaseline => Box::new(IrBackend { train: ir_train }),
        BackendKind::RemoteCompletion => Box::new(
            RemoteCompletionBackend::from_descriptor(descriptor)
                .map_err(|e| AppError::Config(e.to_string()))?,
        ),
    })
}

pub fn parse_mode(mode: &str, use_title: bool) -> Result<ContextMode, AppError> {
    match (mode, use_title) {
        ("summary", false) => Ok(ContextMode::Summary),
        ("summary", true) | ("summary_given_title", _) | ("summary-given-title", _) => {
            Ok(ContextMode::SummaryGivenTitle)
        }
        ("title", _) => Ok(ContextMode::Title),
        _ => Err(AppError::Data(format!(
            "unknown mode {mode:?} (expected summary, title, or summary-given-title)"
        ))),
    }
}

/// Ingests a reader into the store and flushes. Shared by the CLI
/// `ingest` command and the service's batch endpoint.
pub fn ingest_into(store: &mut Store, reader: impl BufRead) -> Result<outagekit::store::IngestCounts, AppError> {
    let counts = store.ingest(reader)?;
    store.flush()?;
    Ok(counts)
}
