//! Impact scope assessment: rule linking, historical lookup over a
//! component graph, similarity-model linking, and their union per
//! outage.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Corpus, Incident, IncidentLink, LinkMethod, Outage, TimeWindow};
use crate::eval::tokenize;
use crate::store::Store;

#[derive(Debug, Error)]
pub enum ScopeError {
    #[error("rule {rule} references unknown incident field {field}")]
    UnknownField { rule: String, field: String },
    #[error("rule {0} is invalid: {1}")]
    InvalidRule(String, String),
    #[error("link endpoint {0} not found in corpus")]
    DanglingLink(String),
    #[error("similarity training needs both positive and negative labels")]
    DegenerateTraining,
    #[error("outage {outage_id}: seed incident {incident_id} not in store")]
    MissingSeed {
        outage_id: String,
        incident_id: String,
    },
    #[error("model file malformed: {0}")]
    ModelFormat(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Domain(#[from] crate::domain::DomainError),
    #[error("rule file malformed: {0}")]
    RuleFile(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RulePredicate {
    Equal,
    SharedToken,
    SameComponentAndService,
}

/// One declarative linking trigger: incidents within `window` of each
/// other whose named fields satisfy the predicate get linked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkRule {
    pub id: String,
    #[serde(alias = "fields")]
    pub match_fields: Vec<String>,
    pub predicate: RulePredicate,
    pub window_secs: i64,
}

impl LinkRule {
    pub fn window(&self) -> Duration {
        Duration::seconds(self.window_secs)
    }
}

const INCIDENT_FIELDS: &[&str] = [
    "id",
    "title",
    "description",
    "severity",
    "service",
    "component",
    "source",
]
.as_slice();

fn field_value(incident: &Incident, field: &str) -> String {
    match field {
        "id" => incident.id.clone(),
        "title" => incident.title.clone(),
        "description" => incident.description.clone(),
        "severity" => incident.severity.to_string(),
        "service" => incident.service.clone(),
        "component" => incident.component.clone(),
        "source" => format!("{:?}", incident.source).to_lowercase(),
        _ => unreachable!("field validated before use"),
    }
}

fn validate_rule(rule: &LinkRule) -> Result<(), ScopeError> {
    if rule.match_fields.is_empty() {
        return Err(ScopeError::InvalidRule(
            rule.id.clone(),
            "match_fields must be non-empty".into(),
        ));
    }
    if rule.window_secs <= 0 {
        return Err(ScopeError::InvalidRule(
            rule.id.clone(),
            "window must be positive".into(),
        ));
    }
    for field in &rule.match_fields {
        if !INCIDENT_FIELDS.contains(&field.as_str()) {
            return Err(ScopeError::UnknownField {
                rule: rule.id.clone(),
                field: field.clone(),
            });
        }
    }
    Ok(())
}

fn rule_matches(rule: &LinkRule, a: &Incident, b: &Incident) -> bool {
    let dt = (a.created_at - b.created_at).abs();
    if dt > rule.window() {
        return false;
    }
    match rule.predicate {
        RulePredicate::Equal => rule
            .match_fields
            .iter()
            .all(|f| field_value(a, f) == field_value(b, f)),
        RulePredicate::SharedToken => {
            let toks = |inc: &Incident| -> BTreeSet<String> {
                rule.match_fields
                    .iter()
                    .flat_map(|f| tokenize(&field_value(inc, f)))
                    .collect()
            };
            toks(a).intersection(&toks(b)).next().is_some()
        }
        RulePredicate::SameComponentAndService => {
            a.component == b.component && a.service == b.service
        }
    }
}

/// Applies every rule to every incident pair within the rule window.
/// Output is deduplicated by endpoint pair; rule links always carry
/// confidence 1.0.
pub fn apply_rules(
    rules: &[LinkRule],
    incidents: &[Incident],
) -> Result<Vec<IncidentLink>, ScopeError> {
    for rule in rules {
        validate_rule(rule)?;
    }
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    let mut links = Vec::new();
    for (i, a) in incidents.iter().enumerate() {
        for b in &incidents[i + 1..] {
            if a.id == b.id {
                continue;
            }
            if rules.iter().any(|rule| rule_matches(rule, a, b)) {
                let link = IncidentLink::new(
                    a.id.clone(),
                    b.id.clone(),
                    LinkMethod::Rule,
                    1.0,
                    a.created_at.max(b.created_at),
                );
                if seen.insert((link.a.clone(), link.b.clone())) {
                    links.push(link);
                }
            }
        }
    }
    Ok(links)
}

/// Loads a declarative rule set from TOML text with a `[[rules]]` table
/// per rule.
pub fn load_rules(text: &str) -> Result<Vec<LinkRule>, ScopeError> {
    #[derive(Deserialize)]
    struct RuleFile {
        rules: Vec<LinkRule>,
    }
    let parsed: RuleFile = toml::from_str(text)?;
    for rule in &parsed.rules {
        validate_rule(rule)?;
    }
    Ok(parsed.rules)
}

pub fn load_rules_file(path: impl AsRef<Path>) -> Result<Vec<LinkRule>, ScopeError> {
    let text = std::fs::read_to_string(path)?;
    load_rules(&text)
}

fn canonical_pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_owned(), b.to_owned())
    } else {
        (b.to_owned(), a.to_owned())
    }
}

/// Weighted graph over components; edge weight counts historical
/// incident links crossing that component pair.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentGraph {
    pub nodes: BTreeSet<String>,
    pub edges: BTreeMap<(String, String), u64>,
}

impl ComponentGraph {
    pub fn weight(&self, c1: &str, c2: &str) -> u64 {
        self.edges.get(&canonical_pair(c1, c2)).copied().unwrap_or(0)
    }

    pub fn has_self_edges(&self) -> bool {
        self.edges.keys().any(|(a, b)| a == b)
    }
}

/// Sums historical links into component-pair edge weights.
pub fn build_component_graph(
    links: &[IncidentLink],
    corpus: &Corpus,
) -> Result<ComponentGraph, ScopeError> {
    let mut graph = ComponentGraph::default();
    for link in links {
        let a = corpus
            .incidents
            .get(&link.a)
            .ok_or_else(|| ScopeError::DanglingLink(link.a.clone()))?;
        let b = corpus
            .incidents
            .get(&link.b)
            .ok_or_else(|| ScopeError::DanglingLink(link.b.clone()))?;
        graph.nodes.insert(a.component.clone());
        graph.nodes.insert(b.component.clone());
        *graph
            .edges
            .entry(canonical_pair(&a.component, &b.component))
            .or_insert(0) += 1;
    }
    Ok(graph)
}

/// Links each seed to every active incident whose component shares a
/// sufficiently weighted graph edge with the seed's component.
/// Confidence is w/(w+1).
pub fn history_lookup(
    graph: &ComponentGraph,
    seeds: &[Incident],
    actives: &[Incident],
    min_weight: u64,
) -> Vec<IncidentLink> {
    let seed_ids: BTreeSet<&str> = seeds.iter().map(|s| s.id.as_str()).collect();
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    let mut links = Vec::new();
    for seed in seeds {
        for active in actives {
            if seed_ids.contains(active.id.as_str()) {
                continue;
            }
            let w = graph.weight(&seed.component, &active.component);
            if w >= min_weight && min_weight > 0 {
                let link = IncidentLink::new(
                    seed.id.clone(),
                    active.id.clone(),
                    LinkMethod::History,
                    w as f64 / (w as f64 + 1.0),
                    seed.created_at.max(active.created_at),
                );
                if seen.insert((link.a.clone(), link.b.clone())) {
                    links.push(link);
                }
            }
        }
    }
    links
}

pub const FEATURE_COUNT: usize = 4;
pub const MODEL_VERSION: u32 = 1;

/// Symmetric pair features: token-count cosine over title+description,
/// Jaccard overlap of title tokens, same-service and same-component
/// indicators. All lie in [0, 1].
pub fn extract_features(a: &Incident, b: &Incident) -> [f64; FEATURE_COUNT] {
    let text = |inc: &Incident| format!("{} {}", inc.title, inc.description);
    let counts = |inc: &Incident| -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for t in tokenize(&text(inc)) {
            *m.entry(t).or_insert(0.0) += 1.0;
        }
        m
    };
    let ca = counts(a);
    let cb = counts(b);
    let dot: f64 = ca
        .iter()
        .filter_map(|(t, x)| cb.get(t).map(|y| x * y))
        .sum();
    let norm = |m: &BTreeMap<String, f64>| m.values().map(|v| v * v).sum::<f64>().sqrt();
    let cosine = if ca.is_empty() || cb.is_empty() {
        0.0
    } else if ca == cb {
        1.0
    } else {
        dot / (norm(&ca) * norm(&cb))
    };
    let ta: BTreeSet<String> = tokenize(&a.title).into_iter().collect();
    let tb: BTreeSet<String> = tokenize(&b.title).into_iter().collect();
    let union = ta.union(&tb).count();
    let overlap = if union == 0 {
        0.0
    } else {
        ta.intersection(&tb).count() as f64 / union as f64
    };
    [
        cosine,
        overlap,
        (a.service == b.service) as u8 as f64,
        (a.component == b.component) as u8 as f64,
    ]
}

/// Linear scorer over pair features with non-negative weights summing
/// to 1, so the similarity is a convex combination of [0,1] features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityModel {
    pub vocabulary: BTreeMap<String, u32>,
    pub weights: [f64; FEATURE_COUNT],
    pub threshold: f64,
    pub version: u32,
}

impl SimilarityModel {
    pub fn similarity(&self, features: &[f64; FEATURE_COUNT]) -> f64 {
        // Convex combination: normalizing by the weight sum keeps the
        // all-ones feature vector at exactly 1.0.
        let num: f64 = self.weights.iter().zip(features).map(|(w, f)| w * f).sum();
        let den: f64 = self.weights.iter().sum();
        (num / den).clamp(0.0, 1.0)
    }
}

fn project_simplex(w: &mut [f64; FEATURE_COUNT]) {
    for v in w.iter_mut() {
        *v = v.max(1e-6);
    }
    let sum: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
}

/// Trains the similarity scorer on labeled incident pairs and picks
/// the decision threshold maximizing F1 on the same pairs. Negatives
/// beyond `negative_ratio` per positive are dropped in input order.
pub fn train_similarity(
    pairs: &[(Incident, Incident, bool)],
    negative_ratio: f64,
) -> Result<SimilarityModel, ScopeError> {
    let positives = pairs.iter().filter(|(_, _, y)| *y).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(ScopeError::DegenerateTraining);
    }
    let max_negatives = ((positives as f64 * negative_ratio).ceil() as usize).max(1);
    let mut kept_negatives = 0usize;
    let mut data: Vec<([f64; FEATURE_COUNT], f64)> = Vec::new();
    let mut vocabulary: BTreeMap<String, u32> = BTreeMap::new();
    for (a, b, label) in pairs {
        if !label {
            if kept_negatives >= max_negatives {
                continue;
            }
            kept_negatives += 1;
        }
        for inc in [a, b] {
            for token in tokenize(&format!("{} {}", inc.title, inc.description)) {
                let next = vocabulary.len() as u32;
                vocabulary.entry(token).or_insert(next);
            }
        }
        data.push((extract_features(a, b), if *label { 1.0 } else { 0.0 }));
    }

    // Projected gradient descent on squared error over the simplex.
    let mut weights = [1.0 / FEATURE_COUNT as f64; FEATURE_COUNT];
    let lr = 0.5;
    for _ in 0..400 {
        let mut grad = [0.0; FEATURE_COUNT];
        for (features, label) in &data {
            let score: f64 = weights.iter().zip(features).map(|(w, f)| w * f).sum();
            let err = score - label;
            for (g, f) in grad.iter_mut().zip(features) {
                *g += 2.0 * err * f;
            }
        }
        for (w, g) in weights.iter_mut().zip(&grad) {
            *w -= lr * g / data.len() as f64;
        }
        project_simplex(&mut weights);
    }

    let mut scored: Vec<(f64, f64)> = data
        .iter()
        .map(|(f, y)| {
            (
                weights.iter().zip(f).map(|(w, v)| w * v).sum::<f64>(),
                *y,
            )
        })
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total_pos: f64 = scored.iter().map(|(_, y)| y).sum();
    let mut best = (0.5f64, -1.0f64);
    let mut candidates: Vec<f64> = vec![0.0];
    for pair in scored.windows(2) {
        candidates.push((pair[0].0 + pair[1].0) / 2.0);
    }
    for threshold in candidates {
        let tp: f64 = scored
            .iter()
            .filter(|(s, y)| *s > threshold && *y > 0.5)
            .count() as f64;
        let fp: f64 = scored
            .iter()
            .filter(|(s, y)| *s > threshold && *y <= 0.5)
            .count() as f64;
        if tp == 0.0 {
            continue;
        }
        let precision = tp / (tp + fp);
        let recall = tp / total_pos;
        let f1 = 2.0 * precision * recall / (precision + recall);
        if f1 > best.1 {
            best = (threshold, f1);
        }
    }
    Ok(SimilarityModel {
        vocabulary,
        weights,
        threshold: best.0.clamp(1e-6, 1.0 - 1e-6),
        version: MODEL_VERSION,
    })
}

/// Symmetric similarity prediction: linked iff similarity > threshold.
pub fn predict_link(model: &SimilarityModel, a: &Incident, b: &Incident) -> (f64, bool) {
    let similarity = model.similarity(&extract_features(a, b));
    (similarity, similarity > model.threshold)
}

const MODEL_MAGIC: &[u8; 4] = b"OKSM";

/// Writes the model to the versioned binary on-disk format.
pub fn save_model(model: &SimilarityModel, mut out: impl Write) -> Result<(), ScopeError> {
    out.write_all(MODEL_MAGIC)?;
    out.write_u32::<LittleEndian>(model.version)?;
    out.write_f64::<LittleEndian>(model.threshold)?;
    for w in &model.weights {
        out.write_f64::<LittleEndian>(*w)?;
    }
    out.write_u32::<LittleEndian>(model.vocabulary.len() as u32)?;
    for (token, index) in &model.vocabulary {
        out.write_u16::<LittleEndian>(token.len() as u16)?;
        out.write_all(token.as_bytes())?;
        out.write_u32::<LittleEndian>(*index)?;
    }
    Ok(())
}

pub fn load_model(mut input: impl Read) -> Result<SimilarityModel, ScopeError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(ScopeError::ModelFormat("bad magic".into()));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != MODEL_VERSION {
        return Err(ScopeError::ModelFormat(format!(
            "unsupported version {version}"
        )));
    }
    let threshold = input.read_f64::<LittleEndian>()?;
    let mut weights = [0.0; FEATURE_COUNT];
    for w in &mut weights {
        *w = input.read_f64::<LittleEndian>()?;
    }
    let n = input.read_u32::<LittleEndian>()?;
    let mut vocabulary = BTreeMap::new();
    for _ in 0..n {
        let len = input.read_u16::<LittleEndian>()? as usize;
        let mut buf = vec![0u8; len];
        input.read_exact(&mut buf)?;
        let token = String::from_utf8(buf)
            .map_err(|e| ScopeError::ModelFormat(format!("bad token: {e}")))?;
        let index = input.read_u32::<LittleEndian>()?;
        vocabulary.insert(token, index);
    }
    Ok(SimilarityModel {
        vocabulary,
        weights,
        threshold,
        version,
    })
}

pub fn save_model_file(model: &SimilarityModel, path: impl AsRef<Path>) -> Result<(), ScopeError> {
    let mut buf = Vec::new();
    save_model(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_model_file(path: impl AsRef<Path>) -> Result<SimilarityModel, ScopeError> {
    let bytes = std::fs::read(path)?;
    load_model(bytes.as_slice())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProvenanceTag {
    Seed,
    Rule,
    History,
    Model,
}

/// The aggregated set of incidents relevant to one outage, with the
/// method(s) that contributed each incident.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeResult {
    pub outage_id: String,
    /// Deduplicated, ordered by (severity asc, created_at asc, id).
    pub incidents: Vec<String>,
    pub provenance: BTreeMap<String, BTreeSet<ProvenanceTag>>,
    pub assessed_at: DateTime<Utc>,
}

/// A scope assessment plus the individual links that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScopeOutcome {
    pub scope: ScopeResult,
    pub links: Vec<IncidentLink>,
}

/// Unions the three linkers over the incidents active around the
/// outage declaration. Only links touching a seed incident contribute
/// (no transitive closure).
#[allow(clippy::too_many_arguments)]
pub fn assess_scope(
    outage: &Outage,
    store: &Store,
    rules: &[LinkRule],
    graph: &ComponentGraph,
    model: &SimilarityModel,
    window: Duration,
    min_weight: u64,
) -> Result<ScopeOutcome, ScopeError> {
    let mut seeds: Vec<Incident> = Vec::new();
    for id in &outage.seed_incident_ids {
        let inc = store.incident(id).ok_or_else(|| ScopeError::MissingSeed {
            outage_id: outage.id.clone(),
            incident_id: id.clone(),
        })?;
        seeds.push(inc.clone());
    }
    let seed_ids: BTreeSet<&str> = outage.seed_incident_ids.iter().map(String::as_str).collect();
    let query = TimeWindow::new(outage.declared_at - window, outage.declared_at + window)?;
    let actives = store.query_window(query);

    let mut pool: Vec<Incident> = seeds.clone();
    for inc in &actives {
        if !seed_ids.contains(inc.id.as_str()) {
            pool.push(inc.clone());
        }
    }

    let mut links: Vec<IncidentLink> = Vec::new();
    for link in apply_rules(rules, &pool)? {
        if seed_ids.contains(link.a.as_str()) || seed_ids.contains(link.b.as_str()) {
            links.push(link);
        }
    }
    links.extend(history_lookup(graph, &seeds, &actives, min_weight));
    for seed in &seeds {
        for active in &actives {
            if seed_ids.contains(active.id.as_str()) {
                continue;
            }
            let (similarity, linked) = predict_link(model, seed, active);
            if linked {
                links.push(IncidentLink::new(
                    seed.id.clone(),
                    active.id.clone(),
                    LinkMethod::Model,
                    similarity,
                    seed.created_at.max(active.created_at),
                ));
            }
        }
    }

    let mut provenance: BTreeMap<String, BTreeSet<ProvenanceTag>> = BTreeMap::new();
    for id in &seed_ids {
        provenance
            .entry((*id).to_owned())
            .or_default()
            .insert(ProvenanceTag::Seed);
    }
    for link in &links {
        let tag = match link.method {
            LinkMethod::Rule => ProvenanceTag::Rule,
            LinkMethod::History => ProvenanceTag::History,
            LinkMethod::Model => ProvenanceTag::Model,
        };
        for end in [&link.a, &link.b] {
            if !seed_ids.contains(end.as_str()) {
                provenance.entry(end.clone()).or_default().insert(tag);
            }
        }
    }

    let mut incidents: Vec<Incident> = provenance
        .keys()
        .filter_map(|id| store.incident(id).cloned())
        .collect();
    incidents.sort_by(|x, y| {
        (x.severity, x.created_at, &x.id).cmp(&(y.severity, y.created_at, &y.id))
    });

    Ok(ScopeOutcome {
        scope: ScopeResult {
            outage_id: outage.id.clone(),
            incidents: incidents.into_iter().map(|i| i.id).collect(),
            provenance,
            assessed_at: Utc::now(),
        },
        links,
    })
}
