//! Deterministic synthetic corpus generator with planted ground truth.
//!
//! All randomness flows from a single 64-bit seed through per-outage
//! sub-seeds drawn in a fixed order, so corpora are byte-identical
//! across runs and adding outages never reshuffles earlier ones.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    Corpus, ImpactPersistence, Incident, IncidentLink, IncidentSource, LinkMethod, Outage,
    OutageState,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible generator parameters: {0}")]
    InfeasibleParams(String),
}

/// Generator parameters. Defaults target the reference corpus shape:
/// incident-count mean 9.36 with P(count > 10) = 0.25, 86.4% large
/// impact, persistent:intermittent 1.81:1, and median time-to-summary
/// of one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub n_outages: usize,
    pub incident_count_mean: f64,
    pub incident_count_p_gt_10: f64,
    pub large_impact_fraction: f64,
    /// Fraction of outages with persistent impact (0.644 = 1.81:1).
    pub persistent_fraction: f64,
    pub n_components: usize,
    pub n_services: usize,
    pub n_dependency_edges: usize,
    pub tts_median_units: f64,
    pub vocabulary_size: usize,
    /// Rule window used when planting expected rule-link pairs.
    pub rule_window_secs: i64,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            n_outages: 500,
            incident_count_mean: 9.36,
            incident_count_p_gt_10: 0.25,
            large_impact_fraction: 0.864,
            persistent_fraction: 0.644,
            n_components: 24,
            n_services: 8,
            n_dependency_edges: 12,
            tts_median_units: 1.0,
            vocabulary_size: 120,
            rule_window_secs: 3600,
            seed: 13,
        }
    }
}

impl GenParams {
    fn validate(&self) -> Result<(), SynthError> {
        if self.n_outages == 0 {
            return Err(SynthError::InfeasibleParams("n_outages must be >= 1".into()));
        }
        for (name, v) in [
            ("large_impact_fraction", self.large_impact_fraction),
            ("persistent_fraction", self.persistent_fraction),
            ("incident_count_p_gt_10", self.incident_count_p_gt_10),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::InfeasibleParams(format!(
                    "{name} must lie in [0,1], got {v}"
                )));
            }
        }
        if self.n_components < 2 || self.n_services == 0 || self.vocabulary_size < 16 {
            return Err(SynthError::InfeasibleParams(
                "need >= 2 components, >= 1 service, vocabulary >= 16".into(),
            ));
        }
        Ok(())
    }
}

/// Negative binomial parameters (number-of-failures form).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegBinParams {
    pub r: f64,
    pub p: f64,
}

fn negbin_clamped_stats(r: f64, p: f64) -> (f64, f64) {
    // Incident counts are max(1, X): the zero class folds into 1.
    let mean = r * (1.0 - p) / p + p.powf(r);
    let mut pmf = p.powf(r);
    let mut cdf10 = pmf;
    for k in 0..10 {
        pmf *= (k as f64 + r) / (k as f64 + 1.0) * (1.0 - p);
        cdf10 += pmf;
    }
    (mean, 1.0 - cdf10)
}

/// Fits (r, p) so that counts drawn as max(1, NB(r, p)) hit the target
/// mean and tail probability P(count > 10).
pub fn calibrate_counts(mean: f64, p_gt_10: f64) -> Result<NegBinParams, SynthError> {
    if mean < 1.0 {
        return Err(SynthError::InfeasibleParams(format!(
            "count mean must be >= 1, got {mean}"
        )));
    }
    let mut best: Option<(f64, NegBinParams)> = None;
    let mut r = 0.05;
    while r <= 40.0 {
        // Mean is decreasing in p; bisect.
        let (mut lo, mut hi) = (1e-9, 1.0 - 1e-9);
        for _ in 0..80 {
            let mid = (lo + hi) / 2.0;
            let (m, _) = negbin_clamped_stats(r, mid);
            if m > mean {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let p = (lo + hi) / 2.0;
        let (m, tail) = negbin_clamped_stats(r, p);
        if (m - mean).abs() < 1e-3 {
            let err = (tail - p_gt_10).abs();
            if best.map_or(true, |(e, _)| err < e) {
                best = Some((err, NegBinParams { r, p }));
            }
        }
        r += 0.05;
    }
    match best {
        Some((err, params)) if err <= 0.02 => Ok(params),
        Some((err, _)) => Err(SynthError::InfeasibleParams(format!(
            "no negative binomial reaches mean {mean} with P(>10) {p_gt_10} (best error {err:.3})"
        ))),
        None => Err(SynthError::InfeasibleParams(
            "count calibration found no candidate".into(),
        )),
    }
}

fn sample_count(nb: NegBinParams, rng: &mut ChaCha8Rng) -> usize {
    // Gamma-Poisson mixture for non-integer r.
    let gamma = Gamma::new(nb.r, (1.0 - nb.p) / nb.p).expect("valid gamma");
    let lambda: f64 = gamma.sample(rng);
    let x = if lambda <= 1e-12 {
        0
    } else {
        Poisson::new(lambda).expect("valid poisson").sample(rng) as usize
    };
    x.max(1)
}

/// Everything the verification harness needs about one generated
/// outage: the planted relevant set, references, and the pairs each
/// linker is expected to find.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutageTruth {
    pub outage_id: String,
    pub relevant_incident_ids: Vec<String>,
    pub reference_summary: String,
    pub reference_title: String,
    pub rule_pairs: Vec<(String, String)>,
    pub history_pairs: Vec<(String, String)>,
    pub model_pairs: Vec<(String, String)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub outages: BTreeMap<String, OutageTruth>,
}

impl GroundTruth {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for truth in self.outages.values() {
            out.push_str(&serde_json::to_string(truth).expect("truth serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let mut outages = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let truth: OutageTruth = serde_json::from_str(line)?;
            outages.insert(truth.outage_id.clone(), truth);
        }
        Ok(GroundTruth { outages })
    }
}

fn pick_tokens(pool_prefix: &str, pool_size: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut chosen = BTreeSet::new();
    while chosen.len() < n.min(pool_size) {
        chosen.insert(rng.gen_range(0..pool_size));
    }
    chosen
        .into_iter()
        .map(|i| format!("{pool_prefix}{i:03}"))
        .collect()
}

fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2023, 1, 1, 0, 0, 0).unwrap()
}

struct OutagePlan {
    outage: Outage,
    incidents: Vec<Incident>,
    noise: Vec<Incident>,
    truth: OutageTruth,
}

fn plan_outage(
    params: &GenParams,
    nb: NegBinParams,
    edges: &[(usize, usize)],
    index: usize,
    sub_seed: u64,
) -> OutagePlan {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
    let outage_id = format!("out-{index:05}");
    let declared_at = epoch() + Duration::hours(72 * index as i64);

    // Draw order: count, edge, topic tokens, per-incident fields,
    // impact flags, tts, noise block.
    let count = sample_count(nb, &mut rng);
    let (c1, c2) = edges[rng.gen_range(0..edges.len())];
    let topic = pick_tokens("fault", params.vocabulary_size, 8, &mut rng);
    let service_of = |c: usize| format!("svc-{:02}", c % params.n_services);
    let component_of = |c: usize| format!("comp-{c:02}");

    let mut incidents = Vec::with_capacity(count);
    for j in 0..count {
        let id = format!("inc-{index:05}-{j:03}");
        let severity = if j == 0 { 0 } else { rng.gen_range(1..=4) as u8 };
        let comp = if j % 2 == 0 { c1 } else { c2 };
        let offset_min = rng.gen_range(-240..=240i64);
        let mut words: Vec<&str> = topic.iter().map(String::as_str).collect();
        // Vary which topic tokens each incident surfaces.
        let skip = rng.gen_range(0..words.len());
        words.remove(skip);
        let title = format!(
            "{} {} {} alerts on {}",
            words[0],
            words[1],
            words[2],
            component_of(comp)
        );
        let description = format!(
            "{} reports {} {} {} {} {} errors on the impacted requests",
            service_of(comp),
            words[2],
            words[3],
            words[4],
            words[5],
            words[6],
        );
        incidents.push(Incident {
            id,
            title,
            description,
            severity,
            service: service_of(comp),
            component: component_of(comp),
            created_at: declared_at + Duration::minutes(offset_min),
            source: if severity == 0 {
                IncidentSource::Manual
            } else {
                IncidentSource::Monitor
            },
        });
    }

    let large_customer_impact = rng.gen_bool(params.large_impact_fraction);
    let persistent = rng.gen_bool(params.persistent_fraction);
    let noise_scale: f64 = Normal::new(0.0, 0.9).unwrap().sample(&mut rng);
    let tts_units = params.tts_median_units * noise_scale.exp();
    let impact_start = declared_at - Duration::minutes(8);
    let summary_completed_at =
        impact_start + Duration::seconds((tts_units * 3600.0).round() as i64);

    // Background incidents inside the scope window that belong to no
    // outage: disjoint components, services, and vocabulary.
    let n_noise = Poisson::new(3.0).unwrap().sample(&mut rng) as usize;
    let mut noise = Vec::with_capacity(n_noise);
    for j in 0..n_noise {
        let tokens = pick_tokens("hum", params.vocabulary_size, 6, &mut rng);
        let comp = rng.gen_range(0..params.n_components);
        let offset_min = rng.gen_range(-240..=240i64);
        noise.push(Incident {
            id: format!("bg-{index:05}-{j:03}"),
            title: format!("{} {} watch on noise-comp-{comp:02}", tokens[0], tokens[1]),
            description: format!(
                "routine {} {} {} {} drift observed",
                tokens[2], tokens[3], tokens[4], tokens[5]
            ),
            severity: rng.gen_range(3..=4) as u8,
            service: format!("noise-svc-{:02}", comp % params.n_services),
            component: format!("noise-comp-{comp:02}"),
            created_at: declared_at + Duration::minutes(offset_min),
            source: IncidentSource::Monitor,
        });
    }

    // Reference texts: composed from the two highest-severity relevant
    // incidents so extractive overlap is high by construction.
    let mut ranked: Vec<&Incident> = incidents.iter().collect();
    ranked.sort_by(|x, y| (x.severity, x.created_at, &x.id).cmp(&(y.severity, y.created_at, &y.id)));
    let top: Vec<&Incident> = ranked.iter().take(2).copied().collect();
    let mut services: Vec<&str> = Vec::new();
    for inc in &top {
        if !services.contains(&inc.service.as_str()) {
            services.push(&inc.service);
        }
    }
    let descriptions: Vec<&str> = top.iter().map(|i| i.description.as_str()).collect();
    let reference_summary = format!(
        "The outage impacted {}. {}",
        services.join(", "),
        descriptions.join(" ")
    );
    let reference_title = format!("Outage for {}", ranked[0].service);

    let seed_incident = &incidents[0];
    let mut rule_pairs = Vec::new();
    let mut history_pairs = Vec::new();
    let mut model_pairs = Vec::new();
    for inc in &incidents[1..] {
        let pair = if seed_incident.id <= inc.id {
            (seed_incident.id.clone(), inc.id.clone())
        } else {
            (inc.id.clone(), seed_incident.id.clone())
        };
        if inc.component == seed_incident.component
            && inc.service == seed_incident.service
            && (inc.created_at - seed_incident.created_at).abs()
                <= Duration::seconds(params.rule_window_secs)
        {
            rule_pairs.push(pair.clone());
        }
        if inc.component != seed_incident.component {
            history_pairs.push(pair.clone());
        }
        model_pairs.push(pair);
    }

    let outage = Outage {
        id: outage_id.clone(),
        title: reference_title.clone(),
        summary: reference_summary.clone(),
        impact_start: Some(impact_start),
        declared_at,
        engaged_at: Some(declared_at + Duration::minutes(1)),
        summary_completed_at: Some(summary_completed_at),
        state: OutageState::Resolved,
        large_customer_impact,
        impact_persistence: if persistent {
            ImpactPersistence::Persistent
        } else {
            ImpactPersistence::Intermittent
        },
        seed_incident_ids: vec![seed_incident.id.clone()],
    };
    let truth = OutageTruth {
        outage_id,
        relevant_incident_ids: incidents.iter().map(|i| i.id.clone()).collect(),
        reference_summary,
        reference_title,
        rule_pairs,
        history_pairs,
        model_pairs,
    };
    OutagePlan {
        outage,
        incidents,
        noise,
        truth,
    }
}

/// Generates a corpus plus its ground truth. Engineer-made links
/// (seed to every relevant incident) are stored in the corpus so the
/// component graph and split carry the planted structure.
pub fn generate_corpus(params: &GenParams) -> Result<(Corpus, GroundTruth), SynthError> {
    params.validate()?;
    let nb = calibrate_counts(params.incident_count_mean, params.incident_count_p_gt_10)?;
    let mut master = ChaCha8Rng::seed_from_u64(params.seed);

    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut seen = BTreeSet::new();
    while edges.len() < params.n_dependency_edges.max(1) {
        let a = master.gen_range(0..params.n_components);
        let b = master.gen_range(0..params.n_components);
        if a == b {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if seen.insert(key) {
            edges.push(key);
        }
        if seen.len() >= params.n_components * (params.n_components - 1) / 2 {
            break;
        }
    }

    let sub_seeds: Vec<u64> = (0..params.n_outages).map(|_| master.gen()).collect();
    let mut corpus = Corpus::default();
    let mut truth = GroundTruth::default();
    for (index, sub_seed) in sub_seeds.into_iter().enumerate() {
        let plan = plan_outage(params, nb, &edges, index, sub_seed);
        let seed_id = plan.outage.seed_incident_ids[0].clone();
        for inc in plan.incidents.iter().chain(plan.noise.iter()) {
            corpus.insert_incident(inc.clone());
        }
        for inc in &plan.incidents[1..] {
            corpus.links.push(IncidentLink::new(
                seed_id.clone(),
                inc.id.clone(),
                LinkMethod::Rule,
                1.0,
                inc.created_at.max(plan.incidents[0].created_at),
            ));
        }
        truth
            .outages
            .insert(plan.outage.id.clone(), plan.truth);
        corpus.insert_outage(plan.outage);
    }
    Ok((corpus, truth))
}

/// Deterministic labeled incident pairs for similarity training:
/// positives are seed x relevant pairs, negatives pair seeds with
/// background incidents and with incidents of other outages.
pub fn labeled_pairs(
    corpus: &Corpus,
    truth: &GroundTruth,
    negative_ratio: f64,
    seed: u64,
) -> Vec<(Incident, Incident, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    let outage_ids: Vec<&String> = truth.outages.keys().collect();
    for truth_entry in truth.outages.values() {
        let outage = &corpus.outages[&truth_entry.outage_id];
        let seed_inc = &corpus.incidents[&outage.seed_incident_ids[0]];
        for id in truth_entry.relevant_incident_ids.iter().skip(1).take(4) {
            pairs.push((seed_inc.clone(), corpus.incidents[id].clone(), true));
        }
    }
    let n_negatives = ((pairs.len() as f64) * negative_ratio).ceil() as usize;
    let background: Vec<&Incident> = corpus
        .incidents
        .values()
        .filter(|i| i.id.starts_with("bg-"))
        .collect();
    let mut produced = 0usize;
    while produced < n_negatives && !outage_ids.is_empty() {
        let t = &truth.outages[outage_ids[rng.gen_range(0..outage_ids.len())]];
        let seed_inc = &corpus.incidents
            [&corpus.outages[&t.outage_id].seed_incident_ids[0]];
        let other = if !background.is_empty() && rng.gen_bool(0.5) {
            background[rng.gen_range(0..background.len())].clone()
        } else {
            let t2 = &truth.outages[outage_ids[rng.gen_range(0..outage_ids.len())]];
            if t2.outage_id == t.outage_id {
                continue;
            }
            let ids = &t2.relevant_incident_ids;
            corpus.incidents[&ids[rng.gen_range(0..ids.len())]].clone()
        };
        pairs.push((seed_inc.clone(), other, false));
        produced += 1;
    }
    pairs
}
