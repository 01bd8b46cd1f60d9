//! Domain-specific text processing: turns an outage's relevant
//! incidents into the prompt fed to a generation backend, drives
//! candidate generation, and exports fine-tuning records.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, GenerationBackend, GenerationParams};
use crate::domain::{Corpus, Incident, OutageState};
use crate::scope::ScopeResult;

#[derive(Debug, Error)]
pub enum SummarizeError {
    #[error("cannot build context from an empty incident list")]
    EmptyIncidentList,
    #[error("summary_given_title mode requires an outage title")]
    MissingTitle,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    Summary,
    Title,
    SummaryGivenTitle,
}

pub const SUMMARY_INSTRUCTION: &str = "The outage summary is:";
pub const TITLE_INSTRUCTION: &str = "The outage title is:";

impl ContextMode {
    pub fn instruction(&self) -> &'static str {
        match self {
            ContextMode::Summary | ContextMode::SummaryGivenTitle => SUMMARY_INSTRUCTION,
            ContextMode::Title => TITLE_INSTRUCTION,
        }
    }
}

/// The processed, ordered, instruction-suffixed prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextText {
    pub text: String,
    pub incident_count: usize,
    pub truncated: bool,
    pub mode: ContextMode,
}

/// English ordinal: 1st, 2nd, 3rd, 4th, ... 11th, 12th, 13th, 21st.
pub fn ordinal(n: usize) -> String {
    let suffix = match (n % 10, n % 100) {
        (1, 11) | (2, 12) | (3, 13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

/// Stable severity-first ordering used everywhere incidents are
/// rendered: severity ascending (0 first), then created_at, then id.
pub fn sort_for_context(incidents: &[Incident]) -> Vec<Incident> {
    let mut sorted = incidents.to_vec();
    sorted.sort_by(|x, y| (x.severity, x.created_at, &x.id).cmp(&(y.severity, y.created_at, &y.id)));
    sorted
}

/// Renders one incident as its five fixed sentences.
pub fn render_incident(incident: &Incident, position: usize) -> String {
    let ord = ordinal(position);
    format!(
        "The title of the {ord} incident is {title}. \
         The description of the {ord} incident is {description}. \
         The service of the {ord} incident is {service}. \
         The component of the {ord} incident is {component}. \
         The severity of the {ord} incident is {severity}.",
        title = incident.title,
        description = incident.description,
        service = incident.service,
        component = incident.component,
        severity = incident.severity,
    )
}

/// Builds the generation prompt: severity-sorted incident sentences,
/// an optional outage-title line, and the mode's instruction suffix.
/// When the text would exceed `max_chars`, whole trailing incidents are
/// dropped (never mid-incident); at least one incident is always kept.
pub fn build_context(
    incidents: &[Incident],
    mode: ContextMode,
    title: Option<&str>,
    max_chars: usize,
) -> Result<ContextText, SummarizeError> {
    if incidents.is_empty() {
        return Err(SummarizeError::EmptyIncidentList);
    }
    if mode == ContextMode::SummaryGivenTitle && title.is_none() {
        return Err(SummarizeError::MissingTitle);
    }
    let sorted = sort_for_context(incidents);
    let blocks: Vec<String> = sorted
        .iter()
        .enumerate()
        .map(|(i, inc)| render_incident(inc, i + 1))
        .collect();

    let mut tail = String::new();
    if mode == ContextMode::SummaryGivenTitle {
        tail.push_str(&format!("The outage title is {}. ", title.unwrap()));
    }
    tail.push_str(mode.instruction());

    let assemble = |k: usize| -> String {
        let mut text = String::new();
        for block in &blocks[..k] {
            text.push_str(block);
            text.push(' ');
        }
        text.push_str(&tail);
        text
    };

    let mut keep = blocks.len();
    while keep > 1 && assemble(keep).chars().count() > max_chars {
        keep -= 1;
    }
    Ok(ContextText {
        text: assemble(keep),
        incident_count: keep,
        truncated: keep < blocks.len(),
        mode,
    })
}

/// One backend candidate with its measured generation latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationCandidate {
    pub text: String,
    pub index: usize,
    pub latency_secs: f64,
}

/// Requests `n` candidates from the backend, preserving backend order.
/// Errors surface whole; there is never a partial result.
pub fn generate(
    context: &ContextText,
    backend: &dyn GenerationBackend,
    n: usize,
    params: &GenerationParams,
) -> Result<Vec<GenerationCandidate>, SummarizeError> {
    let started = Instant::now();
    let texts = backend.complete(&context.text, n, params)?;
    let latency_secs = started.elapsed().as_secs_f64();
    debug_assert_eq!(texts.len(), n);
    Ok(texts
        .into_iter()
        .enumerate()
        .map(|(index, text)| GenerationCandidate {
            text,
            index,
            latency_secs,
        })
        .collect())
}

/// One fine-tuning sample: the incident context and the
/// engineer-written completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub context: String,
    pub completion: String,
    pub outage_id: String,
}

impl FinetuneRecord {
    /// The exported line format carries only context and completion.
    pub fn to_export_line(&self) -> String {
        serde_json::to_string(&serde_json::json!({
            "context": self.context,
            "completion": self.completion,
        }))
        .expect("record serializes")
    }
}

/// Outages skipped during export, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedOutage {
    pub outage_id: String,
    pub reason: String,
}

/// Builds one fine-tune record per outage in chronological
/// (declared_at, id) order. Outages without an engineer-written
/// completion (or not yet mitigated/resolved) are skipped and reported.
pub fn export_finetune(
    corpus: &Corpus,
    scopes: &BTreeMap<String, ScopeResult>,
    mode: ContextMode,
    max_chars: usize,
) -> Result<(Vec<FinetuneRecord>, Vec<SkippedOutage>), SummarizeError> {
    let mut ordered: Vec<_> = corpus
        .outages
        .values()
        .filter(|o| scopes.contains_key(&o.id))
        .collect();
    ordered.sort_by(|x, y| (x.declared_at, &x.id).cmp(&(y.declared_at, &y.id)));

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for outage in ordered {
        let completion = match mode {
            ContextMode::Title => outage.title.clone(),
            ContextMode::Summary | ContextMode::SummaryGivenTitle => outage.summary.clone(),
        };
        if completion.is_empty() || outage.state == OutageState::Active {
            skipped.push(SkippedOutage {
                outage_id: outage.id.clone(),
                reason: "missing engineer-written reference".into(),
            });
            continue;
        }
        let scope = &scopes[&outage.id];
        let incidents: Vec<Incident> = scope
            .incidents
            .iter()
            .filter_map(|id| corpus.incidents.get(id).cloned())
            .collect();
        if incidents.is_empty() {
            skipped.push(SkippedOutage {
                outage_id: outage.id.clone(),
                reason: "no resolvable incidents in scope".into(),
            });
            continue;
        }
        let title = (mode == ContextMode::SummaryGivenTitle).then(|| outage.title.as_str());
        let context = build_context(&incidents, mode, title, max_chars)?;
        records.push(FinetuneRecord {
            context: context.text,
            completion,
            outage_id: outage.id.clone(),
        });
    }
    Ok((records, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ExtractiveMock;
    use crate::domain::IncidentSource;
    use chrono::{DateTime, Utc};

    fn ts(s: &str) -> DateTime<Utc> {
        DateTime::parse_from_rfc3339(s).unwrap().with_timezone(&Utc)
    }

    fn incident(id: &str, severity: u8) -> Incident {
        Incident {
            id: id.into(),
            title: format!("title {id}"),
            description: format!("description {id}"),
            severity,
            service: "Email Service".into(),
            component: "smtp-relay".into(),
            created_at: ts("2023-05-01T14:20:00Z"),
            source: IncidentSource::Monitor,
        }
    }

    #[test]
    fn ordinals() {
        let cases = [
            (1, "1st"),
            (2, "2nd"),
            (3, "3rd"),
            (4, "4th"),
            (11, "11th"),
            (12, "12th"),
            (13, "13th"),
            (21, "21st"),
            (102, "102nd"),
        ];
        for (n, expect) in cases {
            assert_eq!(ordinal(n), expect);
        }
    }

    #[test]
    fn single_incident_summary_context() {
        let inc = incident("i1", 1);
        let ctx = build_context(&[inc.clone()], ContextMode::Summary, None, 12000).unwrap();
        let expect = format!("{} {}", render_incident(&inc, 1), SUMMARY_INSTRUCTION);
        assert_eq!(ctx.text, expect);
        assert_eq!(ctx.incident_count, 1);
        assert!(!ctx.truncated);
        assert!(ctx.text.contains("The title of the 1st incident is title i1."));
    }

    #[test]
    fn severity_orders_incidents() {
        let low = incident("low", 3);
        let high = incident("high", 2);
        let ctx =
            build_context(&[low.clone(), high.clone()], ContextMode::Summary, None, 12000).unwrap();
        let first = ctx.text.find("title high").unwrap();
        let second = ctx.text.find("title low").unwrap();
        assert!(first < second);
    }

    #[test]
    fn truncation_keeps_highest_severity() {
        let a = incident("a", 0);
        let b = incident("b", 2);
        let full = build_context(&[a.clone(), b.clone()], ContextMode::Summary, None, 12000)
            .unwrap();
        let small = build_context(&[b, a.clone()], ContextMode::Summary, None, full.text.len() - 1)
            .unwrap();
        assert!(small.truncated);
        assert_eq!(small.incident_count, 1);
        assert!(small.text.contains("title a"));
        assert!(!small.text.contains("title b"));
        assert!(small.text.ends_with(SUMMARY_INSTRUCTION));
    }

    #[test]
    fn title_in_context_mode() {
        let inc = incident("i1", 1);
        let ctx = build_context(
            &[inc],
            ContextMode::SummaryGivenTitle,
            Some("Outage for Email Service - Triage"),
            12000,
        )
        .unwrap();
        assert!(ctx
            .text
            .contains("The outage title is Outage for Email Service - Triage."));
        assert!(ctx.text.ends_with(SUMMARY_INSTRUCTION));
    }

    #[test]
    fn missing_title_rejected() {
        let inc = incident("i1", 1);
        assert!(matches!(
            build_context(&[inc], ContextMode::SummaryGivenTitle, None, 12000),
            Err(SummarizeError::MissingTitle)
        ));
        assert!(matches!(
            build_context(&[], ContextMode::Summary, None, 12000),
            Err(SummarizeError::EmptyIncidentList)
        ));
    }

    #[test]
    fn permuting_input_order_is_canonical() {
        let incidents = vec![incident("b", 2), incident("a", 2), incident("c", 1)];
        let ctx1 = build_context(&incidents, ContextMode::Summary, None, 12000).unwrap();
        let mut rev = incidents.clone();
        rev.reverse();
        let ctx2 = build_context(&rev, ContextMode::Summary, None, 12000).unwrap();
        assert_eq!(ctx1, ctx2);
    }

    #[test]
    fn generate_deterministic_candidates() {
        let incidents = vec![incident("a", 1), incident("b", 2), incident("c", 3)];
        let ctx = build_context(&incidents, ContextMode::Summary, None, 12000).unwrap();
        let backend = ExtractiveMock;
        let params = GenerationParams::default();
        let first = generate(&ctx, &backend, 5, &params).unwrap();
        let second = generate(&ctx, &backend, 5, &params).unwrap();
        assert_eq!(first.len(), 5);
        assert_eq!(
            first.iter().map(|c| c.index).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 4]
        );
        let texts: Vec<_> = first.iter().map(|c| &c.text).collect();
        let texts2: Vec<_> = second.iter().map(|c| &c.text).collect();
        assert_eq!(texts, texts2);
    }
}
