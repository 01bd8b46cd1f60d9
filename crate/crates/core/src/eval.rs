//! Text-generation metrics (BLEU-4, ROUGE-L, METEOR), Top1/Top5
//! aggregation, rank significance, and corpus study statistics.
//!
//! METEOR here uses exact plus suffix-stemmed matching only (no synonym
//! database), with the standard 10/9 Fmean weighting and cubic
//! fragmentation penalty. BLEU applies add-one smoothing to zero counts
//! of order >= 2 so short titles do not collapse to zero.

use std::collections::BTreeMap;

use chrono::Duration;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{compute_tts, Corpus};
use crate::scope::ScopeResult;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("outage {0} has no reference text")]
    MissingReference(String),
    #[error("outage {0} has no candidates")]
    EmptyCandidates(String),
    #[error("rank row {row} is not a permutation of 1..={k}")]
    InvalidRanks { row: usize, k: usize },
    #[error("need at least 2 raters and 2 systems")]
    DegenerateRankMatrix,
}

/// Lowercases and splits on any non-alphanumeric character, dropping
/// empty tokens. Shared by all metrics and the retrieval baseline.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Smoothed sentence BLEU-4: geometric mean of clipped n-gram
/// precisions (n = 1..4, add-one smoothing on zero counts for n >= 2)
/// times the brevity penalty min(1, e^(1 - r/h)).
pub fn bleu4(hypothesis: &str, reference: &str) -> f64 {
    let hyp = tokenize(hypothesis);
    let refr = tokenize(reference);
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let hyp_counts = ngram_counts(&hyp, n);
        let ref_counts = ngram_counts(&refr, n);
        let total: usize = hyp_counts.values().sum();
        let matched: usize = hyp_counts
            .iter()
            .map(|(gram, count)| (*count).min(ref_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        let p = if matched == 0 {
            if n == 1 {
                return 0.0;
            }
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let bp = (1.0 - refr.len() as f64 / hyp.len() as f64).exp().min(1.0);
    bp * (log_sum / 4.0).exp()
}

pub(crate) fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 over the token-level longest common subsequence.
pub fn rouge_l(hypothesis: &str, reference: &str) -> f64 {
    let hyp = tokenize(hypothesis);
    let refr = tokenize(reference);
    if hyp.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&hyp, &refr) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hyp.len() as f64;
    let r = lcs / refr.len() as f64;
    2.0 * p * r / (p + r)
}

/// Light suffix stemmer used by METEOR's second alignment stage.
pub(crate) fn stem(token: &str) -> String {
    for suffix in ["ing", "ness", "ies", "ed", "es", "ly", "s"] {
        if let Some(stripped) = token.strip_suffix(suffix) {
            if stripped.len() >= 3 {
                return stripped.to_owned();
            }
        }
    }
    token.to_owned()
}

fn align_stage(
    hyp: &[String],
    refr: &[String],
    hyp_used: &mut [bool],
    ref_used: &mut [bool],
    matches: &mut Vec<(usize, usize)>,
    key: impl Fn(&str) -> String,
) {
    for (hi, token) in hyp.iter().enumerate() {
        if hyp_used[hi] {
            continue;
        }
        let hkey = key(token);
        // Prefer the ref position that extends the previous match run.
        let preferred = matches
            .iter()
            .filter(|(h, _)| *h + 1 == hi)
            .map(|(_, r)| r + 1)
            .next();
        let mut chosen = None;
        if let Some(p) = preferred {
            if p < refr.len() && !ref_used[p] && key(&refr[p]) == hkey {
                chosen = Some(p);
            }
        }
        if chosen.is_none() {
            chosen = refr
                .iter()
                .enumerate()
                .find(|(ri, r)| !ref_used[*ri] && key(r) == hkey)
                .map(|(ri, _)| ri);
        }
        if let Some(ri) = chosen {
            hyp_used[hi] = true;
            ref_used[ri] = true;
            matches.push((hi, ri));
        }
    }
    matches.sort_unstable();
}

/// METEOR with exact and suffix-stemmed alignment stages:
/// Fmean = 10PR/(R+9P), penalty = 0.5 * (chunks/matches)^3.
pub fn meteor(hypothesis: &str, reference: &str) -> f64 {
    let hyp = tokenize(hypothesis);
    let refr = tokenize(reference);
    if hyp.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let mut hyp_used = vec![false; hyp.len()];
    let mut ref_used = vec![false; refr.len()];
    let mut matches = Vec::new();
    align_stage(&hyp, &refr, &mut hyp_used, &mut ref_used, &mut matches, |t| {
        t.to_owned()
    });
    align_stage(&hyp, &refr, &mut hyp_used, &mut ref_used, &mut matches, stem);
    let m = matches.len() as f64;
    if matches.is_empty() {
        return 0.0;
    }
    let p = m / hyp.len() as f64;
    let r = m / refr.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let mut chunks = 1usize;
    for pair in matches.windows(2) {
        let (h0, r0) = pair[0];
        let (h1, r1) = pair[1];
        if h1 != h0 + 1 || r1 != r0 + 1 {
            chunks += 1;
        }
    }
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    fmean * (1.0 - penalty)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu4,
    RougeL,
    Meteor,
}

impl Metric {
    pub fn score(&self, hypothesis: &str, reference: &str) -> f64 {
        match self {
            Metric::Bleu4 => bleu4(hypothesis, reference),
            Metric::RougeL => rouge_l(hypothesis, reference),
            Metric::Meteor => meteor(hypothesis, reference),
        }
    }
}

/// Best score among candidates; the Top-k aggregation primitive.
pub fn best_of_k(candidates: &[String], reference: &str, metric: Metric) -> f64 {
    candidates
        .iter()
        .map(|c| metric.score(c, reference))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

impl MetricScores {
    pub fn of(hypothesis: &str, reference: &str) -> Self {
        MetricScores {
            bleu4: bleu4(hypothesis, reference),
            rouge_l: rouge_l(hypothesis, reference),
            meteor: meteor(hypothesis, reference),
        }
    }

    pub fn componentwise_ge(&self, other: &MetricScores) -> bool {
        self.bleu4 >= other.bleu4 && self.rouge_l >= other.rouge_l && self.meteor >= other.meteor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutageScores {
    pub top1: MetricScores,
    pub top5: MetricScores,
    pub generation_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_outage: BTreeMap<String, OutageScores>,
    pub corpus_mean_top1: MetricScores,
    pub corpus_mean_top5: MetricScores,
    pub mean_generation_time_secs: f64,
    pub finetune_time_secs: Option<f64>,
}

/// Scores one system's candidates against references. Top1 uses the
/// first candidate, Top5 the best of all candidates; corpus means are
/// unweighted.
pub fn evaluate(
    system_outputs: &BTreeMap<String, Vec<String>>,
    references: &BTreeMap<String, String>,
    timings_secs: &BTreeMap<String, f64>,
) -> Result<EvalReport, EvalError> {
    let mut per_outage = BTreeMap::new();
    let mut sum1 = MetricScores::default();
    let mut sum5 = MetricScores::default();
    let mut time_sum = 0.0;
    for (outage_id, candidates) in system_outputs {
        let reference = references
            .get(outage_id)
            .ok_or_else(|| EvalError::MissingReference(outage_id.clone()))?;
        if candidates.is_empty() {
            return Err(EvalError::EmptyCandidates(outage_id.clone()));
        }
        let top1 = MetricScores::of(&candidates[0], reference);
        let top5 = MetricScores {
            bleu4: best_of_k(candidates, reference, Metric::Bleu4),
            rouge_l: best_of_k(candidates, reference, Metric::RougeL),
            meteor: best_of_k(candidates, reference, Metric::Meteor),
        };
        debug_assert!(top5.componentwise_ge(&top1));
        let generation_time_secs = timings_secs.get(outage_id).copied().unwrap_or(0.0);
        sum1.bleu4 += top1.bleu4;
        sum1.rouge_l += top1.rouge_l;
        sum1.meteor += top1.meteor;
        sum5.bleu4 += top5.bleu4;
        sum5.rouge_l += top5.rouge_l;
        sum5.meteor += top5.meteor;
        time_sum += generation_time_secs;
        per_outage.insert(
            outage_id.clone(),
            OutageScores {
                top1,
                top5,
                generation_time_secs,
            },
        );
    }
    let n = per_outage.len().max(1) as f64;
    Ok(EvalReport {
        per_outage,
        corpus_mean_top1: MetricScores {
            bleu4: sum1.bleu4 / n,
            rouge_l: sum1.rouge_l / n,
            meteor: sum1.meteor / n,
        },
        corpus_mean_top5: MetricScores {
            bleu4: sum5.bleu4 / n,
            rouge_l: sum5.rouge_l / n,
            meteor: sum5.meteor / n,
        },
        mean_generation_time_secs: time_sum / n,
        finetune_time_secs: None,
    })
}

/// Renders named reports as an aligned plain-text table
/// (Model x {BLEU-4, ROUGE-L, METEOR} x {Top1, Top5}).
pub fn render_table(rows: &[(String, &EvalReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
        "Model", "BLEU4-T1", "BLEU4-T5", "ROUGEL-T1", "ROUGEL-T5", "METEOR-T1", "METEOR-T5"
    ));
    for (name, report) in rows {
        out.push_str(&format!(
            "{:<20} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
            name,
            report.corpus_mean_top1.bleu4,
            report.corpus_mean_top5.bleu4,
            report.corpus_mean_top1.rouge_l,
            report.corpus_mean_top5.rouge_l,
            report.corpus_mean_top1.meteor,
            report.corpus_mean_top5.meteor,
        ));
    }
    out
}

/// Raters x systems rank matrix; each row must be a permutation of 1..=k.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankMatrix {
    pub rows: Vec<Vec<u32>>,
}

impl RankMatrix {
    pub fn systems(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection formula.
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEFFS[0];
    for (i, c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma P(a, x), series for x < a+1 and
/// continued fraction otherwise.
fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // Series expansion.
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..500 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-15 {
                break;
            }
        }
        sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    } else {
        // Lentz continued fraction for Q(a, x).
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-15 {
                break;
            }
        }
        let q = (-x + a * x.ln() - ln_gamma(a)).exp() * h;
        1.0 - q
    }
}

/// Survival function of the chi-square distribution with `df` degrees
/// of freedom.
pub fn chi_square_sf(x: f64, df: usize) -> f64 {
    (1.0 - gamma_p(df as f64 / 2.0, x / 2.0)).clamp(0.0, 1.0)
}

/// Friedman rank test: Q = 12N/(k(k+1)) * sum_j (Rbar_j - (k+1)/2)^2,
/// with the p-value from chi-square with k-1 degrees of freedom.
pub fn friedman_test(ranks: &RankMatrix, alpha: f64) -> Result<FriedmanResult, EvalError> {
    let n = ranks.rows.len();
    let k = ranks.systems();
    if n < 2 || k < 2 {
        return Err(EvalError::DegenerateRankMatrix);
    }
    for (idx, row) in ranks.rows.iter().enumerate() {
        let mut seen = vec![false; k];
        let valid = row.len() == k
            && row.iter().all(|&r| {
                let ok = (1..=k as u32).contains(&r) && !seen[(r - 1) as usize];
                if ok {
                    seen[(r - 1) as usize] = true;
                }
                ok
            });
        if !valid {
            return Err(EvalError::InvalidRanks { row: idx, k });
        }
    }
    let mean_rank = (k as f64 + 1.0) / 2.0;
    let statistic: f64 = (0..k)
        .map(|j| {
            let col_mean =
                ranks.rows.iter().map(|row| row[j] as f64).sum::<f64>() / n as f64;
            (col_mean - mean_rank).powi(2)
        })
        .sum::<f64>()
        * 12.0
        * n as f64
        / (k as f64 * (k as f64 + 1.0));
    let p_value = chi_square_sf(statistic, k - 1);
    Ok(FriedmanResult {
        statistic,
        p_value,
        reject: p_value < alpha,
    })
}

/// Corpus-level quantities mirroring the measurement study: impact
/// fractions, relevant-incident distribution, and time-to-summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyStats {
    pub large_impact_fraction: f64,
    pub persistent_to_intermittent_ratio: f64,
    pub relevant_incident_mean: f64,
    pub relevant_incident_cdf: Vec<(usize, f64)>,
    pub tts_median_units: f64,
    pub tts_over_2units_fraction: f64,
    /// Outages skipped for missing timestamps.
    pub excluded_outages: usize,
}

fn median(sorted: &[f64]) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 0 {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    }
}

/// Computes study statistics over a corpus. Relevant-incident counts
/// come from `scopes` when given, otherwise from seeds plus stored
/// links.
pub fn study_stats(
    corpus: &Corpus,
    scopes: Option<&BTreeMap<String, ScopeResult>>,
    unit: Duration,
) -> StudyStats {
    let n = corpus.outages.len();
    let large = corpus
        .outages
        .values()
        .filter(|o| o.large_customer_impact)
        .count();
    let persistent = corpus
        .outages
        .values()
        .filter(|o| o.impact_persistence == crate::domain::ImpactPersistence::Persistent)
        .count();
    let intermittent = n - persistent;

    let mut counts: Vec<usize> = corpus
        .outages
        .values()
        .map(|o| match scopes.and_then(|s| s.get(&o.id)) {
            Some(scope) => scope.incidents.len(),
            None => {
                let mut ids: std::collections::BTreeSet<&str> =
                    o.seed_incident_ids.iter().map(String::as_str).collect();
                for link in &corpus.links {
                    if ids.contains(link.a.as_str()) {
                        ids.insert(&link.b);
                    } else if ids.contains(link.b.as_str()) {
                        ids.insert(&link.a);
                    }
                }
                ids.len()
            }
        })
        .collect();
    counts.sort_unstable();
    let mean = if counts.is_empty() {
        0.0
    } else {
        counts.iter().sum::<usize>() as f64 / counts.len() as f64
    };
    let mut cdf = Vec::new();
    for (i, &c) in counts.iter().enumerate() {
        if i + 1 == counts.len() || counts[i + 1] != c {
            cdf.push((c, (i + 1) as f64 / counts.len() as f64));
        }
    }

    let mut tts: Vec<f64> = Vec::new();
    let mut excluded = 0usize;
    for o in corpus.outages.values() {
        match compute_tts(o, unit) {
            Ok(v) => tts.push(v),
            Err(_) => excluded += 1,
        }
    }
    tts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let over2 = tts.iter().filter(|&&v| v > 2.0).count();

    StudyStats {
        large_impact_fraction: if n == 0 { 0.0 } else { large as f64 / n as f64 },
        persistent_to_intermittent_ratio: if intermittent == 0 {
            f64::INFINITY
        } else {
            persistent as f64 / intermittent as f64
        },
        relevant_incident_mean: mean,
        relevant_incident_cdf: cdf,
        tts_median_units: median(&tts),
        tts_over_2units_fraction: if tts.is_empty() {
            0.0
        } else {
            over2 as f64 / tts.len() as f64
        },
        excluded_outages: excluded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_rules() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("HTTP 5xx errors!"), vec!["http", "5xx", "errors"]);
        let tokens = tokenize("db timeout 503");
        assert_eq!(tokenize(&tokens.join(" ")), tokens);
    }

    #[test]
    fn bleu_identity_and_empty() {
        assert_eq!(bleu4("the email service is down", "the email service is down"), 1.0);
        assert_eq!(bleu4("", "anything"), 0.0);
        assert_eq!(bleu4("two tokens", "two tokens"), 1.0);
    }

    #[test]
    fn bleu_no_unigram_overlap_is_zero() {
        assert_eq!(bleu4("alpha beta", "gamma delta"), 0.0);
    }

    #[test]
    fn rouge_identity_disjoint() {
        assert_eq!(rouge_l("a b c", "a b c"), 1.0);
        assert_eq!(rouge_l("x y", "p q"), 0.0);
    }

    #[test]
    fn rouge_worked_example() {
        // LCS("a b c d", "a c b d") = 3, P = R = 0.75.
        let score = rouge_l("a b c d", "a c b d");
        assert!((score - 0.75).abs() < 1e-12);
    }

    #[test]
    fn meteor_identity_six_tokens() {
        let text = "database shard failover caused login errors";
        let expected = 1.0 - 0.5 / 216.0;
        assert!((meteor(text, text) - expected).abs() < 1e-12);
    }

    #[test]
    fn meteor_disjoint_zero() {
        assert_eq!(meteor("alpha beta", "gamma delta"), 0.0);
    }

    #[test]
    fn meteor_stemming_matches() {
        // Both pairs align through the suffix stemmer: one chunk of 2.
        let score = meteor("errors occurred", "error occurring");
        let expected = 1.0 * (1.0 - 0.5 * (1.0f64 / 2.0).powi(3));
        assert!((score - expected).abs() < 1e-12, "got {score}");
    }

    #[test]
    fn best_of_k_is_max() {
        let cands = vec!["a b".to_string(), "a b c".to_string(), "x".to_string()];
        let best = best_of_k(&cands, "a b c", Metric::RougeL);
        let each: Vec<f64> = cands.iter().map(|c| rouge_l(c, "a b c")).collect();
        assert_eq!(best, each.iter().cloned().fold(0.0, f64::max));
        assert_eq!(best, 1.0);
    }

    #[test]
    fn evaluate_identity_candidate() {
        let mut outputs = BTreeMap::new();
        outputs.insert("o1".to_string(), vec!["network down in region".to_string()]);
        let mut refs = BTreeMap::new();
        refs.insert("o1".to_string(), "network down in region".to_string());
        let report = evaluate(&outputs, &refs, &BTreeMap::new()).unwrap();
        assert_eq!(report.corpus_mean_top1.bleu4, 1.0);
        assert_eq!(report.corpus_mean_top1.rouge_l, 1.0);
        assert!(report.corpus_mean_top1.meteor > 0.99);
    }

    #[test]
    fn evaluate_missing_reference() {
        let mut outputs = BTreeMap::new();
        outputs.insert("o1".to_string(), vec!["x".to_string()]);
        assert!(matches!(
            evaluate(&outputs, &BTreeMap::new(), &BTreeMap::new()),
            Err(EvalError::MissingReference(_))
        ));
    }

    #[test]
    fn friedman_identical_rankings() {
        let ranks = RankMatrix {
            rows: vec![vec![1, 2, 3, 4, 5]; 10],
        };
        let result = friedman_test(&ranks, 0.05).unwrap();
        assert!((result.statistic - 40.0).abs() < 1e-12);
        assert!(result.reject);
    }

    #[test]
    fn friedman_rejects_bad_rows() {
        let ranks = RankMatrix {
            rows: vec![vec![1, 2, 3], vec![1, 1, 3]],
        };
        assert!(matches!(
            friedman_test(&ranks, 0.05),
            Err(EvalError::InvalidRanks { row: 1, .. })
        ));
    }

    #[test]
    fn chi_square_known_quantiles() {
        // Published critical values: P(X > x) = 0.05.
        for (df, crit) in [(1, 3.841), (4, 9.488), (9, 16.919)] {
            let p = chi_square_sf(crit, df);
            assert!((p - 0.05).abs() < 1e-3, "df={df}: {p}");
        }
    }
}
