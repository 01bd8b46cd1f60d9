//! Batch subcommand implementations. Every command prints a small JSON
//! or plain-text report on stdout; diagnostics go to stderr via
//! tracing.

use std::collections::BTreeMap;
use std::path::Path;

use outagekit::backends::BackendKind;
use outagekit::domain::{validate_corpus, Corpus, OutageState};
use outagekit::eval::{evaluate, friedman_test, render_table, study_stats, EvalReport, RankMatrix};
use outagekit::scope::{assess_scope, save_model_file};
use outagekit::store::{chronological_split, SplitSpec, Store};
use outagekit::summarize::{export_finetune, generate, ContextMode};
use outagekit::synth::{generate_corpus, GenParams};

use crate::app::{self, AppError};
use crate::config::AppConfig;

fn print_json(value: &impl serde::Serialize) -> Result<(), AppError> {
    let text = serde_json::to_string_pretty(value).map_err(app::data_err)?;
    println!("{text}");
    Ok(())
}

pub fn ingest(config: &AppConfig, input: &Path) -> Result<(), AppError> {
    let mut store = app::open_store(config)?;
    let counts = if input == Path::new("-") {
        app::ingest_into(&mut store, std::io::stdin().lock())?
    } else {
        let file = std::fs::File::open(input)
            .map_err(|e| AppError::Data(format!("cannot open {}: {e}", input.display())))?;
        app::ingest_into(&mut store, std::io::BufReader::new(file))?
    };
    let violations = validate_corpus(&store.snapshot());
    if !violations.is_empty() {
        for v in &violations {
            tracing::warn!(?v, "corpus invariant violated");
        }
    }
    print_json(&serde_json::json!({
        "incidents": counts.incidents,
        "outages": counts.outages,
        "links": counts.links,
        "malformed": counts.malformed,
        "violations": violations.len(),
    }))
}

pub fn synth(
    output: &Path,
    truth_path: Option<&Path>,
    outages: Option<usize>,
    seed: Option<u64>,
) -> Result<(), AppError> {
    let mut params = GenParams::default();
    if let Some(n) = outages {
        params.n_outages = n;
    }
    if let Some(s) = seed {
        params.seed = s;
    }
    let (corpus, truth) = generate_corpus(&params).map_err(app::data_err)?;
    app::write_corpus(&corpus, output)?;
    if let Some(path) = truth_path {
        app::write_text(&truth.to_jsonl(), path)?;
    }
    print_json(&serde_json::json!({
        "outages": corpus.outages.len(),
        "incidents": corpus.incidents.len(),
        "links": corpus.links.len(),
        "seed": params.seed,
    }))
}

fn parse_ratios(text: &str) -> Result<[f64; 3], AppError> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| AppError::Config(format!("bad ratios {text:?}: {e}")))?;
    <[f64; 3]>::try_from(parts)
        .map_err(|_| AppError::Config(format!("ratios must have three parts, got {text:?}")))
}

pub fn split(input: &Path, out_dir: &Path, ratios: Option<&str>) -> Result<(), AppError> {
    let corpus = app::read_corpus(input)?;
    let mut spec = SplitSpec::default();
    if let Some(text) = ratios {
        spec.ratios = parse_ratios(text)?;
    }
    let (train, val, test) = chronological_split(&corpus, &spec)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| AppError::Data(format!("cannot create {}: {e}", out_dir.display())))?;
    for (name, part) in [("train", &train), ("validation", &val), ("test", &test)] {
        app::write_corpus(part, &out_dir.join(format!("{name}.jsonl")))?;
    }
    print_json(&serde_json::json!({
        "train_outages": train.outages.len(),
        "validation_outages": val.outages.len(),
        "test_outages": test.outages.len(),
    }))
}

pub fn link(
    config: &AppConfig,
    train: bool,
    active_only: bool,
    negative_ratio: usize,
    seed: u64,
) -> Result<(), AppError> {
    let mut store = app::open_store(config)?;
    let rules = app::load_rules(config)?;
    let graph = app::build_graph(&store)?;
    let model = if train {
        let model = app::train_model_from_store(&store, negative_ratio, seed)?;
        let path = config.model_file.as_deref().ok_or_else(|| {
            AppError::Config("model_file must be configured to train a model".into())
        })?;
        save_model_file(&model, path).map_err(app::data_err)?;
        tracing::info!(path = %path.display(), threshold = model.threshold, "model saved");
        model
    } else {
        app::load_model(config)?
    };

    let outages: Vec<_> = store
        .outages()
        .filter(|o| !active_only || o.state == OutageState::Active)
        .cloned()
        .collect();
    let mut assessed = 0usize;
    let mut skipped = 0usize;
    for outage in outages {
        match assess_scope(
            &outage,
            &store,
            &rules,
            &graph,
            &model,
            config.scope_window(),
            config.min_weight,
        ) {
            Ok(outcome) => {
                store.put_scope(outcome.scope);
                assessed += 1;
            }
            Err(e) => {
                tracing::warn!(outage = %outage.id, error = %e, "assessment skipped");
                skipped += 1;
            }
        }
    }
    store.flush()?;
    print_json(&serde_json::json!({
        "assessed": assessed,
        "skipped": skipped,
        "trained": train,
    }))
}

pub fn summarize(
    config: &AppConfig,
    outage_id: &str,
    mode: &str,
    use_title: bool,
    n: Option<usize>,
) -> Result<(), AppError> {
    let store = app::open_store(config)?;
    let corpus = store.snapshot();
    let outage = corpus
        .outages
        .get(outage_id)
        .ok_or_else(|| AppError::Data(format!("unknown outage {outage_id}")))?
        .clone();
    let mode = app::parse_mode(mode, use_title)?;
    let scope = app::scope_for(&store, &corpus, &outage);
    let context = app::context_for_outage(&corpus, &scope, &outage, mode, config.max_chars)?;
    let ir_train = match config.backend.kind {
        BackendKind::IrBaseline => app::ir_examples(&store, &corpus, mode, config.max_chars),
        _ => Vec::new(),
    };
    let backend = app::make_backend(&config.backend, ir_train)?;
    let n = n.unwrap_or(config.n_candidates);
    let candidates =
        generate(&context, backend.as_ref(), n, &config.generation).map_err(app::data_err)?;
    print_json(&serde_json::json!({
        "outage_id": outage_id,
        "incident_count": context.incident_count,
        "truncated": context.truncated,
        "candidates": candidates,
    }))
}

fn pick_split(corpus: &Corpus, which: &str) -> Result<Corpus, AppError> {
    if which == "all" {
        return Ok(corpus.clone());
    }
    let (train, val, test) = chronological_split(corpus, &SplitSpec::default())?;
    match which {
        "train" => Ok(train),
        "validation" | "val" => Ok(val),
        "test" => Ok(test),
        other => Err(AppError::Config(format!(
            "unknown split {other:?} (expected train, validation, test, or all)"
        ))),
    }
}

pub fn export(
    config: &AppConfig,
    output: &Path,
    mode: &str,
    use_title: bool,
    which_split: &str,
) -> Result<(), AppError> {
    let store = app::open_store(config)?;
    let corpus = pick_split(&store.snapshot(), which_split)?;
    let mode = app::parse_mode(mode, use_title)?;
    let scopes: BTreeMap<String, outagekit::scope::ScopeResult> = corpus
        .outages
        .values()
        .map(|o| (o.id.clone(), app::scope_for(&store, &corpus, o)))
        .collect();
    let (records, skipped) =
        export_finetune(&corpus, &scopes, mode, config.max_chars).map_err(app::data_err)?;
    let mut text = String::new();
    for record in &records {
        text.push_str(&record.to_export_line());
        text.push('\n');
    }
    app::write_text(&text, output)?;
    print_json(&serde_json::json!({
        "exported": records.len(),
        "skipped": skipped,
    }))
}

fn system_report(
    system: &str,
    config: &AppConfig,
    store: &Store,
    train: &Corpus,
    test: &Corpus,
    mode: ContextMode,
    n: usize,
) -> Result<(BTreeMap<String, Vec<String>>, BTreeMap<String, f64>), AppError> {
    let backend: Box<dyn outagekit::backends::GenerationBackend> = match system {
        "mock" => Box::new(outagekit::backends::ExtractiveMock),
        "concat" => Box::new(outagekit::backends::ConcatBackend),
        "ir" => Box::new(outagekit::backends::IrBackend {
            train: app::ir_examples(store, train, mode, config.max_chars),
        }),
        "remote" => app::make_backend(&config.backend, Vec::new())?,
        other => {
            return Err(AppError::Config(format!(
                "unknown system {other:?} (expected mock, ir, concat, or remote)"
            )))
        }
    };
    let mut outputs = BTreeMap::new();
    let mut timings = BTreeMap::new();
    for outage in test.outages.values() {
        let scope = app::scope_for(store, test, outage);
        let context = match app::context_for_outage(test, &scope, outage, mode, config.max_chars) {
            Ok(c) => c,
            Err(_) => continue,
        };
        let candidates =
            generate(&context, backend.as_ref(), n, &config.generation).map_err(app::data_err)?;
        timings.insert(
            outage.id.clone(),
            candidates.first().map_or(0.0, |c| c.latency_secs),
        );
        outputs.insert(
            outage.id.clone(),
            candidates.into_iter().map(|c| c.text).collect(),
        );
    }
    Ok((outputs, timings))
}

pub fn eval(config: &AppConfig, systems: &str, mode: &str, n: Option<usize>) -> Result<(), AppError> {
    let store = app::open_store(config)?;
    let corpus = store.snapshot();
    let (train, _val, test) = chronological_split(&corpus, &SplitSpec::default())?;
    let mode = app::parse_mode(mode, false)?;
    let n = n.unwrap_or(config.n_candidates);

    let references: BTreeMap<String, String> = test
        .outages
        .values()
        .filter(|o| o.state != OutageState::Active)
        .map(|o| {
            let text = match mode {
                ContextMode::Title => o.title.clone(),
                _ => o.summary.clone(),
            };
            (o.id.clone(), text)
        })
        .filter(|(_, text)| !text.is_empty())
        .collect();
    if references.is_empty() {
        return Err(AppError::Data(
            "test split has no outages with references".into(),
        ));
    }

    let names: Vec<&str> = systems.split(',').map(str::trim).collect();
    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    for name in &names {
        let (mut outputs, timings) =
            system_report(name, config, &store, &train, &test, mode, n)?;
        outputs.retain(|id, _| references.contains_key(id));
        let report = evaluate(&outputs, &references, &timings).map_err(app::data_err)?;
        reports.push((name.to_string(), report));
    }

    let rows: Vec<(String, &EvalReport)> = reports
        .iter()
        .map(|(name, report)| (name.clone(), report))
        .collect();
    print!("{}", render_table(&rows));

    // Friedman across systems on Top1 ROUGE-L, one row per outage.
    if reports.len() >= 2 {
        let shared_ids: Vec<&String> = references
            .keys()
            .filter(|id| reports.iter().all(|(_, r)| r.per_outage.contains_key(*id)))
            .collect();
        if shared_ids.len() >= 2 {
            let rows: Vec<Vec<u32>> = shared_ids
                .iter()
                .map(|id| {
                    let scores: Vec<f64> = reports
                        .iter()
                        .map(|(_, r)| r.per_outage[*id].top1.rouge_l)
                        .collect();
                    let mut order: Vec<usize> = (0..scores.len()).collect();
                    order.sort_by(|&x, &y| scores[y].partial_cmp(&scores[x]).unwrap());
                    let mut ranks = vec![0u32; scores.len()];
                    for (rank, &system) in order.iter().enumerate() {
                        ranks[system] = rank as u32 + 1;
                    }
                    ranks
                })
                .collect();
            let result =
                friedman_test(&RankMatrix { rows }, 0.05).map_err(app::data_err)?;
            println!(
                "Friedman (Top1 ROUGE-L): Q = {:.4}, p = {:.6}, reject at 0.05: {}",
                result.statistic, result.p_value, result.reject
            );
        }
    }
    Ok(())
}

pub fn stats(config: &AppConfig) -> Result<(), AppError> {
    let store = app::open_store(config)?;
    let corpus = store.snapshot();
    let scopes: BTreeMap<String, outagekit::scope::ScopeResult> = store
        .scopes()
        .map(|s| (s.outage_id.clone(), s.clone()))
        .collect();
    let scope_ref = (!scopes.is_empty()).then_some(&scopes);
    let stats = study_stats(&corpus, scope_ref, config.report_unit());
    print_json(&stats)
}

pub fn serve(config: AppConfig, addr: Option<String>) -> Result<(), AppError> {
    crate::server::serve(config, addr)
}
