//! One function per subcommand. Each resolves its settings, creates the
//! run directory, writes `config.json` and then its outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use serde_json::{json, Map, Value};

use rac_core::annotation::{
    agreement_report, group_by_annotator, read_annotation_file, AnnotationService, AnnotationStore, NoteScores, ServiceConfig,
};
use rac_core::corpus::{build_title_matrix, generate_synthetic, write_documents, CodeTitleTable, Document, SyntheticConfig};
use rac_core::embeddings::{train_skipgram, EmbeddingTable, SkipGramConfig};
use rac_core::metrics::{MacroAxis, ReportMode, ScoreMatrix};
use rac_core::model::{RacConfig, RacModel};
use rac_core::numerics::Rng;
use rac_core::pipeline::{
    align_scores, encode_all, evaluate_scores_as, load_scores, preprocess, run_training, save_scores, score_documents, streams,
    DataManifest, Dataset, TrainRequest, MANIFEST_FILE,
};
use rac_core::training::{augment, TrainConfig};

use crate::config::{create_run_dir, extract, merge, read_config_file, to_map, write_resolved, CliError, CliResult};
use crate::{Cli, Command, Common};

pub const MODEL_FILE: &str = "model.ckpt";
pub const SWA_MODEL_FILE: &str = "model_swa.ckpt";
pub const SCORES_FILE: &str = "scores.ckpt";
pub const REPORT_FILE: &str = "report.json";

pub fn dispatch(cli: Cli) -> CliResult<()> {
    let c = &cli.common;
    match cli.command {
        Command::GenSynthetic(f) => gen_synthetic(c, &f),
        Command::Preprocess(a) => preprocess_cmd(c, &a),
        Command::PretrainEmbeddings(a) => pretrain(c, &a),
        Command::Augment(a) => augment_cmd(c, &a),
        Command::Train(a) => train(c, &a),
        Command::Evaluate(a) => evaluate(c, &a),
        Command::Predict(a) => predict(c, &a),
        Command::Serve(a) => serve(c, &a),
        Command::Compare(a) => compare(c, &a),
    }
}

/// Defaults, then the config file, then flags (with `--seed` applied when
/// the command has a seed).
fn resolve(common: &Common, defaults: Map<String, Value>, flags: &impl Serialize) -> CliResult<Map<String, Value>> {
    let file = common.config.as_deref().map(read_config_file).transpose()?;
    let mut overrides = to_map(flags);
    if let (Some(seed), true) = (common.seed, defaults.contains_key("seed")) {
        overrides.insert("seed".into(), json!(seed));
    }
    merge(defaults, file.as_ref(), &overrides)
}

fn setting<T: serde::de::DeserializeOwned>(settings: &Map<String, Value>, key: &str) -> CliResult<T> {
    serde_json::from_value(settings[key].clone()).map_err(|e| CliError::Usage(format!("bad value for `{key}`: {e}")))
}

fn inputs(pairs: &[(&str, Option<&Path>)]) -> Map<String, Value> {
    pairs
        .iter()
        .filter_map(|(k, p)| p.map(|p| (k.to_string(), json!(p.display().to_string()))))
        .collect()
}

fn open_data(path: &Path) -> CliResult<(DataManifest, Dataset)> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let manifest = DataManifest::load(&file).with_context(|| format!("reading {}", file.display()))?;
    let dataset = manifest.open()?;
    Ok((manifest, dataset))
}

fn split<'d>(ds: &'d Dataset, name: &str) -> CliResult<&'d [Document]> {
    match name {
        "train" => Ok(&ds.splits.train),
        "val" => Ok(&ds.splits.val),
        "test" => Ok(&ds.splits.test),
        other => Err(CliError::Usage(format!("unknown split `{other}` (expected train, val or test)"))),
    }
}

fn macro_axis(settings: &Map<String, Value>) -> CliResult<MacroAxis> {
    setting(settings, "macro_axis")
}

fn print_json(value: &impl Serialize) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn load_predictions(path: &Path, table: &CodeTitleTable) -> CliResult<NoteScores> {
    let (scores, codes) = load_scores(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(align_scores(scores, &codes, table)?)
}

fn gen_synthetic(common: &Common, flags: &crate::SyntheticFlags) -> CliResult<()> {
    let settings = resolve(common, to_map(&SyntheticConfig::default()), flags)?;
    let config: SyntheticConfig = extract(&settings, &SyntheticConfig::default())?;
    let data = generate_synthetic(&config)?;
    let dir = create_run_dir(common.out.as_deref(), "gen-synthetic")?;
    write_resolved(&dir, "gen-synthetic", Map::new(), &settings)?;
    write_documents(dir.join("documents.jsonl"), &data.documents)?;
    data.code_table.write_tsv(dir.join("codes.tsv"))?;
    data.splits.save(dir.join("splits.json"))?;
    eprintln!("wrote {} documents and {} codes to {}", data.documents.len(), data.code_table.len(), dir.display());
    Ok(())
}

fn preprocess_cmd(common: &Common, args: &crate::PreprocessArgs) -> CliResult<()> {
    let (documents, codes, splits) = match (&args.from, &args.documents, &args.codes, &args.splits) {
        (Some(dir), ..) => (dir.join("documents.jsonl"), dir.join("codes.tsv"), dir.join("splits.json")),
        (None, Some(d), Some(c), Some(s)) => (d.clone(), c.clone(), s.clone()),
        _ => return Err(CliError::Usage("give --from DIR or all of --documents, --codes and --splits".into())),
    };
    let settings = resolve(common, to_map(&json!({"min_count": 10})), &args.flags)?;
    let min_count: usize = setting(&settings, "min_count")?;
    let dir = create_run_dir(common.out.as_deref(), "preprocess")?;
    write_resolved(
        &dir,
        "preprocess",
        inputs(&[("documents", Some(&documents)), ("codes", Some(&codes)), ("splits", Some(&splits))]),
        &settings,
    )?;
    let manifest = preprocess(&documents, &codes, &splits, min_count, &dir)?;
    eprintln!("vocabulary {} written to {}", manifest.vocab_fingerprint, dir.display());
    Ok(())
}

fn pretrain(common: &Common, args: &crate::PretrainArgs) -> CliResult<()> {
    let (manifest, ds) = open_data(&args.data)?;
    let mut defaults = to_map(&SkipGramConfig::default());
    defaults.remove("min_count");
    let mut settings = resolve(common, defaults, &args.flags)?;
    // the vocabulary already applied the frequency cut-off
    settings.insert("min_count".into(), json!(manifest.min_count));
    let config: SkipGramConfig = extract(&settings, &SkipGramConfig::default())?;
    let corpus: Vec<Vec<usize>> = ds.splits.train.iter().map(|d| ds.vocab.encode(&d.text)).collect();
    let dir = create_run_dir(common.out.as_deref(), "pretrain-embeddings")?;
    write_resolved(&dir, "pretrain-embeddings", inputs(&[("data", Some(&args.data))]), &settings)?;
    let table = train_skipgram(&corpus, &ds.vocab, &config)?;
    table.export(dir.join("embeddings.ckpt"))?;
    eprintln!("embeddings {}×{} written to {}", table.vocab_size(), table.dim(), dir.display());
    Ok(())
}

fn augment_cmd(common: &Common, args: &crate::AugmentArgs) -> CliResult<()> {
    let (_, ds) = open_data(&args.data)?;
    let settings = resolve(common, to_map(&json!({"augment_fold": 3, "seed": 0})), &args.flags)?;
    let fold: usize = setting(&settings, "augment_fold")?;
    let seed: u64 = setting(&settings, "seed")?;
    let docs = augment(&ds.splits.train, fold, &mut Rng::with_stream(seed, streams::AUGMENT))?;
    let dir = create_run_dir(common.out.as_deref(), "augment")?;
    write_resolved(&dir, "augment", inputs(&[("data", Some(&args.data))]), &settings)?;
    write_documents(dir.join("train_augmented.jsonl"), &docs)?;
    eprintln!("{} training documents written to {}", docs.len(), dir.display());
    Ok(())
}

fn train(common: &Common, args: &crate::TrainArgs) -> CliResult<()> {
    let (_, ds) = open_data(&args.data)?;
    let embeddings = args
        .embeddings
        .as_deref()
        .map(|p| EmbeddingTable::import(p, &ds.vocab).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let mut model_defaults = RacConfig::new(ds.vocab.len(), ds.table.len());
    if let Some(e) = &embeddings {
        model_defaults.d = e.dim();
    }
    let mut defaults = to_map(&model_defaults);
    defaults.extend(to_map(&TrainConfig::default()));
    let mut flags = to_map(&args.model);
    flags.extend(to_map(&args.train));
    let settings = resolve(common, defaults, &flags)?;
    let model_config: RacConfig = extract(&settings, &model_defaults)?;
    let train_config: TrainConfig = extract(&settings, &TrainConfig::default())?;
    model_config.validate()?;
    train_config.validate()?;
    let train_documents = args
        .train_documents
        .as_deref()
        .map(|p| rac_core::corpus::read_documents(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;

    let dir = create_run_dir(common.out.as_deref(), "train")?;
    write_resolved(
        &dir,
        "train",
        inputs(&[
            ("data", Some(&args.data)),
            ("embeddings", args.embeddings.as_deref()),
            ("train_documents", args.train_documents.as_deref()),
        ]),
        &settings,
    )?;
    let run = run_training(
        TrainRequest {
            dataset: &ds,
            model_config,
            train_config,
            embeddings: embeddings.as_ref(),
            train_documents,
        },
        |r| {
            let val = r.val_precision.map_or("-".to_string(), |p| format!("{p:.4}"));
            eprintln!("epoch {:>3}  loss {:.5}  val P@n {val}  {:.1}s", r.epoch, r.train_loss, r.wall_time_secs);
        },
    )?;
    let (vfp, tfp) = (ds.vocab.fingerprint(), run.titles.fingerprint());
    run.outcome.best.save(dir.join(MODEL_FILE), &vfp, &tfp)?;
    if let Some(swa) = &run.outcome.swa {
        swa.save(dir.join(SWA_MODEL_FILE), &vfp, &tfp)?;
    }
    run.outcome.log.without_timing().write_jsonl(dir.join("train_log.jsonl"))?;
    eprintln!("trained on {} examples; model written to {}", run.train_examples, dir.display());
    Ok(())
}

/// Loads a model and checks it was built against this vocabulary and code table.
fn load_model(path: &Path, ds: &Dataset) -> CliResult<RacModel> {
    let (model, sidecar) = RacModel::load(path).with_context(|| format!("reading {}", path.display()))?;
    if sidecar.vocab_fingerprint != ds.vocab.fingerprint() {
        return Err(anyhow!("model {} was trained with a different vocabulary", path.display()).into());
    }
    let titles = build_title_matrix(&ds.table, &ds.vocab, model.config.n_t)?;
    if sidecar.title_fingerprint != titles.fingerprint() {
        return Err(anyhow!("model {} was trained with a different code table", path.display()).into());
    }
    Ok(model)
}

fn evaluate(common: &Common, args: &crate::EvaluateArgs) -> CliResult<()> {
    let (_, ds) = open_data(&args.data)?;
    let defaults = to_map(&json!({"split": "test", "mode": "auto", "macro_axis": "label"}));
    let settings = resolve(common, defaults, &args.flags)?;
    let docs = split(&ds, &setting::<String>(&settings, "split")?)?;
    let axis = macro_axis(&settings)?;
    let scores = match (&args.model, &args.predictions) {
        (Some(m), _) => score_documents(&load_model(m, &ds)?, docs, &ds.vocab, &ds.table)?,
        (_, Some(p)) => load_predictions(p, &ds.table)?,
        _ => unreachable!("clap requires one source"),
    };
    let mode = match setting::<String>(&settings, "mode")?.as_str() {
        "ranking" => ReportMode::Ranking,
        "agreement" => ReportMode::Agreement,
        "auto" if scores.scores.is_binary() => ReportMode::Agreement,
        "auto" => ReportMode::Ranking,
        other => return Err(CliError::Usage(format!("unknown mode `{other}` (expected auto, ranking or agreement)"))),
    };
    let report = evaluate_scores_as(&scores, docs, &ds.table, mode, axis)?;
    let dir = create_run_dir(common.out.as_deref(), "evaluate")?;
    write_resolved(
        &dir,
        "evaluate",
        inputs(&[
            ("data", Some(&args.data)),
            ("model", args.model.as_deref()),
            ("predictions", args.predictions.as_deref()),
        ]),
        &settings,
    )?;
    write_json(&dir.join(REPORT_FILE), &report)?;
    print_json(&report)
}

#[derive(Serialize)]
struct AttentionPosition<'a> {
    position: usize,
    token: &'a str,
    weight: f64,
}

#[derive(Serialize)]
struct CodeAttention<'a> {
    code: &'a str,
    score: f64,
    positions: Vec<AttentionPosition<'a>>,
}

#[derive(Serialize)]
struct NoteAttention<'a> {
    note_id: &'a str,
    codes: Vec<CodeAttention<'a>>,
}

/// Indices of the `k` largest values, largest first, lower index on ties.
fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn predict(common: &Common, args: &crate::PredictArgs) -> CliResult<()> {
    let (_, ds) = open_data(&args.data)?;
    let settings = resolve(common, to_map(&json!({"split": "test", "top_k": 0})), &args.flags)?;
    let top: usize = setting(&settings, "top_k")?;
    let model = load_model(&args.model, &ds)?;
    let owned;
    let docs: &[Document] = match &args.documents {
        Some(p) => {
            owned = rac_core::corpus::read_documents(p).with_context(|| format!("reading {}", p.display()))?;
            &owned
        }
        None => split(&ds, &setting::<String>(&settings, "split")?)?,
    };
    let titles = build_title_matrix(&ds.table, &ds.vocab, model.config.n_t)?;
    let examples = encode_all(docs, &ds.vocab, &ds.table, model.config.n_x)?;
    let codes: Vec<String> = ds.table.codes().map(str::to_string).collect();

    let dir = create_run_dir(common.out.as_deref(), "predict")?;
    write_resolved(
        &dir,
        "predict",
        inputs(&[("data", Some(&args.data)), ("model", Some(&args.model)), ("documents", args.documents.as_deref())]),
        &settings,
    )?;
    let mut data = Vec::with_capacity(docs.len() * codes.len());
    let mut attention_lines = Vec::new();
    model.for_each_prediction(&examples, &titles, |i, y, attention| {
        data.extend_from_slice(y);
        if top == 0 {
            return;
        }
        let ex = &examples[i];
        let note = NoteAttention {
            note_id: &docs[i].id,
            codes: top_k(y, top)
                .into_iter()
                .map(|j| CodeAttention {
                    code: &codes[j],
                    score: y[j],
                    positions: top_k(attention.row(j), top)
                        .into_iter()
                        .map(|p| AttentionPosition {
                            position: p,
                            token: ds.vocab.token(ex.token_ids[p]).unwrap_or(""),
                            weight: attention.row(j)[p],
                        })
                        .collect(),
                })
                .collect(),
        };
        attention_lines.push(serde_json::to_string(&note).expect("attention record serializes"));
    })?;
    let scores = NoteScores {
        note_ids: docs.iter().map(|d| d.id.clone()).collect(),
        scores: ScoreMatrix::new(docs.len(), codes.len(), data)?,
    };
    save_scores(dir.join(SCORES_FILE), &scores, &codes)?;
    if top > 0 {
        let mut text = attention_lines.join("\n");
        text.push('\n');
        fs::write(dir.join("attention.jsonl"), text)?;
    }
    eprintln!("scored {} documents into {}", docs.len(), dir.display());
    Ok(())
}

fn serve(common: &Common, args: &crate::ServeArgs) -> CliResult<()> {
    let (_, ds) = open_data(&args.data)?;
    let mut defaults = to_map(&ServiceConfig::default());
    defaults.extend(to_map(&json!({"split": "test", "host": "127.0.0.1", "port": 8080})));
    let settings = resolve(common, defaults, &args.flags)?;
    let service_config: ServiceConfig = extract(&settings, &ServiceConfig::default())?;
    let notes = split(&ds, &setting::<String>(&settings, "split")?)?;
    let model = args.predictions.as_deref().map(|p| load_predictions(p, &ds.table)).transpose()?;
    let dir = create_run_dir(common.out.as_deref(), "serve")?;
    let store_path: PathBuf = args.store.clone().unwrap_or_else(|| dir.join("annotations.jsonl"));
    write_resolved(
        &dir,
        "serve",
        inputs(&[
            ("data", Some(&args.data)),
            ("predictions", args.predictions.as_deref()),
            ("store", Some(&store_path)),
            ("assets", args.assets.as_deref()),
        ]),
        &settings,
    )?;
    let store = AnnotationStore::open(&store_path)?;
    let service = AnnotationService::new(notes, ds.table.clone(), model, store, service_config)?;
    let host: String = setting(&settings, "host")?;
    let port: u16 = setting(&settings, "port")?;
    let app = crate::server::router(crate::server::shared(service), args.assets.as_deref());
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host.as_str(), port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        eprintln!("annotation server on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}

fn compare(common: &Common, args: &crate::CompareArgs) -> CliResult<()> {
    let settings = resolve(common, to_map(&json!({"threshold": 0.5, "macro_axis": "label"})), &args.flags)?;
    let threshold: f64 = setting(&settings, "threshold")?;
    let axis = macro_axis(&settings)?;
    let table = CodeTitleTable::read_tsv(&args.codes).with_context(|| format!("reading {}", args.codes.display()))?;
    let annotations = group_by_annotator(&read_annotation_file(&args.annotations)?);
    // later records for a note replace earlier ones
    let mut references: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in read_annotation_file(&args.references)? {
        references.insert(r.note_id, r.codes);
    }
    let model = args.predictions.as_deref().map(|p| load_predictions(p, &table)).transpose()?;
    let report = agreement_report(&annotations, &references, model.as_ref(), &table, threshold, axis)?;
    let dir = create_run_dir(common.out.as_deref(), "compare")?;
    write_resolved(
        &dir,
        "compare",
        inputs(&[
            ("codes", Some(&args.codes)),
            ("annotations", Some(&args.annotations)),
            ("references", Some(&args.references)),
            ("predictions", args.predictions.as_deref()),
        ]),
        &settings,
    )?;
    write_json(&dir.join(REPORT_FILE), &report)?;
    print_json(&report)
}
