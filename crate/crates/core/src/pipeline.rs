//! File-level glue shared by the command line, the bindings and the tests:
//! the preprocessed-data manifest, score-matrix files and the end-to-end
//! train/evaluate steps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotation::NoteScores;
use crate::corpus::{
    build_title_matrix, encode_document, load_dataset, split_dataset, CodeTitleTable, Document, EncodedExample, SplitManifest,
    Splits, TitleMatrix, Vocabulary,
};
use crate::embeddings::EmbeddingTable;
use crate::metrics::{full_report_with, LabelMatrix, MacroAxis, MetricsReport, ReportMode, ScoreMatrix, DEFAULT_THRESHOLD};
use crate::model::{RacConfig, RacModel};
use crate::numerics::{Checkpoint, Rng, Tensor};
use crate::training::{augment, train_with_callback, EpochRecord, TrainConfig, TrainOutcome};
use crate::{Error, Result};

pub const VOCAB_FILE: &str = "vocab.json";
pub const MANIFEST_FILE: &str = "data.json";

/// RNG streams derived from a run seed, one per consumer.
pub mod streams {
    pub const MODEL_INIT: u64 = 10;
    pub const AUGMENT: u64 = 11;
}

/// Output of `preprocess`: where the inputs live and the vocabulary built
/// from the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub documents: PathBuf,
    pub codes: PathBuf,
    pub splits: PathBuf,
    pub vocab: PathBuf,
    pub min_count: usize,
    pub vocab_fingerprint: String,
    pub code_table_fingerprint: String,
}

pub struct Dataset {
    pub table: CodeTitleTable,
    pub vocab: Vocabulary,
    pub splits: Splits,
}

impl DataManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Loads everything and checks the vocabulary is the one recorded.
    pub fn open(&self) -> Result<Dataset> {
        let (docs, table) = load_dataset(&self.documents, &self.codes)?;
        let splits = split_dataset(&docs, &SplitManifest::load(&self.splits)?)?;
        let vocab = Vocabulary::load(&self.vocab)?;
        let found = vocab.fingerprint();
        if found != self.vocab_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.vocab_fingerprint.clone(),
                found,
            });
        }
        Ok(Dataset { table, vocab, splits })
    }
}

/// Builds the vocabulary from the training split and writes `vocab.json`
/// and `data.json` into `out_dir`.
pub fn preprocess(documents: &Path, codes: &Path, splits: &Path, min_count: usize, out_dir: &Path) -> Result<DataManifest> {
    let (docs, table) = load_dataset(documents, codes)?;
    let parts = split_dataset(&docs, &SplitManifest::load(splits)?)?;
    let vocab = Vocabulary::build(&parts.train, min_count)?;
    fs::create_dir_all(out_dir)?;
    let vocab_path = out_dir.join(VOCAB_FILE);
    vocab.save(&vocab_path)?;
    let manifest = DataManifest {
        documents: fs::canonicalize(documents)?,
        codes: fs::canonicalize(codes)?,
        splits: fs::canonicalize(splits)?,
        vocab: fs::canonicalize(&vocab_path)?,
        min_count,
        vocab_fingerprint: vocab.fingerprint(),
        code_table_fingerprint: table.fingerprint(),
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn encode_all(docs: &[Document], vocab: &Vocabulary, table: &CodeTitleTable, n_x: usize) -> Result<Vec<EncodedExample>> {
    docs.iter().map(|d| encode_document(d, vocab, table, n_x)).collect()
}

pub fn label_matrix(examples: &[EncodedExample], n_y: usize) -> Result<LabelMatrix> {
    LabelMatrix::new(examples.len(), n_y, examples.iter().flat_map(|e| e.label_vector.iter().copied()).collect())
}

const SCORES_TENSOR: &str = "scores";

/// Writes scores in the checkpoint container; note ids and code names go
/// into the metadata as JSON arrays.
pub fn save_scores(path: impl AsRef<Path>, scores: &NoteScores, codes: &[String]) -> Result<()> {
    let s = &scores.scores;
    if s.rows() != scores.note_ids.len() || s.cols() != codes.len() {
        return Err(Error::Shape {
            op: "save_scores",
            left: vec![scores.note_ids.len(), codes.len()],
            right: vec![s.rows(), s.cols()],
        });
    }
    let mut ckpt = Checkpoint::new();
    ckpt.insert(SCORES_TENSOR, Tensor::new(vec![s.rows(), s.cols()], s.data().to_vec())?);
    ckpt.metadata.insert("note_ids".into(), serde_json::to_string(&scores.note_ids)?);
    ckpt.metadata.insert("codes".into(), serde_json::to_string(codes)?);
    ckpt.write(path)
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<(NoteScores, Vec<String>)> {
    let ckpt = Checkpoint::read(path)?;
    let t = ckpt.require(SCORES_TENSOR)?;
    if t.shape().len() != 2 {
        return Err(Error::Checkpoint("score tensor must be 2-D".into()));
    }
    let meta = |k: &str| -> Result<Vec<String>> {
        let raw = ckpt
            .metadata
            .get(k)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{k}`")))?;
        Ok(serde_json::from_str(raw)?)
    };
    let note_ids = meta("note_ids")?;
    let codes = meta("codes")?;
    if note_ids.len() != t.rows() || codes.len() != t.cols() {
        return Err(Error::Checkpoint("score metadata does not match the tensor shape".into()));
    }
    let scores = ScoreMatrix::new(t.rows(), t.cols(), t.data().to_vec())?;
    Ok((NoteScores { note_ids, scores }, codes))
}

/// Reorders score columns to follow `table`; every table code must be present.
pub fn align_scores(scores: NoteScores, codes: &[String], table: &CodeTitleTable) -> Result<NoteScores> {
    let aligned: Vec<&str> = table.codes().collect();
    if codes.iter().map(String::as_str).eq(aligned.iter().copied()) {
        return Ok(scores);
    }
    let cols: Vec<usize> = aligned
        .iter()
        .map(|c| {
            codes
                .iter()
                .position(|x| x == c)
                .ok_or_else(|| Error::UnknownCode(c.to_string()))
        })
        .collect::<Result<_>>()?;
    let s = &scores.scores;
    let mut data = Vec::with_capacity(s.rows() * cols.len());
    for i in 0..s.rows() {
        data.extend(cols.iter().map(|&j| s.get(i, j)));
    }
    Ok(NoteScores {
        note_ids: scores.note_ids,
        scores: ScoreMatrix::new(s.rows(), cols.len(), data)?,
    })
}

/// Model, data and settings for one training run.
pub struct TrainRequest<'d> {
    pub dataset: &'d Dataset,
    pub model_config: RacConfig,
    pub train_config: TrainConfig,
    pub embeddings: Option<&'d EmbeddingTable>,
    /// Replaces on-the-fly augmentation of the training split.
    pub train_documents: Option<Vec<Document>>,
}

pub struct TrainRun {
    pub titles: TitleMatrix,
    pub outcome: TrainOutcome,
    /// Examples actually trained on, after augmentation.
    pub train_examples: usize,
}

/// Augments (fold from the train config), encodes, initialises from the
/// seed and trains.
pub fn run_training(req: TrainRequest<'_>, on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainRun> {
    let ds = req.dataset;
    let mc = &req.model_config;
    let tc = &req.train_config;
    if mc.vocab_size != ds.vocab.len() || mc.n_y != ds.table.len() {
        return Err(Error::invalid(format!(
            "model expects vocab {} and {} codes, data has {} and {}",
            mc.vocab_size,
            mc.n_y,
            ds.vocab.len(),
            ds.table.len()
        )));
    }
    if let Some(e) = req.embeddings {
        e.check_vocabulary(&ds.vocab)?;
    }
    let titles = build_title_matrix(&ds.table, &ds.vocab, mc.n_t)?;
    let train_docs = match req.train_documents {
        Some(d) => d,
        None => augment(&ds.splits.train, tc.augment_fold, &mut Rng::with_stream(tc.seed, streams::AUGMENT))?,
    };
    let train = encode_all(&train_docs, &ds.vocab, &ds.table, mc.n_x)?;
    let val = encode_all(&ds.splits.val, &ds.vocab, &ds.table, mc.n_x)?;
    let model = RacModel::init(mc.clone(), req.embeddings, &mut Rng::with_stream(tc.seed, streams::MODEL_INIT))?;
    let outcome = train_with_callback(model, &train, &val, &titles, tc, on_epoch)?;
    Ok(TrainRun {
        titles,
        outcome,
        train_examples: train.len(),
    })
}

/// Eval-mode scores for `docs`, rows in document order.
pub fn score_documents(model: &RacModel, docs: &[Document], vocab: &Vocabulary, table: &CodeTitleTable) -> Result<NoteScores> {
    let titles = build_title_matrix(table, vocab, model.config.n_t)?;
    let examples = encode_all(docs, vocab, table, model.config.n_x)?;
    Ok(NoteScores {
        note_ids: docs.iter().map(|d| d.id.clone()).collect(),
        scores: model.predict_scores(&examples, &titles)?,
    })
}

/// Ranking report of `scores` against the codes of `docs` (matched by id).
pub fn evaluate_scores(scores: &NoteScores, docs: &[Document], table: &CodeTitleTable) -> Result<MetricsReport> {
    evaluate_scores_as(scores, docs, table, ReportMode::Ranking, MacroAxis::Label)
}

pub fn evaluate_scores_as(
    scores: &NoteScores,
    docs: &[Document],
    table: &CodeTitleTable,
    mode: ReportMode,
    axis: MacroAxis,
) -> Result<MetricsReport> {
    let mut labels = Vec::with_capacity(docs.len() * table.len());
    let mut rows = Vec::with_capacity(docs.len());
    for d in docs {
        let i = scores
            .row_of(&d.id)
            .ok_or_else(|| Error::invalid(format!("no scores for document `{}`", d.id)))?;
        rows.push(i);
        labels.extend(table.label_vector(&d.codes)?);
    }
    let labels = LabelMatrix::new(docs.len(), table.len(), labels)?;
    full_report_with(&scores.scores.select_rows(&rows), &labels, mode, DEFAULT_THRESHOLD, axis)
}
