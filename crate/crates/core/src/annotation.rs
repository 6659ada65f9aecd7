//! Human code assignment: seeded note sessions, an append-only record
//! store, code search, and agreement reports against the reference codes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CodeTitleTable, Document};
use crate::metrics::{set_agreement, Agreement, LabelMatrix, MacroAxis, ScoreMatrix, DEFAULT_THRESHOLD};
use crate::numerics::Rng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub annotator_id: String,
    pub note_id: String,
    pub codes: BTreeSet<String>,
    /// UTC seconds.
    pub started_at: i64,
    pub submitted_at: i64,
}

impl AnnotationRecord {
    pub fn validate(&self, table: &CodeTitleTable) -> Result<()> {
        if self.annotator_id.trim().is_empty() {
            return Err(Error::Annotation("annotator_id is empty".into()));
        }
        if self.submitted_at < self.started_at {
            return Err(Error::Annotation(format!(
                "submitted_at {} is before started_at {}",
                self.submitted_at, self.started_at
            )));
        }
        if let Some(code) = self.codes.iter().find(|c| table.index_of(c).is_none()) {
            return Err(Error::UnknownCode(code.clone()));
        }
        Ok(())
    }
}

type RecordKey = (String, String);

/// Append-only JSONL log of records; the last record for an
/// `(annotator, note)` pair wins.
#[derive(Debug)]
pub struct AnnotationStore {
    path: PathBuf,
    file: File,
    records: BTreeMap<RecordKey, AnnotationRecord>,
    appended: usize,
}

impl AnnotationStore {
    /// Opens (or creates) the log and replays it. A final line without a
    /// newline is an interrupted, never-acknowledged write and is cut off.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut bytes = if path.exists() { fs::read(&path)? } else { Vec::new() };
        let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if complete < bytes.len() {
            bytes.truncate(complete);
            let f = OpenOptions::new().write(true).open(&path)?;
            f.set_len(complete as u64)?;
            f.sync_all()?;
        }
        let mut records = BTreeMap::new();
        let mut appended = 0;
        for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let rec: AnnotationRecord = serde_json::from_slice(line).map_err(|e| Error::Parse {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            appended += 1;
            records.insert((rec.annotator_id.clone(), rec.note_id.clone()), rec);
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(AnnotationStore {
            path,
            file,
            records,
            appended,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes and syncs the record before updating the in-memory view.
    pub fn append(&mut self, record: AnnotationRecord) -> Result<()> {
        let mut line = serde_json::to_vec(&record)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        self.appended += 1;
        self.records
            .insert((record.annotator_id.clone(), record.note_id.clone()), record);
        Ok(())
    }

    /// Distinct `(annotator, note)` records.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Lines in the log, resubmissions included.
    pub fn appended(&self) -> usize {
        self.appended
    }

    pub fn records(&self) -> impl Iterator<Item = &AnnotationRecord> {
        self.records.values()
    }

    pub fn get(&self, annotator: &str, note: &str) -> Option<&AnnotationRecord> {
        self.records.get(&(annotator.to_string(), note.to_string()))
    }

    pub fn by_annotator(&self) -> BTreeMap<String, BTreeMap<String, BTreeSet<String>>> {
        group_by_annotator(self.records.values())
    }
}

/// Reads a record log (same format as the store), last record winning.
pub fn read_annotation_file(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut latest: BTreeMap<RecordKey, AnnotationRecord> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        latest.insert((rec.annotator_id.clone(), rec.note_id.clone()), rec);
    }
    Ok(latest.into_values().collect())
}

pub fn group_by_annotator<'r>(records: impl IntoIterator<Item = &'r AnnotationRecord>) -> BTreeMap<String, BTreeMap<String, BTreeSet<String>>> {
    let mut out: BTreeMap<String, BTreeMap<String, BTreeSet<String>>> = BTreeMap::new();
    for r in records {
        out.entry(r.annotator_id.clone())
            .or_default()
            .insert(r.note_id.clone(), r.codes.clone());
    }
    out
}

/// Seeded sample without replacement. It depends only on the ids and the
/// seed, so every annotator gets the same queue.
pub fn sample_notes(note_ids: &[String], size: usize, seed: u64) -> Result<Vec<String>> {
    if size > note_ids.len() {
        return Err(Error::Annotation(format!(
            "sample size {size} exceeds the {} available notes",
            note_ids.len()
        )));
    }
    let mut ids = note_ids.to_vec();
    Rng::new(seed).shuffle(&mut ids);
    ids.truncate(size);
    Ok(ids)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AnnotationSession {
    pub annotator_id: String,
    pub queue: Vec<String>,
    pub completed: usize,
}

impl AnnotationSession {
    pub fn next_note(&self) -> Option<&str> {
        self.queue.get(self.completed).map(String::as_str)
    }

    pub fn is_finished(&self) -> bool {
        self.completed >= self.queue.len()
    }

    fn position(&self, note: &str) -> Option<usize> {
        self.queue.iter().position(|n| n == note)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeHit {
    pub code: String,
    pub title: String,
}

/// Case-insensitive search over codes and concatenated titles.
///
/// Exact code matches come first, then code-prefix matches, then any other
/// substring match in the code or title, each group in table order. An
/// empty query lists the first `limit` codes.
pub fn search_codes(table: &CodeTitleTable, query: &str, limit: usize) -> Vec<CodeHit> {
    let q = query.trim().to_lowercase();
    let mut tiers: [Vec<CodeHit>; 3] = Default::default();
    for entry in table.entries() {
        let code = entry.code.to_lowercase();
        let title = entry.concatenated();
        let tier = if q.is_empty() || code == q {
            0
        } else if code.starts_with(&q) {
            1
        } else if code.contains(&q) || title.to_lowercase().contains(&q) {
            2
        } else {
            continue;
        };
        tiers[tier].push(CodeHit {
            code: entry.code.clone(),
            title,
        });
    }
    tiers.into_iter().flatten().take(limit).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Annotator,
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub name: String,
    pub kind: RowKind,
    pub notes: usize,
    /// Agreement with the reference codes; neither side is ground truth.
    pub agreement_with_reference: Agreement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub rows: Vec<AgreementRow>,
    pub threshold: f64,
    pub macro_axis: MacroAxis,
}

/// Model scores keyed by note id; columns follow the code table order.
#[derive(Clone, Debug, PartialEq)]
pub struct NoteScores {
    pub note_ids: Vec<String>,
    pub scores: ScoreMatrix,
}

impl NoteScores {
    pub fn row_of(&self, note: &str) -> Option<usize> {
        self.note_ids.iter().position(|n| n == note)
    }
}

/// Table-style agreement: one row per annotator over the notes they coded,
/// plus a model row over every annotated note with scores thresholded at
/// `threshold` (score ≥ threshold counts as assigned).
pub fn agreement_report(
    annotations: &BTreeMap<String, BTreeMap<String, BTreeSet<String>>>,
    references: &BTreeMap<String, BTreeSet<String>>,
    model: Option<&NoteScores>,
    table: &CodeTitleTable,
    threshold: f64,
    axis: MacroAxis,
) -> Result<AgreementReport> {
    let reference_row = |note: &str| -> Result<Vec<u8>> {
        let codes = references
            .get(note)
            .ok_or_else(|| Error::Annotation(format!("no reference codes for note `{note}`")))?;
        table.label_vector(codes)
    };
    let mut rows = Vec::new();
    let mut subset = BTreeSet::new();
    for (annotator, notes) in annotations {
        let mut a = Vec::with_capacity(notes.len());
        let mut r = Vec::with_capacity(notes.len());
        for (note, codes) in notes {
            r.push(reference_row(note)?);
            a.push(table.label_vector(codes)?);
            subset.insert(note.clone());
        }
        rows.push(AgreementRow {
            name: annotator.clone(),
            kind: RowKind::Annotator,
            notes: notes.len(),
            agreement_with_reference: agreement_of(&a, &r, table.len(), axis)?,
        });
    }
    if let Some(model) = model {
        if model.scores.cols() != table.len() {
            return Err(Error::Shape {
                op: "agreement_report",
                left: vec![table.len()],
                right: vec![model.scores.cols()],
            });
        }
        let binary = model.scores.binarize(threshold);
        let mut a = Vec::with_capacity(subset.len());
        let mut r = Vec::with_capacity(subset.len());
        for note in &subset {
            let i = model
                .row_of(note)
                .ok_or_else(|| Error::Annotation(format!("no model scores for note `{note}`")))?;
            a.push(binary.row(i).to_vec());
            r.push(reference_row(note)?);
        }
        rows.push(AgreementRow {
            name: "model".into(),
            kind: RowKind::Model,
            notes: subset.len(),
            agreement_with_reference: agreement_of(&a, &r, table.len(), axis)?,
        });
    }
    Ok(AgreementReport {
        rows,
        threshold,
        macro_axis: axis,
    })
}

fn agreement_of(a: &[Vec<u8>], r: &[Vec<u8>], cols: usize, axis: MacroAxis) -> Result<Agreement> {
    let a = LabelMatrix::new(a.len(), cols, a.concat())?;
    let r = LabelMatrix::new(r.len(), cols, r.concat())?;
    set_agreement(&a, &r, axis)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub sample_size: usize,
    pub seed: u64,
    pub threshold: f64,
    pub macro_axis: MacroAxis,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            sample_size: 508,
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            macro_axis: MacroAxis::Label,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SubmitAck {
    pub annotator_id: String,
    pub note_id: String,
    pub completed: usize,
    pub remaining: usize,
    pub next_note: Option<String>,
}

/// Everything the annotation server needs. Reference codes stay inside;
/// only note text and the code list are handed out.
pub struct AnnotationService {
    texts: BTreeMap<String, String>,
    sample: Vec<String>,
    references: BTreeMap<String, BTreeSet<String>>,
    table: CodeTitleTable,
    model: Option<NoteScores>,
    config: ServiceConfig,
    sessions: BTreeMap<String, AnnotationSession>,
    store: AnnotationStore,
}

impl AnnotationService {
    /// Samples the shared queue from `notes` (in the given order) and
    /// restores sessions from the store.
    pub fn new(
        notes: &[Document],
        table: CodeTitleTable,
        model: Option<NoteScores>,
        store: AnnotationStore,
        config: ServiceConfig,
    ) -> Result<Self> {
        let ids: Vec<String> = notes.iter().map(|d| d.id.clone()).collect();
        let sample = sample_notes(&ids, config.sample_size, config.seed)?;
        let mut service = AnnotationService {
            texts: notes.iter().map(|d| (d.id.clone(), d.text.clone())).collect(),
            sample,
            references: notes.iter().map(|d| (d.id.clone(), d.codes.clone())).collect(),
            table,
            model,
            config,
            sessions: BTreeMap::new(),
            store,
        };
        let annotators: BTreeSet<String> = service.store.records().map(|r| r.annotator_id.clone()).collect();
        for a in annotators {
            let mut session = service.fresh_session(&a);
            while let Some(next) = session.next_note() {
                if service.store.get(&a, next).is_none() {
                    break;
                }
                session.completed += 1;
            }
            service.sessions.insert(a, session);
        }
        Ok(service)
    }

    fn fresh_session(&self, annotator: &str) -> AnnotationSession {
        AnnotationSession {
            annotator_id: annotator.to_string(),
            queue: self.sample.clone(),
            completed: 0,
        }
    }

    pub fn table(&self) -> &CodeTitleTable {
        &self.table
    }

    pub fn store(&self) -> &AnnotationStore {
        &self.store
    }

    pub fn create_session(&mut self, annotator: &str) -> Result<&AnnotationSession> {
        if annotator.trim().is_empty() {
            return Err(Error::Annotation("annotator id is empty".into()));
        }
        if self.sessions.contains_key(annotator) {
            return Err(Error::Annotation(format!("annotator `{annotator}` already has a session")));
        }
        let s = self.fresh_session(annotator);
        Ok(self.sessions.entry(annotator.to_string()).or_insert(s))
    }

    pub fn session(&self, annotator: &str) -> Option<&AnnotationSession> {
        self.sessions.get(annotator)
    }

    pub fn session_or_create(&mut self, annotator: &str) -> Result<&AnnotationSession> {
        if self.sessions.contains_key(annotator) {
            return Ok(&self.sessions[annotator]);
        }
        self.create_session(annotator)
    }

    pub fn note_text(&self, id: &str) -> Option<&str> {
        self.texts.get(id).map(String::as_str)
    }

    pub fn search(&self, query: &str, limit: usize) -> Vec<CodeHit> {
        search_codes(&self.table, query, limit)
    }

    /// Persists a record, then advances the queue. Only the queue head or
    /// an already completed note may be submitted.
    pub fn submit(&mut self, record: AnnotationRecord) -> Result<SubmitAck> {
        record.validate(&self.table)?;
        let session = self
            .sessions
            .get(&record.annotator_id)
            .ok_or_else(|| Error::Annotation(format!("no session for annotator `{}`", record.annotator_id)))?;
        let pos = session
            .position(&record.note_id)
            .ok_or_else(|| Error::Annotation(format!("note `{}` is not in the session queue", record.note_id)))?;
        if pos > session.completed {
            return Err(Error::Annotation(format!(
                "note `{}` is out of order; next is `{}`",
                record.note_id,
                session.next_note().unwrap_or_default()
            )));
        }
        let advances = pos == session.completed;
        let (annotator, note) = (record.annotator_id.clone(), record.note_id.clone());
        self.store.append(record)?;
        let session = self.sessions.get_mut(&annotator).expect("checked above");
        if advances {
            session.completed += 1;
        }
        Ok(SubmitAck {
            annotator_id: annotator,
            note_id: note,
            completed: session.completed,
            remaining: session.queue.len() - session.completed,
            next_note: session.next_note().map(str::to_string),
        })
    }

    pub fn report(&self) -> Result<AgreementReport> {
        agreement_report(
            &self.store.by_annotator(),
            &self.references,
            self.model.as_ref(),
            &self.table,
            self.config.threshold,
            self.config.macro_axis,
        )
    }
}
