//! Loss, sentence-permutation augmentation, Adam, weight averaging and the
//! epoch loop with early stopping on validation precision.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, EncodedExample, TitleMatrix};
use crate::metrics::{precision_at_n, LabelMatrix};
use crate::model::{code_title_embedding, Ctx, RacModel};
use crate::numerics::{Rng, Tape, Tensor};
use crate::{Error, Result};

/// Validation ranks the top this-many codes (clamped to `n_y`).
pub const VALIDATION_TOP_N: usize = 8;

const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub swa_interval_epochs: usize,
    /// Snapshot at epochs 1, 1+k, 1+2k, … when true, otherwise k, 2k, ….
    pub swa_from_first_epoch: bool,
    pub augment_fold: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 8e-5,
            batch_size: 16,
            patience: 3,
            swa_interval_epochs: 5,
            swa_from_first_epoch: true,
            augment_fold: 3,
            max_epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("swa_interval_epochs", self.swa_interval_epochs),
            ("augment_fold", self.augment_fold),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn swa_schedule(&self) -> SwaSchedule {
        SwaSchedule {
            interval: self.swa_interval_epochs,
            from_first_epoch: self.swa_from_first_epoch,
        }
    }
}

/// Mean binary cross-entropy of probabilities `y`, clamped away from 0 and 1.
pub fn bce_loss(y: &[f64], targets: &[f64]) -> f64 {
    let total: f64 = y
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    total / y.len() as f64
}

/// Same loss from pre-sigmoid scores, without forming the probabilities.
pub fn bce_loss_from_logits(logits: &[f64], targets: &[f64]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
        .sum();
    total / logits.len() as f64
}

/// Splits after `.`, `!`, `?` or a newline. Pieces are trimmed and empty
/// ones dropped.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if matches!(c, '.' | '!' | '?' | '\n') {
            let end = if c == '\n' { i } else { i + c.len_utf8() };
            out.push(&text[start..end]);
            start = i + c.len_utf8();
        }
    }
    out.push(&text[start..]);
    out.into_iter().map(str::trim).filter(|s| !s.is_empty()).collect()
}

/// Shuffles the sentence order of a note. Single-sentence notes come back
/// unchanged; otherwise sentences are re-joined with single spaces.
pub fn sentence_permute(doc: &Document, rng: &mut Rng) -> Document {
    let mut sentences = split_sentences(&doc.text);
    if sentences.len() < 2 {
        return doc.clone();
    }
    rng.shuffle(&mut sentences);
    Document {
        text: sentences.join(" "),
        ..doc.clone()
    }
}

/// The originals followed by `fold - 1` permuted copies of every note.
/// Copy `k` of note `id` is named `id#perm{k}`.
pub fn augment(docs: &[Document], fold: usize, rng: &mut Rng) -> Result<Vec<Document>> {
    if fold == 0 {
        return Err(Error::invalid("augment_fold must be at least 1"));
    }
    let mut out = docs.to_vec();
    for k in 1..fold {
        for doc in docs {
            let mut copy = sentence_permute(doc, rng);
            copy.id = format!("{}#perm{k}", doc.id);
            out.push(copy);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Parameters without a gradient are left
    /// alone, moments included. Every gradient is checked before any
    /// parameter changes.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Shape {
                        op: "adam",
                        left: p.shape().to_vec(),
                        right: g.shape().to_vec(),
                    });
                }
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient(name.clone()));
                }
            }
        }
        if self.moments.is_empty() {
            self.moments = params.iter().map(|(_, p)| (vec![0.0; p.len()], vec![0.0; p.len()])).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((_, p), g), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            let Some(g) = g else {
                continue;
            };
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwaSchedule {
    pub interval: usize,
    pub from_first_epoch: bool,
}

impl SwaSchedule {
    /// Whether a snapshot is taken at the end of 1-based `epoch`.
    pub fn is_snapshot_epoch(&self, epoch: usize) -> bool {
        if epoch == 0 || self.interval == 0 {
            return false;
        }
        if self.from_first_epoch {
            (epoch - 1).is_multiple_of(self.interval)
        } else {
            epoch.is_multiple_of(self.interval)
        }
    }
}

/// Running mean of parameter snapshots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SwaState {
    average: Vec<Tensor>,
    snapshot_count: usize,
}

impl SwaState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot_count(&self) -> usize {
        self.snapshot_count
    }

    pub fn average(&self) -> &[Tensor] {
        &self.average
    }

    /// Adds one snapshot: `avg += (w - avg) / n`.
    pub fn add_snapshot<'t>(&mut self, params: impl IntoIterator<Item = &'t Tensor>) -> Result<()> {
        let params: Vec<&Tensor> = params.into_iter().collect();
        if self.snapshot_count == 0 {
            self.average = params.into_iter().cloned().collect();
            self.snapshot_count = 1;
            return Ok(());
        }
        if params.len() != self.average.len() || params.iter().zip(&self.average).any(|(p, a)| p.shape() != a.shape()) {
            return Err(Error::invalid("snapshot layout differs from the running average"));
        }
        self.snapshot_count += 1;
        let n = self.snapshot_count as f64;
        for (avg, p) in self.average.iter_mut().zip(params) {
            for (a, &w) in avg.data_mut().iter_mut().zip(p.data()) {
                *a += (w - *a) / n;
            }
        }
        Ok(())
    }

    /// Snapshots `params` if the schedule selects `epoch`; returns whether it did.
    pub fn update<'t>(&mut self, params: impl IntoIterator<Item = &'t Tensor>, epoch: usize, schedule: SwaSchedule) -> Result<bool> {
        if !schedule.is_snapshot_epoch(epoch) {
            return Ok(false);
        }
        self.add_snapshot(params)?;
        Ok(true)
    }
}

/// Patience-based stopping where only a strictly greater score improves.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best.map(|(_, s)| s)
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        let improved = match self.best {
            None => !score.is_nan(),
            Some((_, best)) => score > best,
        };
        if improved {
            self.best = Some((epoch, score));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when there is no validation set.
    pub val_precision: Option<f64>,
    pub improved: bool,
    pub swa_snapshot: bool,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early_at: Option<usize>,
    pub swa_snapshots: usize,
    /// The `n` of the validation precision.
    pub val_top_n: usize,
}

impl TrainLog {
    /// Copy with wall times zeroed, for comparing runs.
    pub fn without_timing(&self) -> TrainLog {
        let mut log = self.clone();
        for e in &mut log.epochs {
            e.wall_time_secs = 0.0;
        }
        log
    }

    /// One JSON object per epoch, then a summary line.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for e in &self.epochs {
            writeln!(f, "{}", serde_json::to_string(e)?)?;
        }
        let summary = serde_json::json!({
            "summary": {
                "best_epoch": self.best_epoch,
                "stopped_early_at": self.stopped_early_at,
                "swa_snapshots": self.swa_snapshots,
                "val_top_n": self.val_top_n,
            }
        });
        writeln!(f, "{summary}")?;
        Ok(())
    }
}

pub struct TrainOutcome {
    /// Weights from the epoch with the best validation score (the last
    /// epoch when there is no validation set).
    pub best: RacModel,
    /// Average of the scheduled snapshots, if any were taken.
    pub swa: Option<RacModel>,
    pub log: TrainLog,
}

/// Mean loss over `batch` and the parameter gradients, `E_t` shared.
pub fn batch_gradients(
    model: &RacModel,
    batch: &[&EncodedExample],
    titles: &TitleMatrix,
    rng: &mut Rng,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let mut ctx = Ctx {
        train: true,
        dropout: model.config.dropout,
        rng,
    };
    let e_t = code_title_embedding(&mut tape, &bound.coder.queries, titles)?;
    let mut total = None;
    for ex in batch {
        let vars = model.forward(&mut tape, &bound, &ex.token_ids, e_t, &mut ctx)?;
        let loss = tape.bce_with_logits(vars.logits, &ex.targets())?;
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    let loss = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
    let value = tape.value(loss)?.data()[0];
    let mut grads = tape.backward(loss)?;
    let grads = bound.leaves().into_iter().map(|(_, v)| grads.take(*v)).collect();
    Ok((value, grads))
}

/// Eval-mode precision@min(8, n_y) over `examples`.
pub fn validation_precision(model: &RacModel, examples: &[EncodedExample], titles: &TitleMatrix) -> Result<f64> {
    let scores = model.predict_scores(examples, titles)?;
    let labels = LabelMatrix::from_rows(&examples.iter().map(|e| e.label_vector.clone()).collect::<Vec<_>>())?;
    precision_at_n(&scores, &labels, VALIDATION_TOP_N.min(model.config.n_y))
}

pub fn train(model: RacModel, train_set: &[EncodedExample], val_set: &[EncodedExample], titles: &TitleMatrix, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_callback(model, train_set, val_set, titles, config, |_| {})
}

/// [`train`] with a hook called after every epoch.
pub fn train_with_callback(
    mut model: RacModel,
    train_set: &[EncodedExample],
    val_set: &[EncodedExample],
    titles: &TitleMatrix,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut shuffle_rng = Rng::with_stream(config.seed, 1);
    let mut dropout_rng = Rng::with_stream(config.seed, 2);
    let mut adam = Adam::new(config.learning_rate);
    let mut swa = SwaState::new();
    let schedule = config.swa_schedule();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut log = TrainLog {
        val_top_n: VALIDATION_TOP_N.min(model.config.n_y),
        ..TrainLog::default()
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&EncodedExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradients(&model, &batch, titles, &mut dropout_rng)?;
            loss_sum += loss * batch.len() as f64;
            adam.step(&mut model.params.leaves_mut(), &grads)?;
        }
        let swa_snapshot = swa.update(model.params.leaves().into_iter().map(|(_, t)| t), epoch, schedule)?;

        let (val_precision, decision) = if val_set.is_empty() {
            (None, StopDecision { improved: true, stop: false })
        } else {
            let p = validation_precision(&model, val_set, titles)?;
            (Some(p), stopper.observe(epoch, p))
        };
        if decision.improved {
            best = model.clone();
            log.best_epoch = Some(epoch);
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_precision,
            improved: decision.improved,
            swa_snapshot,
            wall_time_secs: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.epochs.push(record);
        if decision.stop {
            log.stopped_early_at = Some(epoch);
            break;
        }
    }

    log.swa_snapshots = swa.snapshot_count();
    let swa_model = if swa.snapshot_count() > 0 {
        let mut m = model.clone();
        for ((_, p), avg) in m.params.leaves_mut().into_iter().zip(swa.average()) {
            *p = avg.clone();
        }
        Some(m)
    } else {
        None
    };
    Ok(TrainOutcome {
        best,
        swa: swa_model,
        log,
    })
}
