//! Distillation from a fixed teacher's logits on unlabeled data.
//!
//! The teacher is queried once and its raw logits are stored. The student is
//! trained to minimize the temperature-softened soft cross-entropy
//!
//! ```text
//! L = -(1/n) Σ_i T² Σ_c softmax(p_i / T)_c · log softmax(q_i / T)_c
//! ```
//!
//! where `p_i` are teacher logits (constant) and `q_i` the student's.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archspace::ArchConfig;
use crate::corpus::UNK_ID;
use crate::error::{Error, Result};
use crate::nn::{argmax, fit, Classifier, EncoderModel, FitParams, Gradients, TrainState};

pub const LOGIT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitRecord {
    pub ids: Vec<u32>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogitHeader {
    version: u32,
    num_classes: usize,
    count: usize,
}

/// Token sequences paired with the teacher's raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitDataset {
    num_classes: usize,
    records: Vec<LogitRecord>,
}

impl LogitDataset {
    pub fn new(num_classes: usize, records: Vec<LogitRecord>) -> Result<Self> {
        let bad = |m: String| Err(Error::format("logit dataset", m));
        if num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        if records.is_empty() {
            return bad("no records".into());
        }
        for (i, r) in records.iter().enumerate() {
            if r.logits.len() != num_classes {
                return bad(format!(
                    "record {i} has {} logits, expected {num_classes}",
                    r.logits.len()
                ));
            }
            if r.logits.iter().any(|v| !v.is_finite()) {
                return bad(format!("record {i} has a non-finite logit"));
            }
            if r.ids.is_empty() {
                return bad(format!("record {i} has no tokens"));
            }
        }
        Ok(Self {
            num_classes,
            records,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn records(&self) -> &[LogitRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Header line `{version, num_classes, count}` then one record per line.
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = LogitHeader {
            version: LOGIT_FORMAT_VERSION,
            num_classes: self.num_classes,
            count: self.records.len(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn read_text<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::format("logit dataset", "missing header"))??;
        let header: LogitHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::format("logit dataset header", e))?;
        if header.version != LOGIT_FORMAT_VERSION {
            return Err(Error::format(
                "logit dataset header",
                format!("unsupported version {}", header.version),
            ));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: LogitRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format("logit record", format!("line {}: {e}", n + 2)))?;
            records.push(r);
            if records.len() > header.count {
                break;
            }
        }
        if records.len() != header.count {
            return Err(Error::format(
                "logit dataset",
                format!("header promises {} records, found {}", header.count, records.len()),
            ));
        }
        Self::new(header.num_classes, records)
    }

    /// Parses an in-memory text dataset.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        Self::read_text(bytes)
    }

    /// Mean of `T² · H(softmax(p / T))` over the records: the smallest mean
    /// loss any student can reach on this data.
    pub fn entropy_floor(&self, temperature: f64) -> f64 {
        let total: f64 = self
            .records
            .iter()
            .map(|r| soft_ce_loss(&r.logits, &r.logits, temperature))
            .sum();
        total / self.records.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedInput {
    pub index: usize,
    pub reason: String,
}

/// Runs the teacher over every input and stores its raw logits.
///
/// With `strict`, the first unacceptable sequence aborts the capture;
/// otherwise it is skipped and reported.
pub fn capture_teacher_logits<S: AsRef<[u32]>>(
    teacher: &EncoderModel,
    unlabeled: &[S],
    strict: bool,
) -> Result<(LogitDataset, Vec<SkippedInput>)> {
    let mut records = Vec::with_capacity(unlabeled.len());
    let mut skipped = Vec::new();
    for (index, seq) in unlabeled.iter().enumerate() {
        let ids = seq.as_ref();
        match teacher.forward(ids) {
            Ok(logits) => records.push(LogitRecord {
                ids: ids.to_vec(),
                logits,
            }),
            Err(e) if !strict => skipped.push(SkippedInput {
                index,
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok((LogitDataset::new(teacher.config().num_classes, records)?, skipped))
}

fn log_softmax_scaled(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let lse = max
        + logits
            .iter()
            .map(|z| (z / temperature - max).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|z| z / temperature - lse).collect()
}

/// `-T² Σ_c softmax(p/T)_c · log softmax(q/T)_c` for one record.
pub fn soft_ce_loss(p: &[f64], q: &[f64], temperature: f64) -> f64 {
    soft_ce_loss_and_grad(p, q, temperature).0
}

/// Loss and its gradient with respect to the student logits `q`.
///
/// The gradient is `T · (softmax(q/T) - softmax(p/T))`.
pub fn soft_ce_loss_and_grad(p: &[f64], q: &[f64], temperature: f64) -> (f64, Vec<f64>) {
    assert_eq!(p.len(), q.len(), "logit vectors differ in length");
    assert!(temperature > 0.0, "temperature must be positive");
    let log_p = log_softmax_scaled(p, temperature);
    let log_q = log_softmax_scaled(q, temperature);
    let t2 = temperature * temperature;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(q.len());
    for (lp, lq) in log_p.iter().zip(&log_q) {
        let target = lp.exp();
        loss -= target * lq;
        grad.push(temperature * (lq.exp() - target));
    }
    // cross-entropy is never below zero; clamp rounding at the p = q minimum
    ((loss * t2).max(0.0), grad)
}

/// Maps teacher token ids into a smaller student vocabulary.
///
/// The `student_vocab - 1` most frequent ids keep distinct slots `1..`;
/// everything else collapses to [`UNK_ID`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabMap {
    pub student_vocab: usize,
    /// Teacher ids in frequency rank order; `kept[i]` maps to `i + 1`.
    pub kept: Vec<u32>,
    #[serde(skip)]
    lookup: HashMap<u32, u32>,
}

impl VocabMap {
    pub fn new(student_vocab: usize, kept: Vec<u32>) -> Result<Self> {
        if student_vocab == 0 || kept.len() > student_vocab - 1 {
            return Err(Error::InvalidArgument(format!(
                "{} kept ids do not fit a student vocabulary of {student_vocab}",
                kept.len()
            )));
        }
        let lookup: HashMap<u32, u32> = kept
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, i as u32 + 1))
            .collect();
        if lookup.len() != kept.len() {
            return Err(Error::InvalidArgument("duplicate ids in vocabulary map".into()));
        }
        Ok(Self {
            student_vocab,
            kept,
            lookup,
        })
    }

    /// Frequency-ranked truncation over a training corpus; ties go to the smaller id.
    pub fn from_frequency<S: AsRef<[u32]>>(corpus: &[S], student_vocab: usize) -> Result<Self> {
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for seq in corpus {
            for &id in seq.as_ref() {
                *counts.entry(id).or_default() += 1;
            }
        }
        let mut ranked: Vec<(u32, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let keep = student_vocab.saturating_sub(1);
        let kept = ranked.into_iter().take(keep).map(|(id, _)| id).collect();
        Self::new(student_vocab, kept)
    }

    pub fn map_id(&self, teacher_id: u32) -> u32 {
        self.lookup.get(&teacher_id).copied().unwrap_or(UNK_ID)
    }

    pub fn apply(&self, ids: &[u32]) -> Vec<u32> {
        ids.iter().map(|&t| self.map_id(t)).collect()
    }

    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let raw: VocabMap =
            serde_json::from_slice(bytes).map_err(|e| Error::format("vocabulary map", e))?;
        Self::new(raw.student_vocab, raw.kept)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocab map serializes")
    }
}

/// A model that sees its inputs through an optional vocabulary map.
#[derive(Debug, Clone, Copy)]
pub struct MappedClassifier<'a> {
    pub model: &'a EncoderModel,
    pub vocab_map: Option<&'a VocabMap>,
}

impl Classifier for MappedClassifier<'_> {
    fn num_classes(&self) -> usize {
        self.model.config().num_classes
    }

    fn logits(&self, ids: &[u32]) -> Result<Vec<f64>> {
        match self.vocab_map {
            Some(map) => self.model.forward(&map.apply(ids)),
            None => self.model.forward(ids),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillParams {
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_map: Option<VocabMap>,
}

impl Default for DistillParams {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            learning_rate: 1e-3,
            epochs: 5,
            batch_size: 32,
            rng_seed: 0,
            vocab_map: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub model: EncoderModel,
    /// Mean loss over the whole dataset before any update.
    pub initial_loss: f64,
    /// Running mean training loss of each epoch.
    pub loss_trace: Vec<f64>,
    /// Mean loss over the whole dataset after training.
    pub final_loss: f64,
}

/// Mean soft cross-entropy of `model` over `data`, with ids already in the model's vocabulary.
pub fn dataset_loss(model: &EncoderModel, ids: &[Vec<u32>], data: &LogitDataset, temperature: f64) -> Result<f64> {
    let c = data.num_classes();
    let mut total = 0.0;
    for chunk in (0..ids.len()).collect::<Vec<_>>().chunks(256) {
        let batch: Vec<&[u32]> = chunk.iter().map(|&i| ids[i].as_slice()).collect();
        let (logits, _) = model.forward_cached(&batch)?;
        for (k, &i) in chunk.iter().enumerate() {
            total += soft_ce_loss(&data.records()[i].logits, &logits[k * c..(k + 1) * c], temperature);
        }
    }
    Ok(total / ids.len() as f64)
}

/// Loss and gradient of the mean soft cross-entropy over the records in `idx`.
pub fn batch_loss_and_grad(
    model: &EncoderModel,
    ids: &[Vec<u32>],
    data: &LogitDataset,
    idx: &[usize],
    temperature: f64,
) -> Result<(f64, Gradients)> {
    let c = data.num_classes();
    let batch: Vec<&[u32]> = idx.iter().map(|&i| ids[i].as_slice()).collect();
    let (logits, cache) = model.forward_cached(&batch)?;
    let scale = 1.0 / idx.len() as f64;
    let mut dlogits = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (k, &i) in idx.iter().enumerate() {
        let (l, g) = soft_ce_loss_and_grad(&data.records()[i].logits, &logits[k * c..(k + 1) * c], temperature);
        loss += l * scale;
        for (d, gv) in dlogits[k * c..(k + 1) * c].iter_mut().zip(g) {
            *d = gv * scale;
        }
    }
    let mut grads = Gradients::zeros(model.num_params());
    model.backward_into(&cache, &dlogits, &mut grads);
    Ok((loss, grads))
}

/// Student token sequences for `data`, after the optional vocabulary map.
pub fn student_inputs(config: &ArchConfig, data: &LogitDataset, vocab_map: Option<&VocabMap>) -> Result<Vec<Vec<u32>>> {
    if let Some(map) = vocab_map {
        if map.student_vocab != config.vocab {
            return Err(Error::InvalidArgument(format!(
                "vocabulary map targets {} ids but the student has {}",
                map.student_vocab, config.vocab
            )));
        }
    }
    data.records()
        .iter()
        .map(|r| {
            let ids = match vocab_map {
                Some(map) => map.apply(&r.ids),
                None => r.ids.clone(),
            };
            if let Some(&id) = ids.iter().find(|&&id| id as usize >= config.vocab) {
                return Err(Error::InvalidArgument(format!(
                    "token {id} exceeds the student vocabulary of {}; supply a vocabulary map",
                    config.vocab
                )));
            }
            Ok(ids)
        })
        .collect()
}

/// Trains a freshly initialized student on the captured logits.
pub fn distill_train(student_config: &ArchConfig, data: &LogitDataset, params: &DistillParams) -> Result<DistillOutcome> {
    if !(params.temperature > 0.0 && params.temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {}",
            params.temperature
        )));
    }
    if data.num_classes() != student_config.num_classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes but the student has {}",
            data.num_classes(),
            student_config.num_classes
        )));
    }
    let ids = student_inputs(student_config, data, params.vocab_map.as_ref())?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let model = EncoderModel::init(student_config, &mut init_rng)?;
    let initial_loss = dataset_loss(&model, &ids, data, params.temperature)?;
    let mut state = TrainState::new(model, params.rng_seed);
    let fit_params = FitParams {
        epochs: params.epochs,
        batch_size: params.batch_size,
        learning_rate: params.learning_rate,
        seed: params.rng_seed.wrapping_add(1),
    };
    let loss_trace = fit(&mut state, ids.len(), &fit_params, |model, idx| {
        batch_loss_and_grad(model, &ids, data, idx, params.temperature)
    })?;
    let final_loss = dataset_loss(&state.model, &ids, data, params.temperature)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: params.epochs,
            batch: 0,
            loss: final_loss,
        });
    }
    Ok(DistillOutcome {
        model: state.model,
        initial_loss,
        loss_trace,
        final_loss,
    })
}

/// What a student's predictions are compared against.
pub enum Reference<'a> {
    Labels(&'a [usize]),
    Teacher(&'a dyn Classifier),
}

/// Fraction of `eval_set` on which the student's argmax matches the reference.
pub fn agreement<S: AsRef<[u32]>>(student: &dyn Classifier, reference: Reference<'_>, eval_set: &[S]) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::InvalidArgument("agreement over an empty evaluation set".into()));
    }
    if let Reference::Labels(labels) = reference {
        if labels.len() != eval_set.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} examples",
                labels.len(),
                eval_set.len()
            )));
        }
    }
    let mut hits = 0usize;
    for (i, seq) in eval_set.iter().enumerate() {
        let predicted = argmax(&student.logits(seq.as_ref())?);
        let expected = match &reference {
            Reference::Labels(labels) => labels[i],
            Reference::Teacher(teacher) => argmax(&teacher.logits(seq.as_ref())?),
        };
        hits += (predicted == expected) as usize;
    }
    Ok(hits as f64 / eval_set.len() as f64)
}
