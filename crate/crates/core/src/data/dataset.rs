use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no records")]
    NoRecords,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate id {id} in split {split}")]
    DuplicateId { line: usize, id: usize, split: Split },
    #[error("split {split}: explicit ids must cover 0..{count} exactly")]
    NonContiguousIds { split: Split, count: usize },
    #[error("record cannot be written as tsv (contains tab or newline): {0:?}")]
    Unrepresentable(String),
    #[error("known class ratio must lie in (0, 1), got {0}")]
    InvalidKcr(f64),
    #[error("labeled fraction must lie in (0, 1], got {0}")]
    InvalidLabeledFraction(f64),
    #[error("semi-supervised split needs labelled training data; {0} training utterances lack a label")]
    MissingLabels(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[serde(alias = "val", alias = "dev")]
    Validation,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" | "val" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Tsv,
    Jsonl,
}

impl DatasetFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "tsv" | "txt" => Some(Self::Tsv),
            "jsonl" | "json" | "ndjson" => Some(Self::Jsonl),
            _ => None,
        }
    }
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<usize>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    /// Position within its split, 0-based and contiguous.
    pub id: usize,
    pub text: String,
    /// Ground-truth intent. Whether a consumer may see it is decided by
    /// [`DatasetBundle::visible_label`].
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Unsupervised,
    SemiSupervised,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentSets {
    pub known: BTreeSet<String>,
    pub unknown: BTreeSet<String>,
}

impl IntentSets {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.known.iter().chain(self.unknown.iter())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub labeled: usize,
    pub distinct_labels: usize,
    pub known_intents: usize,
    pub unknown_intents: usize,
}

/// Train, validation and test utterances plus the labelled subset of train.
///
/// Labels are never erased: unsupervised mode hides them at access time via
/// [`visible_label`](Self::visible_label) so evaluation keeps ground truth.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub train: Vec<Utterance>,
    pub validation: Vec<Utterance>,
    pub test: Vec<Utterance>,
    mode: Mode,
    intents: IntentSets,
    labeled_subset: Vec<usize>,
    labeled_mask: Vec<bool>,
}

impl DatasetBundle {
    /// Bundle in unsupervised mode: every intent is unknown and nothing is
    /// labelled.
    pub fn unsupervised(
        train: Vec<Utterance>,
        validation: Vec<Utterance>,
        test: Vec<Utterance>,
    ) -> Self {
        let unknown = train
            .iter()
            .chain(&validation)
            .chain(&test)
            .filter_map(|u| u.label.clone())
            .collect();
        let labeled_mask = vec![false; train.len()];
        Self {
            train,
            validation,
            test,
            mode: Mode::Unsupervised,
            intents: IntentSets { known: BTreeSet::new(), unknown },
            labeled_subset: Vec::new(),
            labeled_mask,
        }
    }

    /// Switch to semi-supervised mode with known class ratio `kcr`.
    ///
    /// Known intents are the first `round(kcr * |intents|)` entries of a
    /// seeded shuffle of the sorted training intents; `labeled_fraction` of
    /// each known class (at least one utterance) is sampled into the
    /// labelled subset.
    pub fn into_semi_supervised(
        self,
        kcr: f64,
        labeled_fraction: f64,
        seed: u64,
    ) -> Result<Self, DataError> {
        if !(kcr > 0.0 && kcr < 1.0) {
            return Err(DataError::InvalidKcr(kcr));
        }
        if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
            return Err(DataError::InvalidLabeledFraction(labeled_fraction));
        }
        let missing = self.train.iter().filter(|u| u.label.is_none()).count();
        if missing > 0 {
            return Err(DataError::MissingLabels(missing));
        }
        let mut by_intent: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for u in &self.train {
            by_intent.entry(u.label.as_deref().unwrap_or_default()).or_default().push(u.id);
        }
        let mut intents: Vec<&str> = by_intent.keys().copied().collect();
        let mut rng = seed::rng(seed::derive(seed, "kcr-split"));
        intents.shuffle(&mut rng);
        let n_known = ((kcr * intents.len() as f64).round() as usize).clamp(1, intents.len());
        let known: BTreeSet<String> = intents[..n_known].iter().map(|s| s.to_string()).collect();

        let mut labeled = Vec::new();
        for intent in &known {
            let mut ids = by_intent[intent.as_str()].clone();
            ids.shuffle(&mut rng);
            let take = ((labeled_fraction * ids.len() as f64).round() as usize).clamp(1, ids.len());
            labeled.extend_from_slice(&ids[..take]);
        }
        labeled.sort_unstable();

        let unknown = self
            .train
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .filter_map(|u| u.label.clone())
            .filter(|l| !known.contains(l))
            .collect();
        let mut labeled_mask = vec![false; self.train.len()];
        for &id in &labeled {
            labeled_mask[id] = true;
        }
        Ok(Self {
            mode: Mode::SemiSupervised,
            intents: IntentSets { known, unknown },
            labeled_subset: labeled,
            labeled_mask,
            ..self
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn intents(&self) -> &IntentSets {
        &self.intents
    }

    /// Ids of `D_labeled`, ascending.
    pub fn labeled_subset(&self) -> &[usize] {
        &self.labeled_subset
    }

    pub fn is_labeled(&self, train_id: usize) -> bool {
        self.labeled_mask.get(train_id).copied().unwrap_or(false)
    }

    /// Training ids outside the labelled subset.
    pub fn unlabeled_ids(&self) -> Vec<usize> {
        (0..self.train.len()).filter(|&id| !self.is_labeled(id)).collect()
    }

    /// Label of a training utterance as the learner is allowed to see it.
    pub fn visible_label(&self, train_id: usize) -> Option<&str> {
        if self.is_labeled(train_id) {
            self.train[train_id].label.as_deref()
        } else {
            None
        }
    }

    /// Ground truth, for oracles and evaluation only.
    pub fn true_label(&self, train_id: usize) -> Option<&str> {
        self.train.get(train_id)?.label.as_deref()
    }

    /// Dense integer encoding of the test labels (sorted label order).
    /// `None` when any test utterance is unlabelled.
    pub fn test_label_ids(&self) -> Option<Vec<usize>> {
        encode_labels(&self.test)
    }

    pub fn train_label_ids(&self) -> Option<Vec<usize>> {
        encode_labels(&self.train)
    }

    pub fn train_fingerprint(&self) -> u64 {
        super::fingerprint_texts(self.train.iter().map(|u| u.text.as_str()))
    }

    pub fn test_fingerprint(&self) -> u64 {
        super::fingerprint_texts(self.test.iter().map(|u| u.text.as_str()))
    }

    pub fn summary(&self) -> DatasetSummary {
        let distinct: BTreeSet<&str> = self
            .train
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .filter_map(|u| u.label.as_deref())
            .collect();
        DatasetSummary {
            train: self.train.len(),
            validation: self.validation.len(),
            test: self.test.len(),
            labeled: self.labeled_subset.len(),
            distinct_labels: distinct.len(),
            known_intents: self.intents.known.len(),
            unknown_intents: self.intents.unknown.len(),
        }
    }

    /// Records in split order (train, validation, test), ids explicit.
    pub fn to_records(&self) -> Vec<Record> {
        [(Split::Train, &self.train), (Split::Validation, &self.validation), (Split::Test, &self.test)]
            .into_iter()
            .flat_map(|(split, utts)| {
                utts.iter().map(move |u| Record {
                    id: Some(u.id),
                    text: u.text.clone(),
                    label: u.label.clone(),
                    split,
                })
            })
            .collect()
    }
}

fn encode_labels(utts: &[Utterance]) -> Option<Vec<usize>> {
    let labels: Option<Vec<&str>> = utts.iter().map(|u| u.label.as_deref()).collect();
    let labels = labels?;
    let vocab: BTreeMap<&str, usize> = labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    Some(labels.iter().map(|l| vocab[l]).collect())
}

/// Parse dataset text. Blank lines are skipped; line numbers in errors are
/// 1-based.
pub fn parse_records(content: &str, format: DatasetFormat) -> Result<Vec<Record>, DataError> {
    let mut records = Vec::new();
    for (index, line) in content.lines().enumerate() {
        let line_no = index + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record = match format {
            DatasetFormat::Jsonl => serde_json::from_str::<Record>(line)
                .map_err(|e| DataError::Parse { line: line_no, message: e.to_string() })?,
            DatasetFormat::Tsv => parse_tsv_line(line, line_no)?,
        };
        if record.text.is_empty() {
            return Err(DataError::Parse { line: line_no, message: "empty text".into() });
        }
        records.push(record);
    }
    Ok(records)
}

fn parse_tsv_line(line: &str, line_no: usize) -> Result<Record, DataError> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() > 3 {
        return Err(DataError::Parse {
            line: line_no,
            message: format!("expected at most 3 tab-separated fields, found {}", fields.len()),
        });
    }
    let label = fields.get(1).filter(|l| !l.is_empty()).map(|l| l.to_string());
    let split = match fields.get(2) {
        Some(s) => s.parse().map_err(|message| DataError::Parse { line: line_no, message })?,
        None => Split::Train,
    };
    Ok(Record { id: None, text: fields[0].to_string(), label, split })
}

/// Load a dataset file into an unsupervised bundle.
///
/// Records without a `split` field belong to train. Ids are assigned in file
/// order within each split unless every record of the split carries an
/// explicit id, in which case the ids must be a permutation of `0..n`.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<DatasetBundle, DataError> {
    let content = fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let records = parse_records(&content, format)?;
    let bundle = bundle_from_records(records)?;
    let summary = bundle.summary();
    tracing::info!(
        path = %path.display(),
        train = summary.train,
        validation = summary.validation,
        test = summary.test,
        labels = summary.distinct_labels,
        "loaded dataset"
    );
    Ok(bundle)
}

pub(crate) fn bundle_from_records(records: Vec<Record>) -> Result<DatasetBundle, DataError> {
    if records.is_empty() {
        return Err(DataError::NoRecords);
    }
    let mut splits: BTreeMap<Split, Vec<(usize, Record)>> = BTreeMap::new();
    for (line, record) in records.into_iter().enumerate() {
        splits.entry(record.split).or_default().push((line + 1, record));
    }
    let mut take = |split| -> Result<Vec<Utterance>, DataError> {
        let Some(rows) = splits.remove(&split) else { return Ok(Vec::new()) };
        assign_ids(split, rows)
    };
    let train = take(Split::Train)?;
    let validation = take(Split::Validation)?;
    let test = take(Split::Test)?;
    Ok(DatasetBundle::unsupervised(train, validation, test))
}

fn assign_ids(split: Split, rows: Vec<(usize, Record)>) -> Result<Vec<Utterance>, DataError> {
    let explicit = rows.iter().filter(|(_, r)| r.id.is_some()).count();
    let mut seen = HashSet::new();
    for (line, record) in &rows {
        if let Some(id) = record.id {
            if !seen.insert(id) {
                return Err(DataError::DuplicateId { line: *line, id, split });
            }
        }
    }
    if explicit == 0 {
        return Ok(rows
            .into_iter()
            .enumerate()
            .map(|(id, (_, r))| Utterance { id, text: r.text, label: r.label })
            .collect());
    }
    let count = rows.len();
    if explicit != count || seen.iter().any(|&id| id >= count) {
        return Err(DataError::NonContiguousIds { split, count });
    }
    let mut utts: Vec<Utterance> = rows
        .into_iter()
        .map(|(_, r)| Utterance { id: r.id.unwrap_or_default(), text: r.text, label: r.label })
        .collect();
    utts.sort_by_key(|u| u.id);
    Ok(utts)
}

/// Serialize records; TSV output omits ids (they are implied by order).
pub fn write_records(
    records: &[Record],
    format: DatasetFormat,
    mut out: impl Write,
) -> Result<(), DataError> {
    let io = |source| DataError::Io { path: "<writer>".into(), source };
    for record in records {
        match format {
            DatasetFormat::Jsonl => {
                let line = serde_json::to_string(record).expect("records serialize");
                writeln!(out, "{line}").map_err(io)?;
            }
            DatasetFormat::Tsv => {
                let label = record.label.as_deref().unwrap_or("");
                for field in [record.text.as_str(), label] {
                    if field.contains(['\t', '\n', '\r']) {
                        return Err(DataError::Unrepresentable(field.to_string()));
                    }
                }
                writeln!(out, "{}\t{}\t{}", record.text, label, record.split).map_err(io)?;
            }
        }
    }
    Ok(())
}

pub fn write_dataset(
    bundle: &DatasetBundle,
    format: DatasetFormat,
    out: impl Write,
) -> Result<(), DataError> {
    write_records(&bundle.to_records(), format, out)
}
