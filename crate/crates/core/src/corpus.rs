//! Event-log ingestion, vocabulary construction, sequence slicing and
//! leave-one-out splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{HailError, Result};

/// Default minimum number of records a generator needs to survive filtering.
pub const DEFAULT_MIN_SEQ_LEN: usize = 5;
/// Default maximum window length.
pub const DEFAULT_MAX_LEN: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    pub generator: String,
    pub element: String,
    pub timestamp: i64,
}

/// Records as they appear in the input file, unsorted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawEventLog {
    pub records: Vec<EventRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    Tsv,
    Csv,
}

impl LogFormat {
    fn separator(self) -> char {
        match self {
            LogFormat::Tsv => '\t',
            LogFormat::Csv => ',',
        }
    }

    /// Guess from the file extension; anything that is not `.csv` is read as TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => LogFormat::Csv,
            _ => LogFormat::Tsv,
        }
    }
}

impl std::str::FromStr for LogFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "tsv" => Ok(LogFormat::Tsv),
            "csv" => Ok(LogFormat::Csv),
            other => Err(format!("unknown log format `{other}` (expected tsv or csv)")),
        }
    }
}

pub fn load_event_log(path: &Path, format: LogFormat, has_header: bool) -> Result<RawEventLog> {
    let text = fs::read_to_string(path).map_err(|e| HailError::io(path, e))?;
    parse_event_log(&text, format, has_header)
}

/// Parses `generator, element, timestamp` lines. Extra trailing columns are
/// ignored, blank lines are skipped, and line numbers in errors are 1-based.
pub fn parse_event_log(text: &str, format: LogFormat, has_header: bool) -> Result<RawEventLog> {
    let sep = format.separator();
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if has_header && idx == 0 {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(sep).map(str::trim);
        let (generator, element, timestamp) = match (fields.next(), fields.next(), fields.next()) {
            (Some(g), Some(e), Some(t)) => (g, e, t),
            _ => {
                return Err(HailError::Parse {
                    line: line_no,
                    message: "expected at least 3 fields: generator, element, timestamp".into(),
                })
            }
        };
        if generator.is_empty() || element.is_empty() {
            return Err(HailError::Parse {
                line: line_no,
                message: "empty generator or element field".into(),
            });
        }
        let timestamp = timestamp.parse::<i64>().map_err(|e| HailError::Parse {
            line: line_no,
            message: format!("invalid timestamp `{timestamp}`: {e}"),
        })?;
        records.push(EventRecord {
            generator: generator.to_string(),
            element: element.to_string(),
            timestamp,
        });
    }
    Ok(RawEventLog { records })
}

/// Bidirectional element token ↔ id map. Id 0 is padding, ids `1..=size`
/// are elements and `size + 1` is the mask token.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    element_to_id: HashMap<String, u32>,
    id_to_element: Vec<String>,
}

impl Vocabulary {
    pub const PAD_ID: u32 = 0;

    pub fn from_elements<I, S>(elements: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary::default();
        for e in elements {
            let e = e.into();
            if vocab.element_to_id.contains_key(&e) {
                return Err(HailError::contract(format!("duplicate vocabulary element `{e}`")));
            }
            vocab.insert(e);
        }
        Ok(vocab)
    }

    fn insert(&mut self, element: String) -> u32 {
        if let Some(&id) = self.element_to_id.get(&element) {
            return id;
        }
        let id = self.id_to_element.len() as u32 + 1;
        self.id_to_element.push(element.clone());
        self.element_to_id.insert(element, id);
        id
    }

    /// Number of real elements |E|.
    pub fn size(&self) -> usize {
        self.id_to_element.len()
    }

    pub fn pad_id(&self) -> u32 {
        Self::PAD_ID
    }

    pub fn mask_id(&self) -> u32 {
        self.size() as u32 + 1
    }

    /// Rows of the embedding table: elements plus pad and mask.
    pub fn table_rows(&self) -> usize {
        self.size() + 2
    }

    pub fn id(&self, element: &str) -> Option<u32> {
        self.element_to_id.get(element).copied()
    }

    pub fn element(&self, id: u32) -> Option<&str> {
        if id == 0 {
            return None;
        }
        self.id_to_element.get(id as usize - 1).map(String::as_str)
    }

    pub fn is_element(&self, id: u32) -> bool {
        id >= 1 && (id as usize) <= self.size()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.id_to_element
            .iter()
            .enumerate()
            .map(|(i, e)| (i as u32 + 1, e.as_str()))
    }
}

/// Drops generators with fewer than `min_seq_len` records (one pass, on raw
/// counts) and assigns element ids by first occurrence in the surviving log.
pub fn build_vocabulary(log: &RawEventLog, min_seq_len: usize) -> Result<(Vocabulary, RawEventLog)> {
    if min_seq_len < 1 {
        return Err(HailError::contract("min_seq_len must be at least 1"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in &log.records {
        *counts.entry(r.generator.as_str()).or_default() += 1;
    }
    let records: Vec<EventRecord> = log
        .records
        .iter()
        .filter(|r| counts[r.generator.as_str()] >= min_seq_len)
        .cloned()
        .collect();
    if records.is_empty() {
        return Err(HailError::EmptyCorpus { min_seq_len });
    }
    let mut vocab = Vocabulary::default();
    for r in &records {
        vocab.insert(r.element.clone());
    }
    Ok((vocab, RawEventLog { records }))
}

/// One generator's chronological element ids (possibly one window of a
/// longer history).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub generator: u32,
    pub elements: Vec<u32>,
}

/// Generator names indexed by the integer ids used in [`InteractionSequence`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Generators {
    pub names: Vec<String>,
}

/// Sorts each generator's records by timestamp (stable, so ties keep input
/// order) and cuts histories longer than `max_len` into windows from the end
/// leftward. A leftover head shorter than `min_seq_len` is dropped. Windows
/// of one generator are emitted left to right, so the last one is the most
/// recent.
pub fn build_sequences(
    log: &RawEventLog,
    vocab: &Vocabulary,
    max_len: usize,
    min_seq_len: usize,
) -> Result<(Generators, Vec<InteractionSequence>)> {
    if max_len < 3 {
        return Err(HailError::contract("max_len must be at least 3"));
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut generators = Generators::default();
    let mut grouped: Vec<Vec<(i64, u32)>> = Vec::new();
    for r in &log.records {
        let g = *index.entry(r.generator.as_str()).or_insert_with(|| {
            generators.names.push(r.generator.clone());
            grouped.push(Vec::new());
            grouped.len() - 1
        });
        let id = vocab
            .id(&r.element)
            .ok_or_else(|| HailError::contract(format!("element `{}` not in vocabulary", r.element)))?;
        grouped[g].push((r.timestamp, id));
    }

    let mut out = Vec::new();
    for (g, mut events) in grouped.into_iter().enumerate() {
        events.sort_by_key(|&(t, _)| t);
        let ids: Vec<u32> = events.into_iter().map(|(_, id)| id).collect();
        for window in slice_right_to_left(&ids, max_len, min_seq_len).into_iter().rev() {
            out.push(InteractionSequence {
                generator: g as u32,
                elements: window.to_vec(),
            });
        }
    }
    Ok((generators, out))
}

/// Windows in right-to-left order: the first returned slice ends at the
/// sequence end.
pub fn slice_right_to_left<T>(seq: &[T], max_len: usize, min_seq_len: usize) -> Vec<&[T]> {
    let mut windows = Vec::new();
    let mut end = seq.len();
    while end > 0 {
        let start = end.saturating_sub(max_len);
        let window = &seq[start..end];
        // Only a partial head can be short; the full-length windows always pass.
        if window.len() < max_len && window.len() < min_seq_len && !windows.is_empty() {
            break;
        }
        windows.push(window);
        end = start;
    }
    windows
}

/// Leave-one-out split: per generator, the last element is the test target,
/// the one before it the validation target, and everything else trains.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitSet {
    pub train: Vec<InteractionSequence>,
    pub valid_targets: BTreeMap<u32, u32>,
    pub test_targets: BTreeMap<u32, u32>,
    /// Train part of each generator's most recent window; evaluation inputs
    /// are built from it.
    pub contexts: BTreeMap<u32, Vec<u32>>,
    /// Generators skipped because their history had fewer than 3 elements.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Valid,
    Test,
}

impl SplitSet {
    pub fn targets(&self, kind: SplitKind) -> &BTreeMap<u32, u32> {
        match kind {
            SplitKind::Valid => &self.valid_targets,
            SplitKind::Test => &self.test_targets,
        }
    }

    /// Every element the generator interacted with across train, valid and test.
    pub fn history(&self, generator: u32) -> BTreeSet<u32> {
        let mut h: BTreeSet<u32> = self
            .train
            .iter()
            .filter(|s| s.generator == generator)
            .flat_map(|s| s.elements.iter().copied())
            .collect();
        h.extend(self.valid_targets.get(&generator));
        h.extend(self.test_targets.get(&generator));
        h
    }

    /// All histories at once; avoids the quadratic scan of [`SplitSet::history`].
    pub fn histories(&self) -> BTreeMap<u32, BTreeSet<u32>> {
        let mut out: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
        for s in &self.train {
            out.entry(s.generator).or_default().extend(s.elements.iter().copied());
        }
        for (g, t) in self.valid_targets.iter().chain(self.test_targets.iter()) {
            out.entry(*g).or_default().insert(*t);
        }
        out
    }

    /// The input sequence for predicting the target of `kind`, without the
    /// trailing mask: the context for validation, context + valid target for test.
    pub fn eval_prefix(&self, generator: u32, kind: SplitKind) -> Option<Vec<u32>> {
        let mut prefix = self.contexts.get(&generator)?.clone();
        if kind == SplitKind::Test {
            prefix.push(*self.valid_targets.get(&generator)?);
        }
        Some(prefix)
    }
}

pub fn split_leave_one_out(seqs: &[InteractionSequence]) -> SplitSet {
    // Index of each generator's most recent window.
    let mut last_window: BTreeMap<u32, usize> = BTreeMap::new();
    for (i, s) in seqs.iter().enumerate() {
        last_window.insert(s.generator, i);
    }
    let mut split = SplitSet::default();
    let mut skipped_generators = BTreeSet::new();
    for (&g, &i) in &last_window {
        let elems = &seqs[i].elements;
        if elems.len() < 3 {
            skipped_generators.insert(g);
            continue;
        }
        let n = elems.len();
        split.test_targets.insert(g, elems[n - 1]);
        split.valid_targets.insert(g, elems[n - 2]);
        split.contexts.insert(g, elems[..n - 2].to_vec());
    }
    for (i, s) in seqs.iter().enumerate() {
        if skipped_generators.contains(&s.generator) {
            continue;
        }
        let elements = if last_window[&s.generator] == i {
            s.elements[..s.elements.len() - 2].to_vec()
        } else {
            s.elements.clone()
        };
        split.train.push(InteractionSequence {
            generator: s.generator,
            elements,
        });
    }
    split.skipped = skipped_generators.len();
    if split.skipped > 0 {
        warn!("skipped {} generators with fewer than 3 elements", split.skipped);
    }
    split
}

/// Output of the `prepare` stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedCorpus {
    pub vocab: Vocabulary,
    pub generators: Generators,
    pub sequences: Vec<InteractionSequence>,
}

impl PreparedCorpus {
    pub fn from_log(log: &RawEventLog, min_seq_len: usize, max_len: usize) -> Result<Self> {
        let (vocab, filtered) = build_vocabulary(log, min_seq_len)?;
        let (generators, sequences) = build_sequences(&filtered, &vocab, max_len, min_seq_len)?;
        Ok(PreparedCorpus {
            vocab,
            generators,
            sequences,
        })
    }

    pub const VOCAB_FILE: &'static str = "vocab.tsv";
    pub const SEQUENCES_FILE: &'static str = "sequences.tsv";

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| HailError::io(dir, e))?;
        let vocab_path = dir.join(Self::VOCAB_FILE);
        fs::write(&vocab_path, vocabulary_to_string(&self.vocab))
            .map_err(|e| HailError::io(&vocab_path, e))?;
        let seq_path = dir.join(Self::SEQUENCES_FILE);
        fs::write(&seq_path, sequences_to_string(&self.generators, &self.sequences))
            .map_err(|e| HailError::io(&seq_path, e))?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let vocab_path = dir.join(Self::VOCAB_FILE);
        let text = fs::read_to_string(&vocab_path).map_err(|e| HailError::io(&vocab_path, e))?;
        let vocab = vocabulary_from_str(&text)?;
        let seq_path = dir.join(Self::SEQUENCES_FILE);
        let text = fs::read_to_string(&seq_path).map_err(|e| HailError::io(&seq_path, e))?;
        let (generators, sequences) = sequences_from_str(&text, &vocab)?;
        Ok(PreparedCorpus {
            vocab,
            generators,
            sequences,
        })
    }
}

pub fn vocabulary_to_string(vocab: &Vocabulary) -> String {
    let mut s = String::new();
    for (id, e) in vocab.iter() {
        let _ = writeln!(s, "{e}\t{id}");
    }
    s
}

pub fn vocabulary_from_str(text: &str) -> Result<Vocabulary> {
    let mut elements = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| HailError::Parse {
            line: idx + 1,
            message,
        };
        let (e, id) = line
            .rsplit_once('\t')
            .ok_or_else(|| parse_err("expected `element<TAB>id`".into()))?;
        let id: u32 = id.parse().map_err(|e| parse_err(format!("bad id: {e}")))?;
        if id as usize != elements.len() + 1 {
            return Err(parse_err(format!("ids must be contiguous from 1, got {id}")));
        }
        elements.push(e.to_string());
    }
    Vocabulary::from_elements(elements)
}

pub fn sequences_to_string(generators: &Generators, seqs: &[InteractionSequence]) -> String {
    let mut s = String::new();
    for seq in seqs {
        s.push_str(&generators.names[seq.generator as usize]);
        s.push('\t');
        for (i, id) in seq.elements.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{id}");
        }
        s.push('\n');
    }
    s
}

pub fn sequences_from_str(
    text: &str,
    vocab: &Vocabulary,
) -> Result<(Generators, Vec<InteractionSequence>)> {
    let mut index: HashMap<String, u32> = HashMap::new();
    let mut generators = Generators::default();
    let mut seqs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| HailError::Parse {
            line: idx + 1,
            message,
        };
        let (name, ids) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `generator<TAB>ids`".into()))?;
        let g = *index.entry(name.to_string()).or_insert_with(|| {
            generators.names.push(name.to_string());
            generators.names.len() as u32 - 1
        });
        let elements = ids
            .split_ascii_whitespace()
            .map(|t| {
                let id: u32 = t.parse().map_err(|e| parse_err(format!("bad id `{t}`: {e}")))?;
                if !vocab.is_element(id) {
                    return Err(parse_err(format!("id {id} outside vocabulary")));
                }
                Ok(id)
            })
            .collect::<Result<Vec<_>>>()?;
        seqs.push(InteractionSequence { generator: g, elements });
    }
    Ok((generators, seqs))
}
