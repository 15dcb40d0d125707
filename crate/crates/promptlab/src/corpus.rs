//! Labeled corpora: loading, participant-level splitting, and inter-rater
//! reliability.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

/// Binary gold label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    /// Normalize a label string. Accepts yes/no, 1/0, true/false and
    /// positive/negative, case-insensitively.
    pub fn parse(s: &str) -> Result<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "yes" | "1" | "true" | "positive" => Ok(Label::Positive),
            "no" | "0" | "false" | "negative" => Ok(Label::Negative),
            other => Err(Error::LabelDomain(format!(
                "unknown label {other:?}; expected yes/no, 1/0, true/false or positive/negative"
            ))),
        }
    }

    pub fn as_yes_no(&self) -> &'static str {
        match self {
            Label::Positive => "Yes",
            Label::Negative => "No",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Positive => write!(f, "positive"),
            Label::Negative => write!(f, "negative"),
        }
    }
}

/// One labeled text unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledText {
    pub id: String,
    pub participant_id: String,
    pub text: String,
    pub gold: Label,
    pub construct: String,
}

/// An ordered collection of labeled texts sharing one construct tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub construct: String,
    pub items: Vec<LabeledText>,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Unique participant ids in order of first appearance.
    pub fn participants(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for item in &self.items {
            if seen.insert(item.participant_id.clone()) {
                out.push(item.participant_id.clone());
            }
        }
        out
    }

    pub fn positive_fraction(&self) -> f64 {
        if self.items.is_empty() {
            return 0.0;
        }
        let pos = self
            .items
            .iter()
            .filter(|i| i.gold == Label::Positive)
            .count();
        pos as f64 / self.items.len() as f64
    }
}

/// Named subset of a corpus produced by a split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub items: Vec<LabeledText>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.id.as_str()).collect()
    }

    pub fn golds(&self) -> Vec<Label> {
        self.items.iter().map(|i| i.gold).collect()
    }

    pub fn id_set(&self) -> BTreeSet<&str> {
        self.items.iter().map(|i| i.id.as_str()).collect()
    }

    /// Items whose ids are not in `exclude`, preserving order.
    pub fn without(&self, exclude: &BTreeSet<&str>) -> Dataset {
        Dataset {
            name: format!("{}(filtered)", self.name),
            items: self
                .items
                .iter()
                .filter(|i| !exclude.contains(i.id.as_str()))
                .cloned()
                .collect(),
        }
    }

    pub fn has_both_classes(&self) -> bool {
        let mut pos = false;
        let mut neg = false;
        for item in &self.items {
            match item.gold {
                Label::Positive => pos = true,
                Label::Negative => neg = true,
            }
        }
        pos && neg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Participant-level split assignment. Texts inherit their participant's
/// split, so no participant ever straddles two splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub by_participant: BTreeMap<String, Split>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitAssignment {
    pub fn split_of(&self, participant_id: &str) -> Option<Split> {
        self.by_participant.get(participant_id).copied()
    }

    pub fn participant_counts(&self) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for split in self.by_participant.values() {
            match split {
                Split::Train => counts[0] += 1,
                Split::Dev => counts[1] += 1,
                Split::Test => counts[2] += 1,
            }
        }
        counts
    }

    /// Partition a corpus into train/dev/test datasets, preserving item order.
    pub fn partition(&self, corpus: &Corpus) -> Result<(Dataset, Dataset, Dataset)> {
        let mut train = Vec::new();
        let mut dev = Vec::new();
        let mut test = Vec::new();
        for item in &corpus.items {
            match self.split_of(&item.participant_id) {
                Some(Split::Train) => train.push(item.clone()),
                Some(Split::Dev) => dev.push(item.clone()),
                Some(Split::Test) => test.push(item.clone()),
                None => {
                    return Err(Error::Integrity(format!(
                        "participant {:?} is missing from the split assignment",
                        item.participant_id
                    )))
                }
            }
        }
        Ok((
            Dataset { name: "train".into(), items: train },
            Dataset { name: "dev".into(), items: dev },
            Dataset { name: "test".into(), items: test },
        ))
    }
}

/// Cohen's kappa between two raters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KappaResult {
    pub kappa: f64,
    pub observed_agreement: f64,
    pub expected_agreement: f64,
    pub n_items: usize,
    /// Set when both raters are constant on the same class (p_e = 1).
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl CorpusFormat {
    pub fn from_path(path: &Path) -> CorpusFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    participant_id: Option<String>,
    text: Option<String>,
    gold: Option<String>,
    construct: Option<String>,
}

fn record_to_item(raw: RawRecord, path: &str, line: usize) -> Result<LabeledText> {
    let field = |value: Option<String>, name: &str| -> Result<String> {
        match value {
            Some(v) => Ok(v),
            None => Err(Error::Schema {
                path: path.to_string(),
                line,
                message: format!("missing field {name:?}"),
            }),
        }
    };
    let id = field(raw.id, "id")?;
    let participant_id = field(raw.participant_id, "participant_id")?;
    let text = field(raw.text, "text")?;
    let gold = Label::parse(&field(raw.gold, "gold")?)?;
    let construct = field(raw.construct, "construct")?;
    if text.is_empty() {
        return Err(Error::Schema {
            path: path.to_string(),
            line,
            message: "text must be non-empty".into(),
        });
    }
    Ok(LabeledText { id, participant_id, text, gold, construct })
}

/// Load a corpus from a JSONL or CSV file, preserving file order.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    let display = path.display().to_string();
    let mut content = String::new();
    std::fs::File::open(path)?.read_to_string(&mut content)?;

    let mut items = Vec::new();
    match format {
        CorpusFormat::Jsonl => {
            for (idx, raw_line) in content.lines().enumerate() {
                let line = idx + 1;
                if raw_line.trim().is_empty() {
                    continue;
                }
                let raw: RawRecord =
                    serde_json::from_str(raw_line).map_err(|e| Error::Schema {
                        path: display.clone(),
                        line,
                        message: e.to_string(),
                    })?;
                items.push(record_to_item(raw, &display, line)?);
            }
        }
        CorpusFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(true)
                .from_reader(content.as_bytes());
            for (idx, row) in reader.deserialize::<RawRecord>().enumerate() {
                let line = idx + 2; // header is line 1
                let raw = row.map_err(|e| Error::Schema {
                    path: display.clone(),
                    line,
                    message: e.to_string(),
                })?;
                items.push(record_to_item(raw, &display, line)?);
            }
        }
    }

    if items.is_empty() {
        return Err(Error::Schema {
            path: display,
            line: 0,
            message: "file contains no records".into(),
        });
    }

    let mut seen = BTreeSet::new();
    for item in &items {
        if !seen.insert(item.id.clone()) {
            return Err(Error::Integrity(format!(
                "duplicate id {:?} in {display}",
                item.id
            )));
        }
    }

    let construct = items[0].construct.clone();
    if let Some(odd) = items.iter().find(|i| i.construct != construct) {
        return Err(Error::Integrity(format!(
            "mixed construct tags: {:?} and {:?} (item {:?})",
            construct, odd.construct, odd.id
        )));
    }

    let mut provenance = BTreeMap::new();
    provenance.insert("source".into(), display);
    Ok(Corpus { construct, items, provenance })
}

/// Largest-remainder apportionment of `total` over `ratios`.
fn apportion(total: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..(total - assigned) {
        counts[order[i % 3]] += 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Shuffle participants with a seeded RNG and partition them so realized
/// counts match the ratio targets within +/-1. Deterministic for a fixed
/// (participant set, ratios, seed).
pub fn split_participants(
    corpus: &Corpus,
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    if ratios.iter().any(|r| *r <= 0.0) {
        return Err(Error::Configuration(
            "split ratios must all be positive".into(),
        ));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Configuration(format!(
            "split ratios must sum to 1 (got {sum})"
        )));
    }
    let mut participants = corpus.participants();
    if participants.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 participants to split, found {}",
            participants.len()
        )));
    }

    let mut rng = util::rng(seed);
    participants.shuffle(&mut rng);
    let targets = apportion(participants.len(), &ratios);

    let mut by_participant = BTreeMap::new();
    for (idx, participant) in participants.into_iter().enumerate() {
        let split = if idx < targets[0] {
            Split::Train
        } else if idx < targets[0] + targets[1] {
            Split::Dev
        } else {
            Split::Test
        };
        by_participant.insert(participant, split);
    }
    Ok(SplitAssignment { by_participant, ratios, seed })
}

/// Cohen's kappa for two aligned binary label sequences.
pub fn cohens_kappa(labels_a: &[Label], labels_b: &[Label]) -> Result<KappaResult> {
    if labels_a.len() != labels_b.len() {
        return Err(Error::Arity {
            left: labels_a.len(),
            right: labels_b.len(),
        });
    }
    if labels_a.is_empty() {
        return Err(Error::InsufficientData(
            "kappa requires at least one rated item".into(),
        ));
    }
    let n = labels_a.len() as f64;
    let agree = labels_a
        .iter()
        .zip(labels_b)
        .filter(|(a, b)| a == b)
        .count() as f64;
    let pos_a = labels_a.iter().filter(|l| **l == Label::Positive).count() as f64 / n;
    let pos_b = labels_b.iter().filter(|l| **l == Label::Positive).count() as f64 / n;

    let observed = agree / n;
    let expected = pos_a * pos_b + (1.0 - pos_a) * (1.0 - pos_b);

    // Both raters constant on the same class: p_e = 1 and p_o = 1; report
    // full agreement but flag the degeneracy.
    let (kappa, degenerate) = if (1.0 - expected).abs() < 1e-12 {
        (1.0, true)
    } else {
        ((observed - expected) / (1.0 - expected), false)
    };

    Ok(KappaResult {
        kappa,
        observed_agreement: observed,
        expected_agreement: expected,
        n_items: labels_a.len(),
        degenerate,
    })
}

/// Load a rater file: one row per item with an id column followed by exactly
/// two label columns, one per rater.
pub fn load_rater_file(path: &Path) -> Result<(Vec<Label>, Vec<Label>)> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Schema {
            path: display.clone(),
            line: 0,
            message: e.to_string(),
        })?;
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let line = idx + 2;
        let row = row.map_err(|e| Error::Schema {
            path: display.clone(),
            line,
            message: e.to_string(),
        })?;
        if row.len() != 3 {
            return Err(Error::Schema {
                path: display.clone(),
                line,
                message: format!("expected 3 columns (id, rater_a, rater_b), found {}", row.len()),
            });
        }
        a.push(Label::parse(&row[1])?);
        b.push(Label::parse(&row[2])?);
    }
    if a.is_empty() {
        return Err(Error::Schema {
            path: display,
            line: 0,
            message: "rater file contains no records".into(),
        });
    }
    Ok((a, b))
}

/// The 28 emotion names of the public GoEmotions taxonomy, in label-id order.
const GOEMOTIONS_TAXONOMY: [&str; 28] = [
    "admiration", "amusement", "anger", "annoyance", "approval", "caring",
    "confusion", "curiosity", "desire", "disappointment", "disapproval",
    "disgust", "embarrassment", "excitement", "fear", "gratitude", "grief",
    "joy", "love", "nervousness", "optimism", "pride", "realization",
    "relief", "remorse", "sadness", "surprise", "neutral",
];

/// Convert a GoEmotions TSV export (text, comma-separated emotion ids,
/// comment id) into a binary corpus for one emotion. Each Reddit comment is
/// treated as its own participant.
pub fn convert_goemotions(path: &Path, emotion: &str) -> Result<Corpus> {
    let display = path.display().to_string();
    let target = GOEMOTIONS_TAXONOMY
        .iter()
        .position(|e| *e == emotion.to_ascii_lowercase())
        .ok_or_else(|| {
            Error::Configuration(format!("unknown GoEmotions emotion {emotion:?}"))
        })?;

    let content = std::fs::read_to_string(path)?;
    let mut items = Vec::new();
    for (idx, raw_line) in content.lines().enumerate() {
        let line = idx + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw_line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Schema {
                path: display.clone(),
                line,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let mut positive = false;
        for part in fields[1].split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let emotion_id: usize = part.parse().map_err(|_| Error::Schema {
                path: display.clone(),
                line,
                message: format!("bad emotion id {part:?}"),
            })?;
            if emotion_id == target {
                positive = true;
            }
        }
        items.push(LabeledText {
            id: fields[2].to_string(),
            participant_id: fields[2].to_string(),
            text: fields[0].to_string(),
            gold: if positive { Label::Positive } else { Label::Negative },
            construct: emotion.to_ascii_lowercase(),
        });
    }
    if items.is_empty() {
        return Err(Error::Schema {
            path: display,
            line: 0,
            message: "file contains no records".into(),
        });
    }
    let mut seen = BTreeSet::new();
    for item in &items {
        if !seen.insert(item.id.clone()) {
            return Err(Error::Integrity(format!(
                "duplicate id {:?} in {display}",
                item.id
            )));
        }
    }
    let mut provenance = BTreeMap::new();
    provenance.insert("source".into(), display);
    provenance.insert("converter".into(), "goemotions".into());
    Ok(Corpus {
        construct: emotion.to_ascii_lowercase(),
        items,
        provenance,
    })
}

/// Write a corpus as JSONL.
pub fn write_corpus_jsonl(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = String::new();
    for item in &corpus.items {
        out.push_str(&serde_json::to_string(&serde_json::json!({
            "id": item.id,
            "participant_id": item.participant_id,
            "text": item.text,
            "gold": if item.gold == Label::Positive { "yes" } else { "no" },
            "construct": item.construct,
        }))?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn temp_jsonl(records: &[serde_json::Value]) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        for record in records {
            writeln!(file, "{record}").unwrap();
        }
        file.flush().unwrap();
        file
    }

    fn record(id: &str, participant: &str, gold: &str) -> serde_json::Value {
        serde_json::json!({
            "id": id,
            "participant_id": participant,
            "text": format!("text for {id}"),
            "gold": gold,
            "construct": "gratitude",
        })
    }

    pub(crate) fn synthetic_corpus(n_participants: usize, texts_per: usize) -> Corpus {
        let mut items = Vec::new();
        for p in 0..n_participants {
            for t in 0..texts_per {
                items.push(LabeledText {
                    id: format!("p{p}t{t}"),
                    participant_id: format!("p{p}"),
                    text: format!("sample text {p} {t}"),
                    gold: if (p + t) % 2 == 0 { Label::Positive } else { Label::Negative },
                    construct: "gratitude".into(),
                });
            }
        }
        Corpus {
            construct: "gratitude".into(),
            items,
            provenance: BTreeMap::new(),
        }
    }

    #[test]
    fn load_600_record_corpus() {
        let records: Vec<_> = (0..600)
            .map(|i| record(&format!("t{i}"), &format!("p{}", i / 2), if i % 2 == 0 { "yes" } else { "no" }))
            .collect();
        let file = temp_jsonl(&records);
        let corpus = load_corpus(file.path(), CorpusFormat::Jsonl).unwrap();
        assert_eq!(corpus.len(), 600);
        assert_eq!(corpus.construct, "gratitude");
    }

    #[test]
    fn empty_file_is_schema_error() {
        let file = temp_jsonl(&[]);
        let err = load_corpus(file.path(), CorpusFormat::Jsonl).unwrap_err();
        assert!(matches!(err, Error::Schema { .. }), "{err}");
    }

    #[test]
    fn duplicate_id_is_integrity_error() {
        let file = temp_jsonl(&[record("t1", "p1", "yes"), record("t1", "p2", "no")]);
        let err = load_corpus(file.path(), CorpusFormat::Jsonl).unwrap_err();
        match err {
            Error::Integrity(msg) => assert!(msg.contains("t1"), "{msg}"),
            other => panic!("expected integrity error, got {other}"),
        }
    }

    #[test]
    fn missing_field_names_line() {
        let file = temp_jsonl(&[
            record("t1", "p1", "yes"),
            serde_json::json!({"id": "t2", "text": "x", "gold": "no", "construct": "gratitude"}),
        ]);
        let err = load_corpus(file.path(), CorpusFormat::Jsonl).unwrap_err();
        match err {
            Error::Schema { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("participant_id"), "{message}");
            }
            other => panic!("expected schema error, got {other}"),
        }
    }

    #[test]
    fn unknown_label_is_label_domain_error() {
        let file = temp_jsonl(&[record("t1", "p1", "maybe")]);
        let err = load_corpus(file.path(), CorpusFormat::Jsonl).unwrap_err();
        assert!(matches!(err, Error::LabelDomain(_)), "{err}");
    }

    #[test]
    fn label_normalization_accepts_common_encodings() {
        for s in ["yes", "YES", "1", "true", "True", "positive"] {
            assert_eq!(Label::parse(s).unwrap(), Label::Positive, "{s}");
        }
        for s in ["no", "No", "0", "false", "FALSE", "negative"] {
            assert_eq!(Label::parse(s).unwrap(), Label::Negative, "{s}");
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "id,participant_id,text,gold,construct").unwrap();
        writeln!(file, "t1,p1,\"hello, world\",yes,gratitude").unwrap();
        writeln!(file, "t2,p1,plain,no,gratitude").unwrap();
        file.flush().unwrap();
        let corpus = load_corpus(file.path(), CorpusFormat::Csv).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.items[0].text, "hello, world");
    }

    #[test]
    fn four_participants_split_exactly() {
        let corpus = synthetic_corpus(4, 1);
        let assignment = split_participants(&corpus, [0.25, 0.5, 0.25], 11).unwrap();
        assert_eq!(assignment.participant_counts(), [1, 2, 1]);
    }

    #[test]
    fn split_is_deterministic() {
        let corpus = synthetic_corpus(20, 3);
        let a = split_participants(&corpus, [0.25, 0.5, 0.25], 42).unwrap();
        let b = split_participants(&corpus, [0.25, 0.5, 0.25], 42).unwrap();
        assert_eq!(a.by_participant, b.by_participant);
    }

    #[test]
    fn split_counts_within_one_of_targets() {
        for seed in 0..50u64 {
            let corpus = synthetic_corpus(23, 2);
            let assignment = split_participants(&corpus, [0.25, 0.5, 0.25], seed).unwrap();
            let counts = assignment.participant_counts();
            let n = 23.0;
            for (count, ratio) in counts.iter().zip([0.25, 0.5, 0.25]) {
                assert!((*count as f64 - ratio * n).abs() <= 1.0);
            }
            assert_eq!(counts.iter().sum::<usize>(), 23);
        }
    }

    #[test]
    fn text_counts_track_ratios_when_participants_dominate() {
        // 575 texts over 560 participants (15 carry two texts): realized
        // text counts stay near the 25/50/25 targets because the unit is
        // the participant.
        let mut items = Vec::new();
        for p in 0..560 {
            let texts = if p < 15 { 2 } else { 1 };
            for t in 0..texts {
                items.push(LabeledText {
                    id: format!("p{p}t{t}"),
                    participant_id: format!("p{p}"),
                    text: format!("text {p} {t}"),
                    gold: if p % 2 == 0 { Label::Positive } else { Label::Negative },
                    construct: "gratitude".into(),
                });
            }
        }
        assert_eq!(items.len(), 575);
        let corpus = Corpus {
            construct: "gratitude".into(),
            items,
            provenance: BTreeMap::new(),
        };
        for seed in [1u64, 2, 3] {
            let assignment = split_participants(&corpus, [0.25, 0.5, 0.25], seed).unwrap();
            let (train, dev, test) = assignment.partition(&corpus).unwrap();
            // doubled participants can shift a split by at most 15 texts
            assert!((train.len() as f64 - 143.75).abs() <= 16.0, "{}", train.len());
            assert!((dev.len() as f64 - 287.5).abs() <= 16.0, "{}", dev.len());
            assert!((test.len() as f64 - 143.75).abs() <= 16.0, "{}", test.len());
            assert_eq!(train.len() + dev.len() + test.len(), 575);
        }
    }

    #[test]
    fn no_participant_straddles_splits() {
        // Partition property over 1,000 random corpora with multi-text
        // participants.
        for seed in 0..1000u64 {
            let n_participants = 3 + (seed as usize % 17);
            let texts_per = 1 + (seed as usize % 4);
            let corpus = synthetic_corpus(n_participants, texts_per);
            let assignment = split_participants(&corpus, [0.25, 0.5, 0.25], seed).unwrap();
            let (train, dev, test) = assignment.partition(&corpus).unwrap();
            assert_eq!(train.len() + dev.len() + test.len(), corpus.len());
            let train_p: BTreeSet<_> = train.items.iter().map(|i| &i.participant_id).collect();
            let dev_p: BTreeSet<_> = dev.items.iter().map(|i| &i.participant_id).collect();
            let test_p: BTreeSet<_> = test.items.iter().map(|i| &i.participant_id).collect();
            assert!(train_p.is_disjoint(&dev_p));
            assert!(train_p.is_disjoint(&test_p));
            assert!(dev_p.is_disjoint(&test_p));
        }
    }

    #[test]
    fn too_few_participants_is_error() {
        let corpus = synthetic_corpus(2, 3);
        let err = split_participants(&corpus, [0.25, 0.5, 0.25], 0).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)), "{err}");
    }

    #[test]
    fn kappa_identical_lists() {
        use Label::*;
        let labels = vec![Positive, Negative, Positive, Negative];
        let result = cohens_kappa(&labels, &labels).unwrap();
        assert_eq!(result.kappa, 1.0);
        assert!(!result.degenerate);
    }

    #[test]
    fn kappa_zero_case() {
        // a=[+,+,-,-], b=[+,-,+,-]: p_o=0.5, p_e=0.5, kappa=0.
        use Label::*;
        let a = vec![Positive, Positive, Negative, Negative];
        let b = vec![Positive, Negative, Positive, Negative];
        let result = cohens_kappa(&a, &b).unwrap();
        assert_eq!(result.observed_agreement, 0.5);
        assert_eq!(result.expected_agreement, 0.5);
        assert_eq!(result.kappa, 0.0);
    }

    #[test]
    fn kappa_half_case() {
        // a=[+,+,+,-], b=[+,+,-,-]: p_o=0.75, p_e=0.5*0.75+0.5*0.25=0.5.
        use Label::*;
        let a = vec![Positive, Positive, Positive, Negative];
        let b = vec![Positive, Positive, Negative, Negative];
        let result = cohens_kappa(&a, &b).unwrap();
        assert_eq!(result.observed_agreement, 0.75);
        assert_eq!(result.expected_agreement, 0.5);
        assert_eq!(result.kappa, 0.5);
    }

    #[test]
    fn kappa_degenerate_constant_raters() {
        use Label::*;
        let a = vec![Positive, Positive, Positive];
        let result = cohens_kappa(&a, &a).unwrap();
        assert_eq!(result.kappa, 1.0);
        assert!(result.degenerate);
    }

    #[test]
    fn kappa_length_mismatch() {
        use Label::*;
        let err = cohens_kappa(&[Positive], &[Positive, Negative]).unwrap_err();
        assert!(matches!(err, Error::Arity { left: 1, right: 2 }));
    }

    #[test]
    fn goemotions_converter() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        // gratitude is label id 15 in the public taxonomy
        writeln!(file, "thanks so much for this\t15\teabc01").unwrap();
        writeln!(file, "what a terrible day\t25,2\teabc02").unwrap();
        writeln!(file, "grateful and happy\t15,17\teabc03").unwrap();
        file.flush().unwrap();
        let corpus = convert_goemotions(file.path(), "gratitude").unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.items[0].gold, Label::Positive);
        assert_eq!(corpus.items[1].gold, Label::Negative);
        assert_eq!(corpus.items[2].gold, Label::Positive);
        assert_eq!(corpus.construct, "gratitude");
    }

    #[test]
    fn rater_file_loads() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "id,rater_a,rater_b").unwrap();
        writeln!(file, "t1,yes,yes").unwrap();
        writeln!(file, "t2,no,yes").unwrap();
        file.flush().unwrap();
        let (a, b) = load_rater_file(file.path()).unwrap();
        assert_eq!(a, vec![Label::Positive, Label::Negative]);
        assert_eq!(b, vec![Label::Positive, Label::Positive]);
    }
}

#[cfg(test)]
mod kappa_properties {
    use super::*;
    use proptest::prelude::*;

    fn label_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Label>> {
        prop::collection::vec(prop::bool::ANY, len)
            .prop_map(|v| v.into_iter().map(|b| if b { Label::Positive } else { Label::Negative }).collect())
    }

    proptest! {
        #[test]
        fn kappa_is_symmetric(pair in label_vec(1..40).prop_flat_map(|a| {
            let len = a.len();
            (Just(a), label_vec(len..len + 1))
        })) {
            let (a, b) = pair;
            let ab = cohens_kappa(&a, &b).unwrap();
            let ba = cohens_kappa(&b, &a).unwrap();
            prop_assert!((ab.kappa - ba.kappa).abs() < 1e-12);
        }

        #[test]
        fn kappa_in_range(pair in label_vec(1..40).prop_flat_map(|a| {
            let len = a.len();
            (Just(a), label_vec(len..len + 1))
        })) {
            let (a, b) = pair;
            let result = cohens_kappa(&a, &b).unwrap();
            prop_assert!(result.kappa >= -1.0 - 1e-12 && result.kappa <= 1.0 + 1e-12);
            // kappa = 1 iff identical, when both classes occur in the pooled labels
            let both = a.iter().chain(&b).any(|l| *l == Label::Positive)
                && a.iter().chain(&b).any(|l| *l == Label::Negative);
            if both && !result.degenerate {
                prop_assert_eq!((result.kappa - 1.0).abs() < 1e-12, a == b);
            }
        }
    }
}
