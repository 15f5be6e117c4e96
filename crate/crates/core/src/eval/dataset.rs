//! Canonical JSON-lines QA records.
//!
//! One object per line:
//!
//! ```text
//! {"id": "000001", "image": "img/synpic100.jpg", "question": "...", "answer": "...",
//!  "answer_type": "open" | "closed", "dataset": "VQA-RAD", "split": "test"}
//! ```
//!
//! `id` is optional and defaults to the zero-padded line index. Blank lines
//! are skipped. Unknown keys are ignored.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerType {
    Open,
    Closed,
}

impl fmt::Display for AnswerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Open => "open",
            Self::Closed => "closed",
        })
    }
}

impl FromStr for AnswerType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "open" => Ok(Self::Open),
            "closed" => Ok(Self::Closed),
            other => Err(Error::Config(format!("unknown answer type {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub image: String,
    pub question: String,
    pub answer: String,
    pub answer_type: AnswerType,
    pub dataset: String,
    pub split: String,
}

#[derive(Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<String>,
    image: String,
    question: String,
    answer: String,
    answer_type: AnswerType,
    dataset: String,
    split: String,
}

/// Parses canonical JSON lines. `source` only labels errors.
pub fn parse_records(text: &str, source: &Path) -> Result<Vec<QaRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |msg: String| Error::Schema { path: source.to_path_buf(), line: lineno, msg };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
        if raw.answer.trim().is_empty() {
            return Err(schema("empty gold answer".into()));
        }
        if raw.question.trim().is_empty() {
            return Err(schema("empty question".into()));
        }
        let id = raw.id.unwrap_or_else(|| format!("{idx:06}"));
        if !seen.insert(id.clone()) {
            return Err(schema(format!("duplicate id {id:?}")));
        }
        out.push(QaRecord {
            id,
            image: raw.image,
            question: raw.question,
            answer: raw.answer,
            answer_type: raw.answer_type,
            dataset: raw.dataset,
            split: raw.split,
        });
    }
    Ok(out)
}

/// Loads a JSON-lines file. With `dataset` set, only records of that dataset
/// (case-insensitive) are kept.
pub fn load_dataset(path: &Path, dataset: Option<&str>) -> Result<Vec<QaRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = parse_records(&text, path)?;
    if records.is_empty() {
        warn!("{} contains no records", path.display());
    }
    if let Some(name) = dataset {
        let before = records.len();
        records.retain(|r| r.dataset.eq_ignore_ascii_case(name));
        if records.len() < before {
            warn!("skipped {} records not belonging to {name}", before - records.len());
        }
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[QaRecord]) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    std::fs::write(path, buf)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub images: usize,
    pub qa: usize,
    pub open: usize,
    pub closed: usize,
}

impl SplitStats {
    pub fn of(records: &[&QaRecord]) -> Self {
        let images: BTreeSet<&str> = records.iter().map(|r| r.image.as_str()).collect();
        let open = records.iter().filter(|r| r.answer_type == AnswerType::Open).count();
        Self { images: images.len(), qa: records.len(), open, closed: records.len() - open }
    }
}

/// Counts keyed by `(dataset, split)`.
pub fn split_stats(records: &[QaRecord]) -> BTreeMap<(String, String), SplitStats> {
    let mut groups: BTreeMap<(String, String), Vec<&QaRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.dataset.clone(), r.split.clone())).or_default().push(r);
    }
    groups.into_iter().map(|(k, v)| (k, SplitStats::of(&v))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{"image":"a.png","question":"is there a mass?","answer":"yes","answer_type":"closed","dataset":"VQA-RAD","split":"test"}

{"id":"q7","image":"a.png","question":"where?","answer":"left lobe","answer_type":"open","dataset":"VQA-RAD","split":"test"}
{"image":"b.png","question":"organ?","answer":"liver","answer_type":"open","dataset":"SLAKE","split":"test"}
"#;

    #[test]
    fn parses_and_defaults_ids() {
        let recs = parse_records(SAMPLE, Path::new("x")).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].id, "000000");
        assert_eq!(recs[1].id, "q7");
        assert_eq!(recs[2].id, "000003");
        assert_eq!(recs[0].answer_type, AnswerType::Closed);
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        let bad = "{\"image\":\"a\",\"question\":\"q\",\"answer\":\"a\",\"answer_type\":\"open\",\"dataset\":\"d\",\"split\":\"s\"}\n{\"image\":\"a\"}\n";
        match parse_records(bad, Path::new("f.jsonl")) {
            Err(Error::Schema { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let wrong_type = bad.lines().next().unwrap().replace("open", "maybe");
        assert!(matches!(parse_records(&wrong_type, Path::new("f")), Err(Error::Schema { line: 1, .. })));
        let empty_answer = bad.lines().next().unwrap().replace("\"answer\":\"a\"", "\"answer\":\" \"");
        assert!(parse_records(&empty_answer, Path::new("f")).is_err());
        let dup = "{\"id\":\"x\",\"image\":\"a\",\"question\":\"q\",\"answer\":\"a\",\"answer_type\":\"open\",\"dataset\":\"d\",\"split\":\"s\"}\n";
        assert!(parse_records(&dup.repeat(2), Path::new("f")).is_err());
    }

    #[test]
    fn empty_file_yields_no_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_dataset(&p, None).unwrap().is_empty());
        assert!(split_stats(&[]).is_empty());
    }

    #[test]
    fn load_filters_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, SAMPLE).unwrap();
        let a = load_dataset(&p, Some("vqa-rad")).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a, load_dataset(&p, Some("VQA-RAD")).unwrap());
        let all = load_dataset(&p, None).unwrap();
        let out = dir.path().join("o.jsonl");
        write_records(&out, &all).unwrap();
        assert_eq!(load_dataset(&out, None).unwrap(), all);
    }

    #[test]
    fn stats_count_unique_images() {
        let recs = parse_records(SAMPLE, Path::new("x")).unwrap();
        let stats = split_stats(&recs);
        let rad = stats[&("VQA-RAD".to_string(), "test".to_string())];
        assert_eq!(rad, SplitStats { images: 1, qa: 2, open: 1, closed: 1 });
    }
}
