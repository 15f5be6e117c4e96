//! Thin converters from the native benchmark releases to canonical records.
//!
//! Inputs may be a JSON array or JSON lines. Answers that are numbers in the
//! source are stringified.

use std::path::Path;

use serde_json::{Map, Value};

use super::dataset::{AnswerType, QaRecord};
use super::metrics::normalize_closed;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceFormat {
    VqaRad,
    Slake,
    PathVqa,
}

impl std::str::FromStr for SourceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "vqarad" => Ok(Self::VqaRad),
            "slake" => Ok(Self::Slake),
            "pathvqa" => Ok(Self::PathVqa),
            _ => Err(Error::Config(format!("unknown source format {s:?}"))),
        }
    }
}

impl SourceFormat {
    pub fn dataset_name(self) -> &'static str {
        match self {
            Self::VqaRad => "VQA-RAD",
            Self::Slake => "SLAKE",
            Self::PathVqa => "PathVQA",
        }
    }
}

type Object = Map<String, Value>;

fn read_objects(text: &str, source: &Path) -> Result<Vec<Object>> {
    let schema = |line: usize, msg: String| Error::Schema { path: source.to_path_buf(), line, msg };
    let trimmed = text.trim_start();
    let values: Vec<Value> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed).map_err(|e| schema(e.line(), e.to_string()))?
    } else {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| schema(i + 1, e.to_string())))
            .collect::<Result<_>>()?
    };
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| match v {
            Value::Object(o) => Ok(o),
            _ => Err(schema(i + 1, "expected a JSON object".into())),
        })
        .collect()
}

struct Fields<'a> {
    obj: &'a Object,
    entry: usize,
    source: &'a Path,
}

impl Fields<'_> {
    fn err(&self, msg: String) -> Error {
        Error::Schema { path: self.source.to_path_buf(), line: self.entry, msg }
    }

    fn text(&self, key: &str) -> Result<String> {
        match self.obj.get(key) {
            Some(Value::String(s)) => Ok(s.trim().to_string()),
            Some(Value::Number(n)) => Ok(n.to_string()),
            Some(Value::Bool(b)) => Ok(b.to_string()),
            Some(other) => Err(self.err(format!("field {key:?} has unsupported value {other}"))),
            None => Err(self.err(format!("missing field {key:?}"))),
        }
    }

    fn optional(&self, key: &str) -> Option<String> {
        self.text(key).ok()
    }

    fn answer_type(&self, key: &str) -> Result<AnswerType> {
        self.text(key)?.parse().map_err(|_| self.err(format!("bad {key:?}")))
    }
}

fn image_path(dir: &str, name: &str) -> String {
    if dir.is_empty() {
        name.to_string()
    } else {
        format!("{}/{}", dir.trim_end_matches('/'), name)
    }
}

/// Converts a native release. `split` is ignored for VQA-RAD, whose test
/// split is the `test_*` phrase types; with `split` set, only that split is
/// kept.
pub fn convert(
    format: SourceFormat,
    text: &str,
    source: &Path,
    split: Option<&str>,
    image_dir: &str,
) -> Result<Vec<QaRecord>> {
    let dataset = format.dataset_name().to_string();
    let mut out = Vec::new();
    for (i, obj) in read_objects(text, source)?.iter().enumerate() {
        let f = Fields { obj, entry: i + 1, source };
        let record = match format {
            SourceFormat::VqaRad => {
                let phrase = f.text("phrase_type")?;
                let record_split = if phrase.starts_with("test") { "test" } else { "train" };
                if split.is_some_and(|s| s != record_split) {
                    continue;
                }
                QaRecord {
                    id: f.optional("qid").unwrap_or_else(|| format!("{i:06}")),
                    image: image_path(image_dir, &f.text("image_name")?),
                    question: f.text("question")?,
                    answer: f.text("answer")?,
                    answer_type: f.answer_type("answer_type")?,
                    dataset: dataset.clone(),
                    split: record_split.to_string(),
                }
            }
            SourceFormat::Slake => {
                if f.optional("q_lang").is_some_and(|l| l != "en") {
                    continue;
                }
                QaRecord {
                    id: f.optional("qid").unwrap_or_else(|| format!("{i:06}")),
                    image: image_path(image_dir, &f.text("img_name")?),
                    question: f.text("question")?,
                    answer: f.text("answer")?,
                    answer_type: f.answer_type("answer_type")?,
                    dataset: dataset.clone(),
                    split: split.unwrap_or("test").to_string(),
                }
            }
            SourceFormat::PathVqa => {
                let answer = f.text("answer")?;
                let answer_type = match normalize_closed(&answer).as_str() {
                    "yes" | "no" => AnswerType::Closed,
                    _ => AnswerType::Open,
                };
                QaRecord {
                    id: f.optional("id").unwrap_or_else(|| format!("{i:06}")),
                    image: image_path(image_dir, &f.text("image")?),
                    question: f.text("question")?,
                    answer,
                    answer_type,
                    dataset: dataset.clone(),
                    split: split.unwrap_or("test").to_string(),
                }
            }
        };
        if record.answer.is_empty() {
            return Err(f.err("empty gold answer".into()));
        }
        out.push(record);
    }
    Ok(out)
}
