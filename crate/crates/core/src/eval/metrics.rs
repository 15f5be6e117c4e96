//! Closed-answer exact match and open-answer keyword recall.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::dataset::AnswerType;
use crate::error::{Error, Result};

/// Dropped from gold answers before keyword matching.
pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "in", "on", "at", "to", "is", "are", "was", "were", "be", "and", "or", "with",
    "for", "by", "from", "this", "that", "it", "its", "as",
];

/// Lowercase, trim, and strip any trailing run of `.,!?;:` and whitespace.
pub fn normalize_closed(text: &str) -> String {
    text.trim()
        .to_lowercase()
        .trim_end_matches(|c: char| c.is_whitespace() || ".,!?;:".contains(c))
        .to_string()
}

/// Lowercased alphanumeric words; everything else separates words.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Deduplicated gold keywords. Falls back to all words when every word is a
/// stopword.
pub fn keywords(gold: &str, stopwords: &[&str]) -> BTreeSet<String> {
    let all: BTreeSet<String> = words(gold).into_iter().collect();
    let kept: BTreeSet<String> = all.iter().filter(|w| !stopwords.contains(&w.as_str())).cloned().collect();
    if kept.is_empty() {
        all
    } else {
        kept
    }
}

/// Fraction of pairs that match after [`normalize_closed`]. Empty input
/// scores 0.
pub fn closed_accuracy<P: AsRef<str>, G: AsRef<str>>(predictions: &[P], golds: &[G]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::LengthMismatch(predictions.len(), golds.len()));
    }
    if golds.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| normalize_closed(p.as_ref()) == normalize_closed(g.as_ref()))
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

pub fn open_recall(prediction: &str, gold: &str) -> f64 {
    open_recall_with(prediction, gold, DEFAULT_STOPWORDS)
}

/// Share of gold keywords found among the prediction's words. A gold answer
/// without any words scores 0.
pub fn open_recall_with(prediction: &str, gold: &str, stopwords: &[&str]) -> f64 {
    let keys = keywords(gold, stopwords);
    if keys.is_empty() {
        return 0.0;
    }
    let said: BTreeSet<String> = words(prediction).into_iter().collect();
    keys.iter().filter(|k| said.contains(*k)).count() as f64 / keys.len() as f64
}

/// One line of a report. Metrics are `None` when no item of that type exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub model: String,
    pub condition: String,
    pub open_recall: Option<f64>,
    pub closed_accuracy: Option<f64>,
    pub n_open: usize,
    pub n_closed: usize,
}

impl MetricRow {
    /// Scores `(answer_type, prediction, gold)` triples.
    pub fn score<'a, I>(dataset: &str, model: &str, condition: &str, items: I) -> Self
    where
        I: IntoIterator<Item = (AnswerType, &'a str, &'a str)>,
    {
        let (mut recall_sum, mut n_open) = (0.0, 0usize);
        let (mut preds, mut golds) = (Vec::new(), Vec::new());
        for (kind, pred, gold) in items {
            match kind {
                AnswerType::Open => {
                    recall_sum += open_recall(pred, gold);
                    n_open += 1;
                }
                AnswerType::Closed => {
                    preds.push(pred);
                    golds.push(gold);
                }
            }
        }
        let n_closed = golds.len();
        Self {
            dataset: dataset.to_string(),
            model: model.to_string(),
            condition: condition.to_string(),
            open_recall: (n_open > 0).then(|| recall_sum / n_open as f64),
            closed_accuracy: (n_closed > 0).then(|| closed_accuracy(&preds, &golds).expect("equal lengths")),
            n_open,
            n_closed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

pub const REPORT_COLUMNS: [&str; 7] =
    ["dataset", "model", "condition", "open_recall", "closed_accuracy", "n_open", "n_closed"];

impl MetricReport {
    /// CSV with [`REPORT_COLUMNS`] in order; missing metrics are empty cells.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_COLUMNS)?;
        for r in &self.rows {
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            w.write_record([
                r.dataset.clone(),
                r.model.clone(),
                r.condition.clone(),
                fmt(r.open_recall),
                fmt(r.closed_accuracy),
                r.n_open.to_string(),
                r.n_closed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_examples() {
        assert_eq!(closed_accuracy(&["Yes"], &["yes"]).unwrap(), 1.0);
        assert_eq!(closed_accuracy(&["yes", "no"], &["no", "no"]).unwrap(), 0.5);
        assert_eq!(closed_accuracy(&["yes."], &["Yes"]).unwrap(), 1.0);
        assert_eq!(closed_accuracy(&["  No!? "], &["no"]).unwrap(), 1.0);
        assert_eq!(closed_accuracy(&["no way"], &["no"]).unwrap(), 0.0);
        assert_eq!(normalize_closed("Yes . "), "yes");
        assert_eq!(normalize_closed("lung, ."), "lung");
        assert!(matches!(closed_accuracy(&["a"], &["a", "b"]), Err(Error::LengthMismatch(1, 2))));
        assert_eq!(closed_accuracy::<&str, &str>(&[], &[]).unwrap(), 0.0);
    }

    #[test]
    fn open_examples() {
        assert_eq!(
            open_recall("this is hyaline arteriolosclerosis, severe", "hyaline arteriolosclerosis"),
            1.0
        );
        let r = open_recall_with("the left side of the lobe", "left lower lobe", &[]);
        assert!((r - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(open_recall("Left lower lobe.", "left lower lobe"), 1.0);
        assert_eq!(open_recall("", "liver"), 0.0);
        // Matching is per word, not per substring.
        assert_eq!(open_recall("livers", "liver"), 0.0);
    }

    #[test]
    fn stopword_only_gold_uses_all_words() {
        assert_eq!(keywords("in the", DEFAULT_STOPWORDS).len(), 2);
        assert_eq!(open_recall("in", "in the"), 0.5);
        assert_eq!(keywords("the liver", DEFAULT_STOPWORDS).len(), 1);
        assert_eq!(open_recall("?!", "..."), 0.0);
    }

    #[test]
    fn row_scoring_and_csv_layout() {
        let items = [
            (AnswerType::Closed, "yes", "yes"),
            (AnswerType::Closed, "no", "yes"),
            (AnswerType::Open, "left lobe", "left lower lobe"),
        ];
        let row = MetricRow::score("VQA-RAD", "toy", "ttt", items);
        assert_eq!(row.closed_accuracy, Some(0.5));
        assert!((row.open_recall.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((row.n_open, row.n_closed), (1, 2));
        let empty = MetricRow::score("d", "m", "native", std::iter::empty());
        assert_eq!((empty.open_recall, empty.closed_accuracy), (None, None));

        let report = MetricReport { rows: vec![row, empty] };
        let csv = report.to_csv_string().unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "dataset,model,condition,open_recall,closed_accuracy,n_open,n_closed"
        );
        assert_eq!(lines.next().unwrap(), "VQA-RAD,toy,ttt,0.666667,0.500000,1,2");
        assert_eq!(lines.next().unwrap(), "d,m,native,,,0,0");
        let json = report.to_json_string().unwrap();
        assert_eq!(serde_json::from_str::<MetricReport>(&json).unwrap(), report);
    }

    fn word() -> impl Strategy<Value = String> {
        prop::sample::select(vec![
            "yes", "no", "left", "lobe", "the", "of", "liver", "mass", "Lung", "x-ray", "ct.",
        ])
        .prop_map(str::to_string)
    }

    fn phrase() -> impl Strategy<Value = String> {
        prop::collection::vec(word(), 0..6).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn metrics_stay_in_unit_interval(
            pairs in prop::collection::vec((phrase(), phrase()), 0..20)
        ) {
            let (p, g): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let acc = closed_accuracy(&p, &g).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            for (pred, gold) in &pairs {
                let r = open_recall(pred, gold);
                prop_assert!((0.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn identical_lists_are_fully_accurate(golds in prop::collection::vec(phrase(), 1..20)) {
            prop_assert_eq!(closed_accuracy(&golds, &golds).unwrap(), 1.0);
        }

        #[test]
        fn recall_is_monotone_in_appended_words(
            pred in phrase(), extra in phrase(), gold in phrase()
        ) {
            let before = open_recall(&pred, &gold);
            let after = open_recall(&format!("{pred} {extra}"), &gold);
            prop_assert!(after >= before);
        }

        #[test]
        fn gold_recalls_itself(gold in phrase()) {
            prop_assume!(!words(&gold).is_empty());
            prop_assert_eq!(open_recall(&gold, &gold), 1.0);
        }

        #[test]
        fn closed_normalization_is_idempotent(text in "[a-zA-Z .,!?;:]{0,12}") {
            let once = normalize_closed(&text);
            prop_assert_eq!(normalize_closed(&once), once);
        }
    }
}
