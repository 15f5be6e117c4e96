//! Published result tables shipped as CSV, and arithmetic checks over them.
//!
//! * `table1.csv`: split sizes (`dataset,split,images,qa,open,closed`).
//! * `table2.csv`: main results (`model,dataset,metric,native,ttt`), percent.
//! * `table3.csv`: VQA-RAD ablation (`model,evidence_consistency,ema_teacher,open,closed`).
//! * `claims.csv`: numbers quoted in running text (`kind,model,dataset,metric,value,tolerance`).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::dataset::SplitStats;
use super::metrics::MetricRow;
use crate::error::{Error, Result};

pub const TABLE1_CSV: &str = include_str!("../../data/table1.csv");
pub const TABLE2_CSV: &str = include_str!("../../data/table2.csv");
pub const TABLE3_CSV: &str = include_str!("../../data/table3.csv");
pub const CLAIMS_CSV: &str = include_str!("../../data/claims.csv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Open,
    Closed,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Open => "open",
            Self::Closed => "closed",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub model: String,
    pub dataset: String,
    pub metric: Metric,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.model, self.dataset, self.metric)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultCell {
    pub model: String,
    pub dataset: String,
    pub metric: Metric,
    pub native: f64,
    pub ttt: f64,
}

impl ResultCell {
    pub fn key(&self) -> CellKey {
        CellKey { model: self.model.clone(), dataset: self.dataset.clone(), metric: self.metric }
    }

    pub fn delta(&self) -> f64 {
        self.ttt - self.native
    }
}

/// Native vs adapted scores per `(model, dataset, metric)`, in percent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub cells: Vec<ResultCell>,
}

impl ResultTable {
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let cells = rdr.deserialize().collect::<std::result::Result<Vec<ResultCell>, _>>()?;
        Ok(Self { cells })
    }

    /// The shipped main-results transcription.
    pub fn reference() -> Self {
        Self::from_csv(TABLE2_CSV).expect("shipped table parses")
    }

    /// Pairs `native` and `ttt` report rows, scaling metrics to percent.
    /// Rows with other conditions or without a metric are ignored.
    pub fn from_report_rows(rows: &[MetricRow]) -> Self {
        let mut pairs: BTreeMap<CellKey, (Option<f64>, Option<f64>)> = BTreeMap::new();
        for r in rows {
            for (metric, value) in [(Metric::Open, r.open_recall), (Metric::Closed, r.closed_accuracy)] {
                let Some(v) = value else { continue };
                let key = CellKey { model: r.model.clone(), dataset: r.dataset.clone(), metric };
                let slot = pairs.entry(key).or_default();
                match r.condition.as_str() {
                    "native" => slot.0 = Some(100.0 * v),
                    "ttt" => slot.1 = Some(100.0 * v),
                    _ => {}
                }
            }
        }
        let cells = pairs
            .into_iter()
            .filter_map(|(k, (n, t))| {
                Some(ResultCell { model: k.model, dataset: k.dataset, metric: k.metric, native: n?, ttt: t? })
            })
            .collect();
        Self { cells }
    }

    pub fn get(&self, model: &str, dataset: &str, metric: Metric) -> Option<&ResultCell> {
        self.cells.iter().find(|c| c.model == model && c.dataset == dataset && c.metric == metric)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellDelta {
    pub key: CellKey,
    pub native: f64,
    pub ttt: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TableCheck {
    pub deltas: Vec<CellDelta>,
    /// Reference cells absent from the ingested table.
    pub missing: Vec<CellKey>,
    /// Cells whose values differ from the reference by more than the tolerance.
    pub mismatched: Vec<CellKey>,
}

impl TableCheck {
    pub fn all_positive(&self) -> bool {
        !self.deltas.is_empty() && self.deltas.iter().all(|d| d.delta > 0.0)
    }

    pub fn is_consistent(&self) -> bool {
        self.missing.is_empty() && self.mismatched.is_empty()
    }
}

/// Per-cell improvements of `ingested`, with cells compared against `reference`
/// at `tolerance` (percentage points).
pub fn check_result_table(ingested: &ResultTable, reference: &ResultTable, tolerance: f64) -> TableCheck {
    let deltas = ingested
        .cells
        .iter()
        .map(|c| CellDelta { key: c.key(), native: c.native, ttt: c.ttt, delta: c.delta() })
        .collect();
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    for r in &reference.cells {
        match ingested.get(&r.model, &r.dataset, r.metric) {
            None => missing.push(r.key()),
            Some(c) => {
                if (c.native - r.native).abs() > tolerance || (c.ttt - r.ttt).abs() > tolerance {
                    mismatched.push(r.key());
                }
            }
        }
    }
    TableCheck { deltas, missing, mismatched }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub evidence_consistency: bool,
    pub ema_teacher: bool,
    pub open: f64,
    pub closed: f64,
}

pub fn ablation_reference() -> Vec<AblationRow> {
    let mut rdr = csv::Reader::from_reader(TABLE3_CSV.as_bytes());
    rdr.deserialize().collect::<std::result::Result<_, _>>().expect("shipped ablation table parses")
}

fn ablation<'a>(rows: &'a [AblationRow], model: &str, ev: bool, ema: bool) -> Option<&'a AblationRow> {
    rows.iter().find(|r| r.model == model && r.evidence_consistency == ev && r.ema_teacher == ema)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub kind: String,
    pub model: String,
    pub dataset: String,
    pub metric: String,
    pub value: f64,
    pub tolerance: f64,
}

impl fmt::Display for Claim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} = {}", self.kind, self.model, self.dataset, self.metric, self.value)
    }
}

pub fn claims_reference() -> Vec<Claim> {
    let mut rdr = csv::Reader::from_reader(CLAIMS_CSV.as_bytes());
    rdr.deserialize().collect::<std::result::Result<_, _>>().expect("shipped claims parse")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaimCheck {
    pub claim: Claim,
    pub computed: Option<f64>,
    pub ok: bool,
}

fn matches_pattern(pattern: &str, value: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => value.starts_with(prefix),
        None => pattern == value,
    }
}

fn evaluate_claim(claim: &Claim, table: &ResultTable, ablations: &[AblationRow]) -> Result<Option<f64>> {
    let metric = match claim.metric.as_str() {
        "open" => Metric::Open,
        "closed" => Metric::Closed,
        other => return Err(Error::Config(format!("unknown metric {other:?} in claim"))),
    };
    let selected: Vec<&ResultCell> = table
        .cells
        .iter()
        .filter(|c| {
            c.metric == metric
                && matches_pattern(&claim.model, &c.model)
                && matches_pattern(&claim.dataset, &c.dataset)
        })
        .collect();
    let deltas = selected.iter().map(|c| c.delta());
    let value = match claim.kind.as_str() {
        "native" => selected.first().map(|c| c.native),
        "ttt" => selected.first().map(|c| c.ttt),
        "delta" => selected.first().map(|c| c.delta()),
        "mean_delta" => (!selected.is_empty()).then(|| deltas.sum::<f64>() / selected.len() as f64),
        "delta_min" => deltas.reduce(f64::min),
        "delta_max" => deltas.reduce(f64::max),
        "ablation_full_minus_ema_only" | "ablation_full_minus_evidence_only" => {
            let full = ablation(ablations, &claim.model, true, true);
            let other = if claim.kind.ends_with("ema_only") {
                ablation(ablations, &claim.model, false, true)
            } else {
                ablation(ablations, &claim.model, true, false)
            };
            full.zip(other).map(|(f, o)| match metric {
                Metric::Open => f.open - o.open,
                Metric::Closed => f.closed - o.closed,
            })
        }
        other => return Err(Error::Config(format!("unknown claim kind {other:?}"))),
    };
    Ok(value)
}

/// Recomputes every claim from the tables. Unknown claim kinds are errors.
pub fn check_claims(
    claims: &[Claim],
    table: &ResultTable,
    ablations: &[AblationRow],
) -> Result<Vec<ClaimCheck>> {
    claims
        .iter()
        .map(|claim| {
            let computed = evaluate_claim(claim, table, ablations)?;
            let ok = computed.is_some_and(|v| (v - claim.value).abs() <= claim.tolerance + 1e-9);
            Ok(ClaimCheck { claim: claim.clone(), computed, ok })
        })
        .collect()
}

/// Ablation rows that must coincide with main-table VQA-RAD cells: the full
/// configuration against `ttt` and the all-off configuration against `native`.
pub fn check_ablation_consistency(table: &ResultTable, ablations: &[AblationRow]) -> Vec<String> {
    let mut problems = Vec::new();
    for row in ablations {
        let column: fn(&ResultCell) -> f64 = match (row.evidence_consistency, row.ema_teacher) {
            (true, true) => |c: &ResultCell| c.ttt,
            (false, false) => |c: &ResultCell| c.native,
            _ => continue,
        };
        for (metric, value) in [(Metric::Open, row.open), (Metric::Closed, row.closed)] {
            match table.get(&row.model, "VQA-RAD", metric) {
                Some(cell) if (column(cell) - value).abs() < 1e-9 => {}
                Some(cell) => problems.push(format!(
                    "{} {metric}: ablation {value} vs main table {}",
                    row.model,
                    column(cell)
                )),
                None => problems.push(format!("{} {metric}: missing from main table", row.model)),
            }
        }
    }
    problems
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitReference {
    pub dataset: String,
    pub split: String,
    pub images: usize,
    pub qa: usize,
    pub open: usize,
    pub closed: usize,
}

impl SplitReference {
    pub fn stats(&self) -> SplitStats {
        SplitStats { images: self.images, qa: self.qa, open: self.open, closed: self.closed }
    }
}

pub fn split_reference() -> Vec<SplitReference> {
    let mut rdr = csv::Reader::from_reader(TABLE1_CSV.as_bytes());
    rdr.deserialize().collect::<std::result::Result<_, _>>().expect("shipped split table parses")
}

/// Published counts for a split, matched case-insensitively.
pub fn published_split(dataset: &str, split: &str) -> Option<SplitStats> {
    split_reference()
        .into_iter()
        .find(|r| r.dataset.eq_ignore_ascii_case(dataset) && r.split.eq_ignore_ascii_case(split))
        .map(|r| r.stats())
}
