use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Deserialize;

use boxttt_core::eval::convert::{convert, SourceFormat};
use boxttt_core::eval::dataset::{split_stats, write_records};
use boxttt_core::eval::tables::{
    ablation_reference, check_ablation_consistency, check_claims, check_result_table, claims_reference,
    published_split, ResultTable,
};
use boxttt_core::{load_dataset, QaRecord, SplitStats};

use crate::adapt::{build_report, PredictionLine};
use crate::Failure;

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// JSON lines with `id`, `prediction`, and optionally `condition`.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub dataset_name: Option<String>,
    /// Model label in the report.
    #[arg(long, default_value = "model")]
    pub model: String,
    /// Also write report.csv and report.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Deserialize)]
struct LoosePrediction {
    id: String,
    prediction: String,
    #[serde(default)]
    condition: Option<String>,
}

fn list_ids(ids: &[String]) -> String {
    const SHOWN: usize = 20;
    let mut s = ids.iter().take(SHOWN).map(|i| format!("{i:?}")).collect::<Vec<_>>().join(", ");
    if ids.len() > SHOWN {
        s.push_str(&format!(" and {} more", ids.len() - SHOWN));
    }
    s
}

/// Aligns predictions with dataset records by id. Every record needs exactly
/// one prediction per condition present in the file.
pub fn align_predictions(text: &str, records: &[QaRecord]) -> Result<Vec<PredictionLine>> {
    let known: BTreeSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let mut lines = Vec::new();
    let mut seen: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut unknown = Vec::new();
    let mut duplicate = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let p: LoosePrediction = serde_json::from_str(raw)
            .map_err(|e| Failure::Data(format!("predictions line {}: {e}", i + 1)))?;
        let condition = p.condition.unwrap_or_else(|| "prediction".into());
        if !known.contains(p.id.as_str()) {
            unknown.push(p.id);
            continue;
        }
        if !seen.entry(condition.clone()).or_default().insert(p.id.clone()) {
            duplicate.push(format!("{}/{condition}", p.id));
            continue;
        }
        lines.push(PredictionLine {
            id: p.id,
            condition,
            prediction: p.prediction,
            bbox: None,
            box_flag: None,
            status: "ok".into(),
            error: None,
        });
    }
    let mut problems = Vec::new();
    if !unknown.is_empty() {
        problems.push(format!("ids not in the dataset: {}", list_ids(&unknown)));
    }
    if !duplicate.is_empty() {
        problems.push(format!("duplicate predictions: {}", list_ids(&duplicate)));
    }
    for (condition, ids) in &seen {
        let missing: Vec<String> =
            known.iter().filter(|id| !ids.contains(**id)).map(|id| id.to_string()).collect();
        if !missing.is_empty() {
            problems.push(format!("condition {condition}: no prediction for {}", list_ids(&missing)));
        }
    }
    if !problems.is_empty() {
        return Err(Failure::Data(problems.join("; ")).into());
    }
    Ok(lines)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let records = load_dataset(&args.dataset, args.dataset_name.as_deref())?;
    let text = fs::read_to_string(&args.predictions)
        .with_context(|| format!("reading {}", args.predictions.display()))?;
    let lines = align_predictions(&text, &records)?;
    let by_id: HashMap<&str, &QaRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let report = build_report(&lines, &by_id, &args.model);
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("report.csv"), report.to_csv_string()?)?;
        fs::write(out.join("report.json"), report.to_json_string()?)?;
    }
    print!("{}", report.to_csv_string()?);
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub dataset_name: Option<String>,
}

/// Renders split counts, with a `published` column comparing against the
/// shipped split table where one exists. The last row totals all records.
pub fn stats_table(records: &[QaRecord]) -> String {
    let mut out = String::from("dataset,split,images,qa,open,closed,published\n");
    for ((dataset, split), s) in split_stats(records) {
        let published = match published_split(&dataset, &split) {
            Some(p) if p == s => "match",
            Some(_) => "differs",
            None => "-",
        };
        out.push_str(&format!(
            "{dataset},{split},{},{},{},{},{published}\n",
            s.images, s.qa, s.open, s.closed
        ));
    }
    let all: Vec<&QaRecord> = records.iter().collect();
    let t = SplitStats::of(&all);
    out.push_str(&format!("total,-,{},{},{},{},-\n", t.images, t.qa, t.open, t.closed));
    out
}

pub fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let records = load_dataset(&args.dataset, args.dataset_name.as_deref())?;
    print!("{}", stats_table(&records));
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct CheckTablesArgs {
    /// Main-results CSV (`model,dataset,metric,native,ttt`); defaults to the
    /// shipped transcription.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

pub fn cmd_check_tables(args: &CheckTablesArgs) -> Result<()> {
    let reference = ResultTable::reference();
    let table = match &args.table {
        Some(p) => ResultTable::from_csv(&fs::read_to_string(p)?)?,
        None => reference.clone(),
    };
    let check = check_result_table(&table, &reference, 0.005);
    println!("model,dataset,metric,native,ttt,delta");
    for d in &check.deltas {
        println!(
            "{},{},{},{:.2},{:.2},{:+.2}",
            d.key.model, d.key.dataset, d.key.metric, d.native, d.ttt, d.delta
        );
    }
    let positive = check.deltas.iter().filter(|d| d.delta > 0.0).count();
    println!("cells {} positive {positive}", check.deltas.len());

    let mut problems = Vec::new();
    if positive != check.deltas.len() || check.deltas.is_empty() {
        problems.push(format!("{} cells without improvement", check.deltas.len() - positive));
    }
    for k in &check.missing {
        problems.push(format!("missing cell {k}"));
    }
    for k in &check.mismatched {
        problems.push(format!("cell {k} differs from the shipped transcription"));
    }
    let ablations = ablation_reference();
    for c in check_claims(&claims_reference(), &table, &ablations)? {
        let computed = c.computed.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("claim {}: computed {computed} {}", c.claim, if c.ok { "ok" } else { "FAIL" });
        if !c.ok {
            problems.push(format!("claim {} not reproduced", c.claim));
        }
    }
    problems.extend(check_ablation_consistency(&table, &ablations));
    if problems.is_empty() {
        println!("consistent");
        Ok(())
    } else {
        Err(Failure::Data(problems.join("; ")).into())
    }
}

#[derive(Debug, Clone, Args)]
pub struct ConvertArgs {
    /// Source layout: vqa-rad, slake, or pathvqa.
    #[arg(long)]
    pub format: SourceFormat,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Split to keep (VQA-RAD) or to label records with (SLAKE, PathVQA).
    #[arg(long)]
    pub split: Option<String>,
    /// Prefix joined to image names in the output.
    #[arg(long, default_value = "")]
    pub image_dir: String,
}

pub fn cmd_convert(args: &ConvertArgs) -> Result<()> {
    let text =
        fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let records = convert(args.format, &text, &args.input, args.split.as_deref(), &args.image_dir)?;
    write_records(&args.output, &records)?;
    eprintln!("wrote {} records to {}", records.len(), args.output.display());
    Ok(())
}
