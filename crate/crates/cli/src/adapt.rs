//! `boxttt adapt`: adaptation episodes over a dataset split.
//!
//! Writes into `--out`:
//!
//! * `config.json`: the effective [`RunConfig`]; `--config` replays it.
//! * `predictions.jsonl`: one line per record and condition, sorted by id.
//! * `traces.jsonl`: one line per mini-epoch of every adapted record.
//! * `report.csv`, `report.json`: metrics per dataset and condition.
//! * `prompts/` (with `--save-prompts`): final prompts per record.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::ValueEnum;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use boxttt_core::{
    build_backbone, load_dataset, native_answer, run_episode_observed, Backbone, BackboneKind, BackboneSpec,
    BoundingBox, EngineConfig, EpochRecord, Error as CoreError, Image, MetricReport, MetricRow, ParseFlag,
    QaRecord, SoftPrompt,
};

use crate::{AdaptArgs, Failure};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Conditions {
    Both,
    Native,
    Ttt,
}

impl Conditions {
    fn native(self) -> bool {
        matches!(self, Self::Both | Self::Native)
    }

    fn ttt(self) -> bool {
        matches!(self, Self::Both | Self::Ttt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub dataset_name: Option<String>,
    pub split: Option<String>,
    pub grounding: BackboneSpec,
    pub answerer: BackboneSpec,
    pub embed_dim: usize,
    pub model_name: String,
    pub conditions: Conditions,
    pub engine: EngineConfig,
}

impl RunConfig {
    pub fn from_args(args: &AdaptArgs) -> Result<Self> {
        if let Some(path) = &args.config {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
            let cfg: RunConfig = serde_json::from_str(&text)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            return Ok(cfg);
        }
        let dataset = args.dataset.clone().expect("clap requires --dataset without --config");
        let engine = EngineConfig {
            mini_epochs: args.epochs,
            optimizer: boxttt_core::OptimizerConfig {
                lr_vis: args.lr_vis,
                lr_ans: args.lr_ans,
                ema_decay: args.ema_decay,
            },
            evidence_tokens: args.evidence_tokens,
            answer_tokens: args.answer_tokens,
            max_answer_len: args.max_answer_len,
            box_pad_len: args.box_pad_len,
            evidence_consistency: !args.no_evidence_consistency,
            ema_teacher: !args.no_ema_teacher,
            ans_reduction: args.ans_reduction,
            seed: args.seed,
            share_prompts_per_image: args.share_prompts_per_image,
        };
        Ok(RunConfig {
            dataset,
            dataset_name: args.dataset_name.clone(),
            split: args.split.clone(),
            model_name: args
                .model_name
                .clone()
                .unwrap_or_else(|| format!("{}+{}", args.grounding, args.answerer)),
            grounding: args.grounding.clone(),
            answerer: args.answerer.clone(),
            embed_dim: args.embed_dim,
            conditions: args.conditions,
            engine,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.engine.validate().map_err(|e| Failure::Config(e.to_string()))?;
        if self.embed_dim == 0 {
            return Err(Failure::Config("embed_dim must be at least 1".into()).into());
        }
        if !self.dataset.is_file() {
            return Err(Failure::Config(format!("dataset {} does not exist", self.dataset.display())).into());
        }
        for spec in [&self.grounding, &self.answerer] {
            if let BackboneSpec::Scripted(p) = spec {
                if !p.is_file() {
                    return Err(Failure::Config(format!("script {} does not exist", p.display())).into());
                }
            }
        }
        Ok(())
    }
}

/// One line of `predictions.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub id: String,
    pub condition: String,
    pub prediction: String,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "box")]
    pub bbox: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_flag: Option<ParseFlag>,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    id: &'a str,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

struct Adapted {
    answer: String,
    bbox: Option<BoundingBox>,
    flag: Option<ParseFlag>,
    epochs: Vec<EpochRecord>,
    aborted: Option<String>,
    prompts: Option<(SoftPrompt, SoftPrompt)>,
}

struct Outcome {
    id: String,
    native: Option<String>,
    ttt: Option<Adapted>,
}

/// Resolves `synthetic:<seed>:<W>x<H>` or a path relative to the dataset file.
pub fn resolve_image(reference: &str, base: &Path) -> Result<Image> {
    if let Some(rest) = reference.strip_prefix("synthetic:") {
        let parsed = rest.split_once(':').and_then(|(seed, size)| {
            let (w, h) = size.split_once('x')?;
            Some((seed.parse().ok()?, w.parse().ok()?, h.parse().ok()?))
        });
        let (seed, w, h) = parsed
            .ok_or_else(|| Failure::Data(format!("malformed synthetic image reference {reference:?}")))?;
        return Ok(Image::synthetic(seed, w, h)?);
    }
    let path = base.join(reference);
    Image::open(&path).with_context(|| format!("loading image {}", path.display()))
}

fn run_group(
    records: &[&QaRecord],
    images: &HashMap<String, Arc<Image>>,
    grounding: &dyn Backbone,
    answerer: &dyn Backbone,
    cfg: &RunConfig,
) -> Result<Vec<Outcome>> {
    let mut carried: Option<(SoftPrompt, SoftPrompt)> = None;
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let image = &images[&rec.image];
        let with_id = |e: CoreError| anyhow::Error::new(e).context(format!("record {}", rec.id));
        let native = if cfg.conditions.native() {
            Some(native_answer(image, &rec.question, answerer, &cfg.engine).map_err(with_id)?.1)
        } else {
            None
        };
        let ttt = if cfg.conditions.ttt() {
            let initial = if cfg.engine.share_prompts_per_image { carried.take() } else { None };
            match run_episode_observed(
                image,
                &rec.question,
                grounding,
                answerer,
                &cfg.engine,
                initial,
                &mut (),
            ) {
                Ok(ep) => {
                    let flag = ep.trace.epochs.last().map(|r| r.b1_flag);
                    let prompts = (ep.prompt_vis, ep.prompt_ans);
                    if cfg.engine.share_prompts_per_image {
                        carried = Some(prompts.clone());
                    }
                    Some(Adapted {
                        answer: ep.answer_text,
                        bbox: Some(ep.bbox),
                        flag,
                        epochs: ep.trace.epochs,
                        aborted: None,
                        prompts: Some(prompts),
                    })
                }
                Err(abort) if matches!(abort.error, CoreError::NonFinite(_)) => {
                    warn!("record {}: {abort}; falling back to the native answer", rec.id);
                    let fallback = match &native {
                        Some(a) => a.clone(),
                        None => {
                            native_answer(image, &rec.question, answerer, &cfg.engine).map_err(with_id)?.1
                        }
                    };
                    Some(Adapted {
                        answer: fallback,
                        bbox: None,
                        flag: None,
                        aborted: Some(abort.to_string()),
                        epochs: abort.trace.epochs,
                        prompts: None,
                    })
                }
                Err(abort) => {
                    let epoch = abort.epoch;
                    return Err(with_id(abort.error).context(format!("mini-epoch {epoch}")));
                }
            }
        } else {
            None
        };
        out.push(Outcome { id: rec.id.clone(), native, ttt });
    }
    Ok(out)
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn write_lines<T: Serialize>(path: &Path, lines: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = String::new();
    for l in lines {
        buf.push_str(&serde_json::to_string(&l)?);
        buf.push('\n');
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

/// Runs a configured job and writes all outputs into `out`.
pub fn execute(cfg: &RunConfig, out: &Path, save_prompts: bool) -> Result<MetricReport> {
    cfg.validate()?;
    let mut records = load_dataset(&cfg.dataset, cfg.dataset_name.as_deref())?;
    if let Some(split) = &cfg.split {
        records.retain(|r| &r.split == split);
    }
    info!("{} records from {}", records.len(), cfg.dataset.display());

    let seed = cfg.engine.seed;
    let grounding = build_backbone(&cfg.grounding, BackboneKind::Grounding, seed, cfg.embed_dim)?;
    let answerer = build_backbone(&cfg.answerer, BackboneKind::Answer, seed, cfg.embed_dim)?;

    let base = cfg.dataset.parent().unwrap_or(Path::new("."));
    let mut refs: Vec<&str> = records.iter().map(|r| r.image.as_str()).collect();
    refs.sort_unstable();
    refs.dedup();
    let images: HashMap<String, Arc<Image>> = refs
        .par_iter()
        .map(|r| Ok((r.to_string(), Arc::new(resolve_image(r, base)?))))
        .collect::<Result<_>>()?;

    let groups: Vec<Vec<&QaRecord>> = if cfg.engine.share_prompts_per_image {
        let mut by_image: BTreeMap<&str, Vec<&QaRecord>> = BTreeMap::new();
        for r in &records {
            by_image.entry(r.image.as_str()).or_default().push(r);
        }
        by_image.into_values().collect()
    } else {
        records.iter().map(|r| vec![r]).collect()
    };
    let mut outcomes: Vec<Outcome> = groups
        .par_iter()
        .map(|g| run_group(g, &images, grounding.as_ref(), answerer.as_ref(), cfg))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    outcomes.sort_by(|a, b| a.id.cmp(&b.id));

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;

    let mut predictions = Vec::new();
    for o in &outcomes {
        if let Some(a) = &o.native {
            predictions.push(PredictionLine {
                id: o.id.clone(),
                condition: "native".into(),
                prediction: a.clone(),
                bbox: None,
                box_flag: None,
                status: "ok".into(),
                error: None,
            });
        }
        if let Some(t) = &o.ttt {
            predictions.push(PredictionLine {
                id: o.id.clone(),
                condition: "ttt".into(),
                prediction: t.answer.clone(),
                bbox: t.bbox,
                box_flag: t.flag,
                status: if t.aborted.is_some() { "aborted" } else { "ok" }.into(),
                error: t.aborted.clone(),
            });
        }
    }
    write_lines(&out.join("predictions.jsonl"), &predictions)?;
    write_lines(
        &out.join("traces.jsonl"),
        outcomes.iter().flat_map(|o| {
            o.ttt.iter().flat_map(move |t| t.epochs.iter().map(move |record| TraceLine { id: &o.id, record }))
        }),
    )?;

    if save_prompts {
        let dir = out.join("prompts");
        fs::create_dir_all(&dir)?;
        for o in &outcomes {
            if let Some((vis, ans)) = o.ttt.as_ref().and_then(|t| t.prompts.as_ref()) {
                let stem = file_stem(&o.id);
                vis.save(&dir.join(format!("{stem}.vis.txt")))?;
                ans.save(&dir.join(format!("{stem}.ans.txt")))?;
            }
        }
    }

    let by_id: HashMap<&str, &QaRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let report = build_report(&predictions, &by_id, &cfg.model_name);
    fs::write(out.join("report.csv"), report.to_csv_string()?)?;
    fs::write(out.join("report.json"), report.to_json_string()?)?;

    let aborted = predictions.iter().filter(|p| p.status == "aborted").count();
    if aborted > 0 {
        return Err(Failure::Numerical(format!(
            "{aborted} episode(s) aborted on non-finite losses; native answers were used for them"
        ))
        .into());
    }
    Ok(report)
}

/// Metric rows per `(dataset, condition)`, both sorted.
pub fn build_report(
    predictions: &[PredictionLine],
    records: &HashMap<&str, &QaRecord>,
    model: &str,
) -> MetricReport {
    let mut groups: BTreeMap<(String, String), Vec<(&QaRecord, &str)>> = BTreeMap::new();
    for p in predictions {
        let rec = records[p.id.as_str()];
        groups
            .entry((rec.dataset.clone(), p.condition.clone()))
            .or_default()
            .push((rec, p.prediction.as_str()));
    }
    let rows = groups
        .into_iter()
        .map(|((dataset, condition), items)| {
            MetricRow::score(
                &dataset,
                model,
                &condition,
                items.into_iter().map(|(r, pred)| (r.answer_type, pred, r.answer.as_str())),
            )
        })
        .collect();
    MetricReport { rows }
}

pub fn cmd_adapt(args: &AdaptArgs) -> Result<()> {
    let cfg = RunConfig::from_args(args)?;
    let report = match args.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Failure::Config(e.to_string()))?
            .install(|| execute(&cfg, &args.out, args.save_prompts)),
        None => execute(&cfg, &args.out, args.save_prompts),
    }?;
    print!("{}", report.to_csv_string()?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_references_resolve_without_files() {
        let img = resolve_image("synthetic:4:9x7", Path::new("/nonexistent")).unwrap();
        assert_eq!(img, Image::synthetic(4, 9, 7).unwrap());
        for bad in ["synthetic:4", "synthetic:x:9x7", "synthetic:4:9by7"] {
            assert!(resolve_image(bad, Path::new(".")).is_err(), "{bad}");
        }
    }

    #[test]
    fn ids_become_safe_file_stems() {
        assert_eq!(file_stem("a/b c.d"), "a_b_c_d");
        assert_eq!(file_stem("ok-1_2"), "ok-1_2");
    }
}
