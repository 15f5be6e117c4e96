//! The per-sample adaptation episode.
//!
//! Each mini-epoch runs, in order:
//!
//! 1. `b1 = G(I, q; P_vis)` and `I_crop = Crop(I, b1)`;
//! 2. `b2 = G(I_crop, q; P_vis)` (skipped in single-pass mode, where `b1`
//!    becomes its own target);
//! 3. one descent step on `P_vis` for the box loss of `b2` scored on `(I, q)`;
//! 4. teacher decodes `s_orig = F(I, q; T)` and `s_crop = F(I_crop, q; T)`;
//! 5. one descent step on `P_ans` for the cross-view answer loss;
//! 6. `T <- decay * T + (1 - decay) * P_ans` (or `T <- P_ans` without EMA).
//!
//! The teacher starts as a copy of the student. The episode returns the
//! greedy answer on the original image under the final `P_ans` and the box
//! `b1` of the last mini-epoch.

use std::fmt;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::backbone::{greedy_decode, grounding_predict_box, Backbone, GroundingOutput, TokenSequence};
use crate::error::{Error, Result};
use crate::geometry::{crop_and_pad, serialize_box, BoundingBox, Image, ParseFlag, BOX_PAD_LEN};
pub use crate::objectives::AnsReduction;
use crate::objectives::{answer_loss, box_loss, CrossViewLoss, LossValue};
use crate::prompt::{
    ema_update, init_prompt, sgd_step, sync_teacher, OptimizerConfig, PromptRole, SoftPrompt,
    DEFAULT_ANSWER_TOKENS, DEFAULT_EVIDENCE_TOKENS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub mini_epochs: usize,
    pub optimizer: OptimizerConfig,
    pub evidence_tokens: usize,
    pub answer_tokens: usize,
    pub max_answer_len: usize,
    pub box_pad_len: usize,
    /// Two-pass grounding with the crop pass as the box target.
    pub evidence_consistency: bool,
    /// EMA teacher; when off the teacher is tied to the student.
    pub ema_teacher: bool,
    pub ans_reduction: AnsReduction,
    pub seed: u64,
    /// Carry prompts across questions on the same image.
    pub share_prompts_per_image: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mini_epochs: 20,
            optimizer: OptimizerConfig::default(),
            evidence_tokens: DEFAULT_EVIDENCE_TOKENS,
            answer_tokens: DEFAULT_ANSWER_TOKENS,
            max_answer_len: crate::backbone::MAX_ANSWER_LEN,
            box_pad_len: BOX_PAD_LEN,
            evidence_consistency: true,
            ema_teacher: true,
            ans_reduction: AnsReduction::Sum,
            seed: 0,
            share_prompts_per_image: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mini_epochs", self.mini_epochs),
            ("evidence_tokens", self.evidence_tokens),
            ("answer_tokens", self.answer_tokens),
            ("max_answer_len", self.max_answer_len),
            ("box_pad_len", self.box_pad_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        self.optimizer.validate()
    }
}

/// One mini-epoch of the trace, serialized as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub b1: BoundingBox,
    pub b1_flag: ParseFlag,
    pub b1_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b2: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b2_flag: Option<ParseFlag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b2_text: Option<String>,
    pub loss_box: f64,
    pub loss_ans_orig: f64,
    pub loss_ans_crop: f64,
    pub loss_ans: f64,
    pub norm_vis: f64,
    pub norm_ans: f64,
    pub norm_teacher: f64,
    pub teacher_student_distance: f64,
    pub teacher_orig: Vec<u32>,
    pub teacher_crop: Vec<u32>,
    pub teacher_orig_text: String,
    pub teacher_crop_text: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub epochs: Vec<EpochRecord>,
    pub final_answer: Option<String>,
    pub final_box: Option<BoundingBox>,
    pub grounding_fingerprint: String,
    pub answer_fingerprint: String,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub answer: TokenSequence,
    pub answer_text: String,
    pub bbox: BoundingBox,
    pub trace: EpisodeTrace,
    pub prompt_vis: SoftPrompt,
    pub prompt_ans: SoftPrompt,
}

/// A failed episode with the trace recorded up to the failure.
#[derive(Debug)]
pub struct EpisodeAbort {
    /// Mini-epoch in which the failure happened (0 = before the loop).
    pub epoch: usize,
    pub error: Error,
    pub trace: Box<EpisodeTrace>,
}

impl fmt::Display for EpisodeAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "episode aborted in mini-epoch {}: {}", self.epoch, self.error)
    }
}

impl std::error::Error for EpisodeAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Evidence,
    Answer,
    TeacherRefresh,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub vis: SoftPrompt,
    pub ans: SoftPrompt,
    pub teacher: SoftPrompt,
}

/// Hook for inspecting prompt state around every update.
pub trait EpisodeObserver {
    fn on_phase(&mut self, epoch: usize, phase: Phase, before: &PromptSet, after: &PromptSet);
}

impl EpisodeObserver for () {
    fn on_phase(&mut self, _: usize, _: Phase, _: &PromptSet, _: &PromptSet) {}
}

#[derive(Clone, Debug)]
pub struct EvidenceOutcome {
    pub prompt_vis: SoftPrompt,
    pub b1: GroundingOutput,
    pub crop: Image,
    pub b2: Option<GroundingOutput>,
    pub loss: LossValue,
}

/// Grounding passes plus one descent step on the evidence prompts.
pub fn evidence_step(
    image: &Image,
    question: &str,
    grounding: &dyn Backbone,
    prompt_vis: &SoftPrompt,
    config: &EngineConfig,
) -> Result<EvidenceOutcome> {
    let b1 = grounding_predict_box(grounding, image, question, prompt_vis, config.box_pad_len)?;
    let target = grounding.descriptor().input_resolution.unwrap_or(image.size());
    let crop = crop_and_pad(image, &b1.parsed.bbox, target)?;
    let b2 = if config.evidence_consistency {
        Some(grounding_predict_box(grounding, &crop, question, prompt_vis, config.box_pad_len)?)
    } else {
        None
    };
    let validated = b2.as_ref().unwrap_or(&b1).parsed.bbox;
    let tokens = grounding.encode_box(&serialize_box(&validated).text, config.box_pad_len)?;
    let eval = box_loss(grounding, image, question, prompt_vis, &tokens, config.box_pad_len)?;
    let prompt_vis = sgd_step(prompt_vis, &eval.grad, config.optimizer.lr_vis)?;
    Ok(EvidenceOutcome { prompt_vis, b1, crop, b2, loss: eval.loss })
}

#[derive(Clone, Debug)]
pub struct AnswerOutcome {
    pub prompt_ans: SoftPrompt,
    pub s_orig: TokenSequence,
    pub s_crop: TokenSequence,
    pub loss: CrossViewLoss,
}

/// Teacher decoding on both views plus one descent step on the answer prompts.
/// The teacher itself is not modified.
pub fn answer_step(
    image: &Image,
    crop: &Image,
    question: &str,
    answerer: &dyn Backbone,
    prompt_ans: &SoftPrompt,
    teacher: &SoftPrompt,
    config: &EngineConfig,
) -> Result<AnswerOutcome> {
    let s_orig = greedy_decode(answerer, image, question, teacher, config.max_answer_len)?;
    let s_crop = greedy_decode(answerer, crop, question, teacher, config.max_answer_len)?;
    let loss =
        answer_loss(answerer, image, crop, question, prompt_ans, &s_orig, &s_crop, config.ans_reduction)?;
    let prompt_ans = sgd_step(prompt_ans, &loss.grad, config.optimizer.lr_ans)?;
    Ok(AnswerOutcome { prompt_ans, s_orig, s_crop, loss })
}

/// Answer of the unadapted model: greedy decoding under zero prompts.
pub fn native_answer(
    image: &Image,
    question: &str,
    answerer: &dyn Backbone,
    config: &EngineConfig,
) -> Result<(TokenSequence, String)> {
    let p = init_prompt(PromptRole::Answer, config.answer_tokens, answerer.descriptor().embed_dim)?;
    let seq = greedy_decode(answerer, image, question, &p, config.max_answer_len)?;
    let text = answerer.decode_text(seq.ids());
    Ok((seq, text))
}

/// Runs one episode from zero-initialized prompts.
pub fn run_episode(
    image: &Image,
    question: &str,
    grounding: &dyn Backbone,
    answerer: &dyn Backbone,
    config: &EngineConfig,
) -> std::result::Result<Episode, EpisodeAbort> {
    run_episode_observed(image, question, grounding, answerer, config, None, &mut ())
}

/// Runs one episode, optionally starting from existing `(P_vis, P_ans)`, and
/// reports every prompt update to `observer`.
pub fn run_episode_observed(
    image: &Image,
    question: &str,
    grounding: &dyn Backbone,
    answerer: &dyn Backbone,
    config: &EngineConfig,
    initial: Option<(SoftPrompt, SoftPrompt)>,
    observer: &mut dyn EpisodeObserver,
) -> std::result::Result<Episode, EpisodeAbort> {
    let mut trace = EpisodeTrace {
        grounding_fingerprint: grounding.parameter_fingerprint(),
        answer_fingerprint: answerer.parameter_fingerprint(),
        ..Default::default()
    };
    let mut epoch = 0;
    let outcome =
        episode_loop(image, question, grounding, answerer, config, initial, observer, &mut trace, &mut epoch);
    let outcome = outcome.and_then(|ep| {
        let g = grounding.parameter_fingerprint();
        let a = answerer.parameter_fingerprint();
        for (before, after) in [(&trace.grounding_fingerprint, g), (&trace.answer_fingerprint, a)] {
            if *before != after {
                return Err(Error::BackboneMutated { before: before.clone(), after });
            }
        }
        Ok(ep)
    });
    match outcome {
        Ok((answer, answer_text, bbox, prompt_vis, prompt_ans)) => {
            trace.final_answer = Some(answer_text.clone());
            trace.final_box = Some(bbox);
            Ok(Episode { answer, answer_text, bbox, trace, prompt_vis, prompt_ans })
        }
        Err(error) => Err(EpisodeAbort { epoch, error, trace: Box::new(trace) }),
    }
}

type LoopOutput = (TokenSequence, String, BoundingBox, SoftPrompt, SoftPrompt);

#[allow(clippy::too_many_arguments)]
fn episode_loop(
    image: &Image,
    question: &str,
    grounding: &dyn Backbone,
    answerer: &dyn Backbone,
    config: &EngineConfig,
    initial: Option<(SoftPrompt, SoftPrompt)>,
    observer: &mut dyn EpisodeObserver,
    trace: &mut EpisodeTrace,
    epoch: &mut usize,
) -> Result<LoopOutput> {
    config.validate()?;
    let (vis, ans) = match initial {
        Some(pair) => pair,
        None => (
            init_prompt(PromptRole::Evidence, config.evidence_tokens, grounding.descriptor().embed_dim)?,
            init_prompt(PromptRole::Answer, config.answer_tokens, answerer.descriptor().embed_dim)?,
        ),
    };
    let teacher = sync_teacher(&ans);
    let mut state = PromptSet { vis, ans, teacher };
    let mut last_box = None;

    for e in 1..=config.mini_epochs {
        *epoch = e;
        let ev = evidence_step(image, question, grounding, &state.vis, config)?;
        let next = PromptSet { vis: ev.prompt_vis.clone(), ..state.clone() };
        observer.on_phase(e, Phase::Evidence, &state, &next);
        state = next;

        let an = answer_step(image, &ev.crop, question, answerer, &state.ans, &state.teacher, config)?;
        let next = PromptSet { ans: an.prompt_ans.clone(), ..state.clone() };
        observer.on_phase(e, Phase::Answer, &state, &next);
        state = next;

        let teacher = if config.ema_teacher {
            ema_update(&state.teacher, &state.ans, config.optimizer.ema_decay)?
        } else {
            sync_teacher(&state.ans)
        };
        let next = PromptSet { teacher, ..state.clone() };
        observer.on_phase(e, Phase::TeacherRefresh, &state, &next);
        state = next;

        let record = EpochRecord {
            epoch: e,
            b1: ev.b1.parsed.bbox,
            b1_flag: ev.b1.parsed.flag,
            b1_text: ev.b1.raw_text.clone(),
            b2: ev.b2.as_ref().map(|b| b.parsed.bbox),
            b2_flag: ev.b2.as_ref().map(|b| b.parsed.flag),
            b2_text: ev.b2.as_ref().map(|b| b.raw_text.clone()),
            loss_box: ev.loss.value,
            loss_ans_orig: an.loss.orig.value,
            loss_ans_crop: an.loss.crop.value,
            loss_ans: an.loss.total.value,
            norm_vis: state.vis.norm(),
            norm_ans: state.ans.norm(),
            norm_teacher: state.teacher.norm(),
            teacher_student_distance: state.teacher.distance(&state.ans)?,
            teacher_orig_text: answerer.decode_text(an.s_orig.ids()),
            teacher_crop_text: answerer.decode_text(an.s_crop.ids()),
            teacher_orig: an.s_orig.ids().to_vec(),
            teacher_crop: an.s_crop.ids().to_vec(),
        };
        debug!(
            "mini-epoch {e}: box {} loss_box {:.6} loss_ans {:.6}",
            record.b1, record.loss_box, record.loss_ans
        );
        trace.epochs.push(record);
        last_box = Some(ev.b1.parsed.bbox);
    }

    let answer = greedy_decode(answerer, image, question, &state.ans, config.max_answer_len)?;
    let text = answerer.decode_text(answer.ids());
    let bbox = last_box.expect("mini_epochs >= 1");
    Ok((answer, text, bbox, state.vis, state.ans))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::scripted::ScriptedBackbone;
    use crate::backbone::tokenizer::{ANSWER_VOCAB_SIZE, BOX_VOCAB_SIZE};
    use crate::backbone::toy::ToyBackbone;
    use crate::backbone::BackboneKind;

    fn toy_pair(seed: u64) -> (ToyBackbone, ToyBackbone) {
        (
            ToyBackbone::new(seed, BOX_VOCAB_SIZE, 8, BackboneKind::Grounding).unwrap(),
            ToyBackbone::new(seed, ANSWER_VOCAB_SIZE, 8, BackboneKind::Answer).unwrap(),
        )
    }

    #[test]
    fn defaults_match_reference_settings() {
        let c = EngineConfig::default();
        assert_eq!(c.mini_epochs, 20);
        assert_eq!((c.optimizer.lr_vis, c.optimizer.lr_ans, c.optimizer.ema_decay), (1e-3, 5e-4, 0.9));
        assert_eq!((c.evidence_tokens, c.answer_tokens), (24, 32));
        assert_eq!((c.max_answer_len, c.box_pad_len), (128, 32));
        assert!(c.evidence_consistency && c.ema_teacher && !c.share_prompts_per_image);
        assert_eq!(c.ans_reduction, AnsReduction::Sum);
    }

    #[test]
    fn zero_epochs_rejected() {
        let c = EngineConfig { mini_epochs: 0, ..Default::default() };
        assert!(c.validate().is_err());
        let (g, f) = toy_pair(0);
        let img = Image::synthetic(0, 8, 8).unwrap();
        let abort = run_episode(&img, "q", &g, &f, &c).unwrap_err();
        assert_eq!(abort.epoch, 0);
        assert!(matches!(abort.error, Error::Config(_)));
    }

    #[test]
    fn certainty_scripts_are_a_fixed_point() {
        let g = ScriptedBackbone::emitting_box(r#"{"bbox":[2,2,6,6]}"#, 32).unwrap();
        let f = ScriptedBackbone::following(BackboneKind::Answer, ANSWER_VOCAB_SIZE, &[1]).unwrap();
        let img = Image::synthetic(1, 8, 8).unwrap();
        let c = EngineConfig { mini_epochs: 1, ..Default::default() };
        let ep = run_episode(&img, "is it?", &g, &f, &c).unwrap();
        assert_eq!(ep.answer_text, "yes");
        assert_eq!(ep.bbox, BoundingBox::new(2, 2, 6, 6).unwrap());
        let r = &ep.trace.epochs[0];
        assert_eq!((r.loss_box, r.loss_ans), (0.0, 0.0));
        assert_eq!(r.b2, Some(BoundingBox::new(2, 2, 6, 6).unwrap()));
        assert_eq!((ep.prompt_vis.norm(), ep.prompt_ans.norm()), (0.0, 0.0));
    }

    #[test]
    fn garbage_grounding_falls_back_to_full_image() {
        let g = ScriptedBackbone::following(BackboneKind::Grounding, BOX_VOCAB_SIZE, &[13, 12]).unwrap();
        let img = Image::synthetic(1, 8, 6).unwrap();
        let c = EngineConfig { mini_epochs: 1, ..Default::default() };
        let p = init_prompt(PromptRole::Evidence, 24, 8).unwrap();
        // The full-box string is unscripted, so use the step directly and
        // expect the loss lookup to be the only failure point.
        let err = evidence_step(&img, "q", &g, &p, &c).unwrap_err();
        assert!(matches!(err, Error::Unscripted(_)));

        let (tg, _) = toy_pair(4);
        let out = evidence_step(&img, "q", &tg, &p, &c).unwrap();
        assert_eq!(out.b1.parsed.flag, ParseFlag::Fallback);
        assert_eq!(out.crop, img);
    }

    #[test]
    fn single_pass_has_no_second_box() {
        let (g, f) = toy_pair(2);
        let img = Image::synthetic(3, 12, 12).unwrap();
        let c = EngineConfig { mini_epochs: 2, evidence_consistency: false, ..Default::default() };
        let ep = run_episode(&img, "q", &g, &f, &c).unwrap();
        for r in &ep.trace.epochs {
            assert!(r.b2.is_none() && r.b2_flag.is_none() && r.b2_text.is_none());
            let line = serde_json::to_string(r).unwrap();
            assert!(!line.contains("\"b2"));
        }
    }

    #[test]
    fn tied_teacher_has_zero_distance() {
        let (g, f) = toy_pair(5);
        let img = Image::synthetic(3, 12, 12).unwrap();
        let c = EngineConfig { mini_epochs: 3, ema_teacher: false, ..Default::default() };
        let ep = run_episode(&img, "what is shown", &g, &f, &c).unwrap();
        assert!(ep.trace.epochs.iter().all(|r| r.teacher_student_distance == 0.0));
        assert!(ep.prompt_ans.norm() > 0.0);
    }

    #[test]
    fn trace_has_one_entry_per_epoch_and_round_trips() {
        let (g, f) = toy_pair(6);
        let img = Image::synthetic(3, 10, 7).unwrap();
        let c = EngineConfig { mini_epochs: 4, ..Default::default() };
        let ep = run_episode(&img, "q", &g, &f, &c).unwrap();
        assert_eq!(ep.trace.epochs.len(), 4);
        let json = serde_json::to_string(&ep.trace).unwrap();
        assert_eq!(serde_json::from_str::<EpisodeTrace>(&json).unwrap(), ep.trace);
        assert_eq!(ep.trace.final_box, Some(ep.trace.epochs[3].b1));
    }

    #[test]
    fn initial_prompts_are_respected() {
        let (g, f) = toy_pair(7);
        let img = Image::synthetic(3, 10, 7).unwrap();
        let c = EngineConfig { mini_epochs: 1, ..Default::default() };
        let first = run_episode(&img, "q", &g, &f, &c).unwrap();
        let resumed = run_episode_observed(
            &img,
            "q",
            &g,
            &f,
            &c,
            Some((first.prompt_vis.clone(), first.prompt_ans.clone())),
            &mut (),
        )
        .unwrap();
        let two = run_episode(&img, "q", &g, &f, &EngineConfig { mini_epochs: 2, ..c.clone() }).unwrap();
        // P_vis evolves independently of the teacher, so resuming matches.
        assert_eq!(resumed.prompt_vis, two.prompt_vis);
    }
}
