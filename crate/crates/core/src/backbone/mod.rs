//! The contract every grounding or answer model must satisfy.
//!
//! A backbone exposes autoregressive next-token distributions conditioned on
//! an image view, a question, and a soft prompt, plus the gradient of a
//! weighted sum of teacher-forced log-probabilities with respect to the
//! prompt. Backbones are immutable; all adaptation state lives in
//! [`SoftPrompt`] values owned by the caller.

pub mod registry;
pub mod scripted;
pub mod tokenizer;
pub mod toy;

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{parse_box_string, Image, ParsedBox};
use crate::prompt::{PromptRole, SoftPrompt};

pub use tokenizer::EOS_TOKEN;

/// Longest answer the engine will decode by default.
pub const MAX_ANSWER_LEN: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Grounding,
    Answer,
}

impl BackboneKind {
    pub fn accepts(self, role: PromptRole) -> bool {
        match self {
            Self::Grounding => role == PromptRole::Evidence,
            Self::Answer => matches!(role, PromptRole::Answer | PromptRole::Teacher),
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Grounding => "grounding",
            Self::Answer => "answer",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneDescriptor {
    pub name: String,
    pub kind: BackboneKind,
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Hex SHA-256 of the parameters at construction time.
    pub fingerprint: String,
    /// Fixed input resolution, if the model resizes its inputs.
    pub input_resolution: Option<(u32, u32)>,
}

/// Incremental decoding state for one (view, question, prompt) context.
pub trait DecodeState {
    /// Log-probabilities over the vocabulary for the next token.
    fn next_log_probs(&mut self) -> Result<Vec<f64>>;
    /// Appends a token to the prefix.
    fn push(&mut self, token: u32) -> Result<()>;
}

pub trait Backbone: Send + Sync {
    fn descriptor(&self) -> &BackboneDescriptor;

    /// Fingerprint recomputed from the live parameters.
    fn parameter_fingerprint(&self) -> String;

    fn start<'a>(
        &'a self,
        view: &Image,
        question: &str,
        prompt: &SoftPrompt,
    ) -> Result<Box<dyn DecodeState + 'a>>;

    /// Gradient with respect to the prompt embeddings of
    /// `sum_t weights[t] * log P(targets[t] | targets[..t], view, question; prompt)`.
    fn logprob_gradient(
        &self,
        view: &Image,
        question: &str,
        prompt: &SoftPrompt,
        targets: &[u32],
        weights: &[f64],
    ) -> Result<Array2<f64>>;

    /// Tokenizes a box string padded to `pad_len`.
    fn encode_box(&self, text: &str, pad_len: usize) -> Result<Vec<u32>> {
        tokenizer::encode_box_text(text, pad_len)
    }

    /// Renders decoded ids as text.
    fn decode_text(&self, ids: &[u32]) -> String {
        match self.descriptor().kind {
            BackboneKind::Grounding => tokenizer::decode_box_tokens(ids),
            BackboneKind::Answer => tokenizer::decode_answer_tokens(ids),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logprobs: Option<Vec<f64>>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        Ok(Self { ids, logprobs: None })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn logprobs(&self) -> Option<&[f64]> {
        self.logprobs.as_deref()
    }
}

pub(crate) fn check_prompt(model: &dyn Backbone, prompt: &SoftPrompt) -> Result<()> {
    let desc = model.descriptor();
    if !desc.kind.accepts(prompt.role()) {
        return Err(Error::RoleMismatch { role: prompt.role().to_string(), kind: desc.kind.to_string() });
    }
    if prompt.embed_dim() != desc.embed_dim {
        return Err(Error::ShapeMismatch {
            expected: (prompt.num_tokens(), desc.embed_dim),
            actual: prompt.shape(),
        });
    }
    Ok(())
}

pub(crate) fn check_targets(model: &dyn Backbone, targets: &[u32]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::EmptySequence);
    }
    let vocab = model.descriptor().vocab_size;
    match targets.iter().find(|&&t| t as usize >= vocab) {
        Some(&token) => Err(Error::VocabRange { token, vocab }),
        None => Ok(()),
    }
}

/// Full next-token log-distributions at every teacher-forced position.
pub fn teacher_forced_log_distributions(
    model: &dyn Backbone,
    view: &Image,
    question: &str,
    prompt: &SoftPrompt,
    targets: &[u32],
) -> Result<Vec<Vec<f64>>> {
    check_prompt(model, prompt)?;
    check_targets(model, targets)?;
    let mut state = model.start(view, question, prompt)?;
    let mut out = Vec::with_capacity(targets.len());
    for &t in targets {
        out.push(state.next_log_probs()?);
        state.push(t)?;
    }
    Ok(out)
}

/// `log P(target_t | target_<t, view, question; prompt)` for every position.
pub fn teacher_forced_logprobs(
    model: &dyn Backbone,
    view: &Image,
    question: &str,
    prompt: &SoftPrompt,
    targets: &[u32],
) -> Result<Vec<f64>> {
    let dists = teacher_forced_log_distributions(model, view, question, prompt, targets)?;
    Ok(dists.iter().zip(targets).map(|(d, &t)| d[t as usize]).collect())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding. Ties go to the lowest id; the terminating EOS, when
/// emitted, is kept as the last token.
pub fn greedy_decode(
    model: &dyn Backbone,
    view: &Image,
    question: &str,
    prompt: &SoftPrompt,
    max_len: usize,
) -> Result<TokenSequence> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    check_prompt(model, prompt)?;
    let mut state = model.start(view, question, prompt)?;
    let mut ids = Vec::new();
    let mut logprobs = Vec::new();
    while ids.len() < max_len {
        let lp = state.next_log_probs()?;
        let tok = argmax(&lp);
        ids.push(tok as u32);
        logprobs.push(lp[tok]);
        if tok as u32 == EOS_TOKEN {
            break;
        }
        state.push(tok as u32)?;
    }
    Ok(TokenSequence { ids, logprobs: Some(logprobs) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingOutput {
    pub parsed: ParsedBox,
    /// Detokenized model output before parsing.
    pub raw_text: String,
    pub tokens: TokenSequence,
}

/// Decodes a box string for `view` and parses it against the view's size.
pub fn grounding_predict_box(
    model: &dyn Backbone,
    view: &Image,
    question: &str,
    prompt_vis: &SoftPrompt,
    box_pad_len: usize,
) -> Result<GroundingOutput> {
    if model.descriptor().kind != BackboneKind::Grounding {
        return Err(Error::RoleMismatch {
            role: prompt_vis.role().to_string(),
            kind: model.descriptor().kind.to_string(),
        });
    }
    let tokens = greedy_decode(model, view, question, prompt_vis, box_pad_len)?;
    let raw_text = model.decode_text(tokens.ids());
    let parsed = parse_box_string(&raw_text, view.width(), view.height());
    Ok(GroundingOutput { parsed, raw_text, tokens })
}

#[cfg(test)]
mod tests {
    use super::scripted::ScriptedBackbone;
    use super::toy::ToyBackbone;
    use super::*;
    use crate::geometry::{BoundingBox, ParseFlag};
    use crate::prompt::init_prompt;

    fn view() -> Image {
        Image::synthetic(1, 224, 224).unwrap()
    }

    #[test]
    fn certainty_script_gives_zero_logprobs() {
        let targets = [3, 1, 4, 1, 5];
        let m = ScriptedBackbone::following(BackboneKind::Answer, 10, &targets).unwrap();
        let p = init_prompt(PromptRole::Answer, 4, m.descriptor().embed_dim).unwrap();
        let lp = teacher_forced_logprobs(&m, &view(), "q", &p, &targets).unwrap();
        assert!(lp.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_script_gives_minus_ln_v() {
        let m = ScriptedBackbone::uniform(BackboneKind::Answer, 10).unwrap();
        let p = init_prompt(PromptRole::Answer, 4, m.descriptor().embed_dim).unwrap();
        let lp = teacher_forced_logprobs(&m, &view(), "q", &p, &[0, 9, 3]).unwrap();
        for v in lp {
            assert!((v + 10f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn targets_outside_vocab_are_rejected() {
        let m = ScriptedBackbone::uniform(BackboneKind::Answer, 10).unwrap();
        let p = init_prompt(PromptRole::Answer, 4, m.descriptor().embed_dim).unwrap();
        assert!(matches!(
            teacher_forced_logprobs(&m, &view(), "q", &p, &[1, 10]),
            Err(Error::VocabRange { token: 10, vocab: 10 })
        ));
        assert!(matches!(teacher_forced_logprobs(&m, &view(), "q", &p, &[]), Err(Error::EmptySequence)));
    }

    #[test]
    fn prompt_role_must_match_kind() {
        let m = ScriptedBackbone::uniform(BackboneKind::Grounding, 10).unwrap();
        let p = init_prompt(PromptRole::Answer, 4, m.descriptor().embed_dim).unwrap();
        assert!(matches!(
            teacher_forced_logprobs(&m, &view(), "q", &p, &[1]),
            Err(Error::RoleMismatch { .. })
        ));
    }

    #[test]
    fn toy_distributions_are_normalized() {
        let m = ToyBackbone::new(5, 10, 8, BackboneKind::Answer).unwrap();
        let p = init_prompt(PromptRole::Answer, 32, 8).unwrap();
        let dists =
            teacher_forced_log_distributions(&m, &view(), "is there a mass", &p, &[4, 2, 9, 0, 7]).unwrap();
        for d in dists {
            let total: f64 = d.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() <= 1e-10);
            assert!(d.iter().all(|&v| v <= 0.0));
        }
    }

    #[test]
    fn scripted_decode_follows_script() {
        let m = ScriptedBackbone::constant(BackboneKind::Answer, 10, 7).unwrap();
        let p = init_prompt(PromptRole::Answer, 2, m.descriptor().embed_dim).unwrap();
        let s = greedy_decode(&m, &view(), "q", &p, 5).unwrap();
        assert_eq!(s.ids(), &[7, 7, 7, 7, 7]);

        let m = ScriptedBackbone::following(BackboneKind::Answer, 10, &[4, 5, 6]).unwrap();
        let s = greedy_decode(&m, &view(), "q", &p, 128).unwrap();
        assert_eq!(s.ids(), &[4, 5, 6, EOS_TOKEN]);
        assert_eq!(s.logprobs().unwrap(), &[0.0; 4]);
    }

    #[test]
    fn single_step_decode_is_brute_force_argmax() {
        let m = ToyBackbone::new(17, 10, 8, BackboneKind::Answer).unwrap();
        let p = init_prompt(PromptRole::Answer, 32, 8).unwrap();
        let img = view();
        let s = greedy_decode(&m, &img, "what organ", &p, 1).unwrap();
        // Score every candidate as a one-token target.
        let scores: Vec<f64> = (0..10u32)
            .map(|t| teacher_forced_logprobs(&m, &img, "what organ", &p, &[t]).unwrap()[0])
            .collect();
        let best = (0..10).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
        assert_eq!(s.ids(), &[best as u32]);
        assert_eq!(greedy_decode(&m, &img, "what organ", &p, 1).unwrap(), s);
    }

    #[test]
    fn grounding_parses_scripted_box() {
        let m = ScriptedBackbone::emitting_box(r#"{"bbox":[10,20,30,40]}"#, 32).unwrap();
        let p = init_prompt(PromptRole::Evidence, 24, m.descriptor().embed_dim).unwrap();
        let out = grounding_predict_box(&m, &view(), "where", &p, 32).unwrap();
        assert_eq!(out.parsed.bbox, BoundingBox::new(10, 20, 30, 40).unwrap());
        assert_eq!(out.parsed.flag, ParseFlag::Parsed);
        assert_eq!(out.tokens.len(), 32);
    }

    #[test]
    fn grounding_falls_back_on_garbage() {
        // `}}{{` is encodable but not a box.
        let m = ScriptedBackbone::following(BackboneKind::Grounding, 23, &[13, 13, 12, 12]).unwrap();
        let p = init_prompt(PromptRole::Evidence, 24, m.descriptor().embed_dim).unwrap();
        let out = grounding_predict_box(&m, &view(), "where", &p, 32).unwrap();
        assert_eq!(out.parsed.bbox, BoundingBox::full(224, 224));
        assert_eq!(out.parsed.flag, ParseFlag::Fallback);
        assert_eq!(out.raw_text, "}}{{");
    }

    #[test]
    fn toy_grounding_is_deterministic() {
        let m = ToyBackbone::new(3, tokenizer::BOX_VOCAB_SIZE, 8, BackboneKind::Grounding).unwrap();
        let p = init_prompt(PromptRole::Evidence, 24, 8).unwrap();
        let img = Image::synthetic(9, 32, 24).unwrap();
        let first = grounding_predict_box(&m, &img, "where is the lesion", &p, 32).unwrap();
        for _ in 0..4 {
            assert_eq!(grounding_predict_box(&m, &img, "where is the lesion", &p, 32).unwrap(), first);
        }
    }
}
