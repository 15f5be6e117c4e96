//! Language-modeling losses of the two adaptation steps.
//!
//! Each loss is a length-normalized negative log-likelihood of a fixed target
//! sequence under teacher forcing, returned together with its gradient with
//! respect to the one prompt it depends on. The box loss only ever sees the
//! evidence prompt and the answer losses only the answer prompt, so the
//! cross-gradients are zero by construction.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::{check_prompt, teacher_forced_logprobs, Backbone, TokenSequence};
use crate::error::{Error, Result};
use crate::geometry::Image;
use crate::prompt::SoftPrompt;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    /// Per-position negative log-likelihoods (empty for weighted composites).
    pub per_token: Vec<f64>,
    /// Divisor applied to the summed per-token terms.
    pub normalization: usize,
}

impl LossValue {
    fn composite(value: f64) -> Self {
        Self { value, per_token: Vec::new(), normalization: 0 }
    }
}

/// A loss together with its gradient with respect to its own prompt.
#[derive(Clone, Debug)]
pub struct Evaluated {
    pub loss: LossValue,
    pub grad: Array2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub const EVIDENCE_STEP: Self = Self { alpha: 1.0, beta: 0.0 };
    pub const ANSWER_STEP: Self = Self { alpha: 0.0, beta: 1.0 };
}

/// How the two per-view answer losses are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnsReduction {
    #[default]
    Sum,
    Mean,
}

impl std::str::FromStr for AnsReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            other => Err(Error::Config(format!("ans_reduction must be sum or mean, got `{other}`"))),
        }
    }
}

fn sequence_nll(
    model: &dyn Backbone,
    view: &Image,
    question: &str,
    prompt: &SoftPrompt,
    targets: &[u32],
) -> Result<Evaluated> {
    let logprobs = teacher_forced_logprobs(model, view, question, prompt, targets)?;
    let t = targets.len();
    let per_token: Vec<f64> = logprobs.iter().map(|lp| -lp).collect();
    let value = per_token.iter().sum::<f64>() / t as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grad = model.logprob_gradient(view, question, prompt, targets, &vec![-1.0 / t as f64; t])?;
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite("loss gradient".into()));
    }
    Ok(Evaluated { loss: LossValue { value, per_token, normalization: t }, grad })
}

/// Evidence loss: the validated box tokens scored on the ORIGINAL image.
///
/// `box_tokens` must be exactly `box_pad_len` long; padding positions count
/// towards the normalization.
pub fn box_loss(
    grounding: &dyn Backbone,
    image: &Image,
    question: &str,
    prompt_vis: &SoftPrompt,
    box_tokens: &[u32],
    box_pad_len: usize,
) -> Result<Evaluated> {
    if box_tokens.len() != box_pad_len {
        return Err(Error::BoxLength { expected: box_pad_len, actual: box_tokens.len() });
    }
    check_prompt(grounding, prompt_vis)?;
    sequence_nll(grounding, image, question, prompt_vis, box_tokens)
}

/// Student loss on one view against the teacher's decoded sequence.
pub fn answer_view_loss(
    answerer: &dyn Backbone,
    view: &Image,
    question: &str,
    prompt_ans: &SoftPrompt,
    teacher_seq: &TokenSequence,
) -> Result<Evaluated> {
    if teacher_seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    check_prompt(answerer, prompt_ans)?;
    sequence_nll(answerer, view, question, prompt_ans, teacher_seq.ids())
}

#[derive(Clone, Debug)]
pub struct CrossViewLoss {
    pub orig: LossValue,
    pub crop: LossValue,
    pub total: LossValue,
    pub grad: Array2<f64>,
}

/// Cross-view answer loss: `orig + crop` (or their mean).
#[allow(clippy::too_many_arguments)]
pub fn answer_loss(
    answerer: &dyn Backbone,
    image: &Image,
    crop: &Image,
    question: &str,
    prompt_ans: &SoftPrompt,
    s_orig: &TokenSequence,
    s_crop: &TokenSequence,
    reduction: AnsReduction,
) -> Result<CrossViewLoss> {
    let o = answer_view_loss(answerer, image, question, prompt_ans, s_orig)?;
    let c = answer_view_loss(answerer, crop, question, prompt_ans, s_crop)?;
    let scale = match reduction {
        AnsReduction::Sum => 1.0,
        AnsReduction::Mean => 0.5,
    };
    let value = scale * (o.loss.value + c.loss.value);
    let grad = (o.grad + c.grad) * scale;
    Ok(CrossViewLoss { orig: o.loss, crop: c.loss, total: LossValue::composite(value), grad })
}

/// `alpha * box + beta * ans`.
pub fn total_loss(box_loss: &LossValue, ans_loss: &LossValue, weights: LossWeights) -> Result<LossValue> {
    let LossWeights { alpha, beta } = weights;
    if !(alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(Error::Config(format!("loss weights must be non-negative, got ({alpha}, {beta})")));
    }
    // Skip zero-weighted terms so a non-finite unused loss cannot leak in.
    let term = |w: f64, v: f64| if w == 0.0 { 0.0 } else { w * v };
    Ok(LossValue::composite(term(alpha, box_loss.value) + term(beta, ans_loss.value)))
}
