//! A table-driven backbone whose conditionals are given explicitly.
//!
//! Each rule matches a context by view digest prefix, exact question and
//! exact token prefix, any of which may be a wildcard. The first matching
//! rule supplies the next-token distribution. Prompts are ignored, so every
//! prompt gradient is zero.
//!
//! Fixture format (one directive per line, `#` starts a comment):
//!
//! ```text
//! kind answer                 # grounding | answer
//! vocab 10
//! embed_dim 8                 # optional, default 8
//! rule * | * | * | uniform    # view | question | prefix | distribution
//! rule * | is it left? | ^ | 3:0.5 4:0.5
//! emit * | where? | {"bbox":[1,2,3,4]}
//! emit-ids * | * | 5,6,7
//! ```
//!
//! Views are `*` or a prefix of the hex image digest; questions are `*` or
//! the exact text; prefixes are `*` (any), `^` (empty) or comma separated
//! ids. Distributions are `uniform` or `id:prob` pairs (missing ids get zero
//! and the total must be 1). `emit` expands into certainty rules that spell
//! the text with the reference tokenizer of the kind (box strings are padded
//! to 32 tokens), followed by EOS; `emit-ids` does the same for raw ids.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use super::tokenizer::{self, EOS_TOKEN};
use super::{check_prompt, check_targets, Backbone, BackboneDescriptor, BackboneKind, DecodeState};
use crate::error::{Error, Result};
use crate::geometry::{Image, BOX_PAD_LEN};
use crate::prompt::SoftPrompt;

pub const SCRIPTED_EMBED_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ScriptRule {
    /// Hex digest prefix; `None` matches any view.
    pub view: Option<String>,
    pub question: Option<String>,
    pub prefix: Option<Vec<u32>>,
    pub probs: Vec<f64>,
}

impl ScriptRule {
    pub fn any(probs: Vec<f64>) -> Self {
        Self { view: None, question: None, prefix: None, probs }
    }

    fn matches(&self, digest: &str, question: &str, prefix: &[u32]) -> bool {
        self.view.as_deref().is_none_or(|v| digest.starts_with(v))
            && self.question.as_deref().is_none_or(|q| q == question)
            && self.prefix.as_deref().is_none_or(|p| p == prefix)
    }
}

#[derive(Clone, Debug)]
pub struct ScriptedBackbone {
    descriptor: BackboneDescriptor,
    rules: Vec<ScriptRule>,
}

fn certain(vocab: usize, token: u32) -> Vec<f64> {
    let mut p = vec![0.0; vocab];
    p[token as usize] = 1.0;
    p
}

fn spell(view: Option<String>, question: Option<String>, seq: &[u32], vocab: usize) -> Vec<ScriptRule> {
    (0..=seq.len())
        .map(|i| ScriptRule {
            view: view.clone(),
            question: question.clone(),
            prefix: Some(seq[..i].to_vec()),
            probs: certain(vocab, seq.get(i).copied().unwrap_or(EOS_TOKEN)),
        })
        .collect()
}

impl ScriptedBackbone {
    pub fn new(kind: BackboneKind, vocab: usize, rules: Vec<ScriptRule>) -> Result<Self> {
        Self::with_embed_dim(kind, vocab, SCRIPTED_EMBED_DIM, rules)
    }

    pub fn with_embed_dim(
        kind: BackboneKind,
        vocab: usize,
        embed_dim: usize,
        rules: Vec<ScriptRule>,
    ) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::InvalidDimensions(format!("vocabulary of {vocab} < 2")));
        }
        if embed_dim == 0 {
            return Err(Error::InvalidDimensions("embed_dim must be >= 1".into()));
        }
        for (i, r) in rules.iter().enumerate() {
            if r.probs.len() != vocab {
                return Err(Error::Script(format!(
                    "rule {i}: {} probabilities for a vocabulary of {vocab}",
                    r.probs.len()
                )));
            }
            if r.probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::Script(format!("rule {i}: negative or non-finite probability")));
            }
            let total: f64 = r.probs.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Script(format!("rule {i}: probabilities sum to {total}")));
            }
            if let Some(p) = &r.prefix {
                if let Some(&t) = p.iter().find(|&&t| t as usize >= vocab) {
                    return Err(Error::VocabRange { token: t, vocab });
                }
            }
        }
        let mut model = Self {
            descriptor: BackboneDescriptor {
                name: "scripted".into(),
                kind,
                vocab_size: vocab,
                embed_dim,
                fingerprint: String::new(),
                input_resolution: None,
            },
            rules,
        };
        model.descriptor.fingerprint = model.parameter_fingerprint();
        Ok(model)
    }

    /// Uniform over the vocabulary in every context.
    pub fn uniform(kind: BackboneKind, vocab: usize) -> Result<Self> {
        Self::new(kind, vocab, vec![ScriptRule::any(vec![1.0 / vocab as f64; vocab])])
    }

    /// Always emits `token` with certainty.
    pub fn constant(kind: BackboneKind, vocab: usize, token: u32) -> Result<Self> {
        if token as usize >= vocab {
            return Err(Error::VocabRange { token, vocab });
        }
        Self::new(kind, vocab, vec![ScriptRule::any(certain(vocab, token))])
    }

    /// Spells `seq` with certainty and then emits EOS, in any view/question.
    pub fn following(kind: BackboneKind, vocab: usize, seq: &[u32]) -> Result<Self> {
        if let Some(&t) = seq.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::VocabRange { token: t, vocab });
        }
        Self::new(kind, vocab, spell(None, None, seq, vocab))
    }

    /// Grounding model that emits `text` as a padded box string.
    pub fn emitting_box(text: &str, pad_len: usize) -> Result<Self> {
        let ids = tokenizer::encode_box_text(text, pad_len)?;
        Self::following(BackboneKind::Grounding, tokenizer::BOX_VOCAB_SIZE, &ids)
    }

    pub fn rules(&self) -> &[ScriptRule] {
        &self.rules
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut m = Self::from_fixture(&text)?;
        m.descriptor.name = format!("scripted:{}", path.as_ref().display());
        Ok(m)
    }

    pub fn from_fixture(text: &str) -> Result<Self> {
        let mut kind = None;
        let mut vocab = None;
        let mut embed_dim = SCRIPTED_EMBED_DIM;
        let mut rules = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let err = |msg: String| Error::Script(format!("line {}: {msg}", lineno + 1));
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (directive, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            match directive {
                "kind" => {
                    kind = Some(match rest {
                        "grounding" => BackboneKind::Grounding,
                        "answer" => BackboneKind::Answer,
                        other => return Err(err(format!("unknown kind `{other}`"))),
                    })
                }
                "vocab" => vocab = Some(rest.parse().map_err(|_| err(format!("bad vocab `{rest}`")))?),
                "embed_dim" => {
                    embed_dim = rest.parse().map_err(|_| err(format!("bad embed_dim `{rest}`")))?
                }
                "rule" | "emit" | "emit-ids" => {
                    let (Some(kind), Some(vocab)) = (kind, vocab) else {
                        return Err(err("`kind` and `vocab` must precede rules".into()));
                    };
                    let fields: Vec<&str> = rest.split('|').map(str::trim).collect();
                    let wild = |s: &str| (s != "*").then(|| s.to_string());
                    match (directive, fields.as_slice()) {
                        ("rule", [view, question, prefix, dist]) => rules.push(ScriptRule {
                            view: wild(view),
                            question: wild(question),
                            prefix: parse_prefix(prefix).map_err(&err)?,
                            probs: parse_dist(dist, vocab).map_err(&err)?,
                        }),
                        ("emit", [view, question, text]) => {
                            let ids = match kind {
                                BackboneKind::Grounding => tokenizer::encode_box_text(text, BOX_PAD_LEN)?,
                                BackboneKind::Answer => {
                                    let mut ids = tokenizer::encode_answer_text(text)?;
                                    ids.pop();
                                    ids
                                }
                            };
                            rules.extend(spell(wild(view), wild(question), &ids, vocab));
                        }
                        ("emit-ids", [view, question, ids]) => {
                            let ids = parse_ids(ids).map_err(&err)?;
                            rules.extend(spell(wild(view), wild(question), &ids, vocab));
                        }
                        _ => return Err(err(format!("wrong number of fields for `{directive}`"))),
                    }
                }
                other => return Err(err(format!("unknown directive `{other}`"))),
            }
        }
        let kind = kind.ok_or_else(|| Error::Script("missing `kind`".into()))?;
        let vocab = vocab.ok_or_else(|| Error::Script("missing `vocab`".into()))?;
        Self::with_embed_dim(kind, vocab, embed_dim, rules)
    }

    fn lookup(&self, digest: &str, question: &str, prefix: &[u32]) -> Result<&[f64]> {
        self.rules
            .iter()
            .find(|r| r.matches(digest, question, prefix))
            .map(|r| r.probs.as_slice())
            .ok_or_else(|| {
                Error::Unscripted(format!("view {}, question {question:?}, prefix {prefix:?}", &digest[..12]))
            })
    }
}

fn parse_ids(s: &str) -> std::result::Result<Vec<u32>, String> {
    s.split(',').map(|t| t.trim().parse::<u32>().map_err(|_| format!("bad token id `{t}`"))).collect()
}

fn parse_prefix(s: &str) -> std::result::Result<Option<Vec<u32>>, String> {
    match s {
        "*" => Ok(None),
        "^" => Ok(Some(Vec::new())),
        ids => parse_ids(ids).map(Some),
    }
}

fn parse_dist(s: &str, vocab: usize) -> std::result::Result<Vec<f64>, String> {
    if s == "uniform" {
        return Ok(vec![1.0 / vocab as f64; vocab]);
    }
    let mut probs = vec![0.0; vocab];
    for pair in s.split_whitespace() {
        let (id, p) = pair.split_once(':').ok_or_else(|| format!("bad pair `{pair}`"))?;
        let id: usize = id.parse().map_err(|_| format!("bad token id `{id}`"))?;
        let p: f64 = p.parse().map_err(|_| format!("bad probability `{p}`"))?;
        *probs.get_mut(id).ok_or_else(|| format!("token {id} outside vocabulary of {vocab}"))? += p;
    }
    Ok(probs)
}

struct ScriptState<'a> {
    model: &'a ScriptedBackbone,
    digest: String,
    question: String,
    prefix: Vec<u32>,
}

impl DecodeState for ScriptState<'_> {
    fn next_log_probs(&mut self) -> Result<Vec<f64>> {
        let probs = self.model.lookup(&self.digest, &self.question, &self.prefix)?;
        Ok(probs.iter().map(|p| p.ln()).collect())
    }

    fn push(&mut self, token: u32) -> Result<()> {
        let vocab = self.model.descriptor.vocab_size;
        if token as usize >= vocab {
            return Err(Error::VocabRange { token, vocab });
        }
        self.prefix.push(token);
        Ok(())
    }
}

impl Backbone for ScriptedBackbone {
    fn descriptor(&self) -> &BackboneDescriptor {
        &self.descriptor
    }

    fn parameter_fingerprint(&self) -> String {
        let mut text = format!("{} {}\n", self.descriptor.kind, self.descriptor.vocab_size);
        for r in &self.rules {
            let _ = writeln!(text, "{:?}|{:?}|{:?}|{:?}", r.view, r.question, r.prefix, r.probs);
        }
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    fn start<'a>(
        &'a self,
        view: &Image,
        question: &str,
        prompt: &SoftPrompt,
    ) -> Result<Box<dyn DecodeState + 'a>> {
        check_prompt(self, prompt)?;
        Ok(Box::new(ScriptState {
            model: self,
            digest: view.digest(),
            question: question.to_string(),
            prefix: Vec::new(),
        }))
    }

    fn logprob_gradient(
        &self,
        view: &Image,
        question: &str,
        prompt: &SoftPrompt,
        targets: &[u32],
        weights: &[f64],
    ) -> Result<Array2<f64>> {
        check_prompt(self, prompt)?;
        check_targets(self, targets)?;
        if weights.len() != targets.len() {
            return Err(Error::LengthMismatch(weights.len(), targets.len()));
        }
        // Surface unscripted contexts even though the gradient is zero.
        let digest = view.digest();
        for i in 0..targets.len() {
            self.lookup(&digest, question, &targets[..i])?;
        }
        Ok(Array2::zeros(prompt.shape()))
    }
}
