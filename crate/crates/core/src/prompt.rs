//! Soft prompts: the only trainable state of an adaptation episode.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EVIDENCE_TOKENS: usize = 24;
pub const DEFAULT_ANSWER_TOKENS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptRole {
    /// Conditions the grounding model.
    Evidence,
    /// Conditions the answer model (student).
    Answer,
    /// EMA copy of the answer prompts.
    Teacher,
}

impl fmt::Display for PromptRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Evidence => "evidence",
            Self::Answer => "answer",
            Self::Teacher => "teacher",
        })
    }
}

impl FromStr for PromptRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "evidence" => Ok(Self::Evidence),
            "answer" => Ok(Self::Answer),
            "teacher" => Ok(Self::Teacher),
            other => Err(Error::Checkpoint(format!("unknown role `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftPrompt {
    role: PromptRole,
    embeddings: Array2<f64>,
}

impl SoftPrompt {
    /// Wraps an embedding matrix, rejecting empty shapes and non-finite values.
    pub fn from_embeddings(role: PromptRole, embeddings: Array2<f64>) -> Result<Self> {
        let (n, d) = embeddings.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidDimensions(format!("prompt shape {n}x{d}")));
        }
        if !embeddings.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("{role} prompt")));
        }
        Ok(Self { role, embeddings })
    }

    pub fn role(&self) -> PromptRole {
        self.role
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn num_tokens(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.embeddings.dim()
    }

    pub fn norm(&self) -> f64 {
        self.embeddings.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius distance to another prompt of the same shape.
    pub fn distance(&self, other: &SoftPrompt) -> Result<f64> {
        check_shape(self.shape(), other.shape())?;
        Ok(self
            .embeddings
            .iter()
            .zip(other.embeddings.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Same values under another role.
    pub fn with_role(&self, role: PromptRole) -> Self {
        Self { role, embeddings: self.embeddings.clone() }
    }

    /// Writes the text checkpoint format:
    ///
    /// ```text
    /// boxttt-prompt v1
    /// role <evidence|answer|teacher>
    /// shape <rows> <cols>
    /// dtype f64
    /// <cols values per line, shortest round-trip decimal form>
    /// ```
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let (n, d) = self.shape();
        writeln!(w, "boxttt-prompt v1")?;
        writeln!(w, "role {}", self.role)?;
        writeln!(w, "shape {n} {d}")?;
        writeln!(w, "dtype f64")?;
        for row in self.embeddings.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut header = |expect: &str| -> Result<String> {
            let line =
                lines.next().ok_or_else(|| Error::Checkpoint(format!("missing `{expect}` line")))??;
            line.strip_prefix(expect)
                .map(|rest| rest.trim().to_string())
                .ok_or_else(|| Error::Checkpoint(format!("expected `{expect}`, got `{line}`")))
        };
        header("boxttt-prompt v1")?;
        let role: PromptRole = header("role")?.parse()?;
        let shape = header("shape")?;
        let dims: Vec<usize> = shape
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::Checkpoint(format!("bad shape `{shape}`"))))
            .collect::<Result<_>>()?;
        let [n, d] = dims[..] else {
            return Err(Error::Checkpoint(format!("bad shape `{shape}`")));
        };
        let dtype = header("dtype")?;
        if dtype != "f64" {
            return Err(Error::Checkpoint(format!("unsupported dtype `{dtype}`")));
        }
        let mut values = Vec::with_capacity(n * d);
        for line in lines {
            let line = line?;
            for tok in line.split_whitespace() {
                values.push(tok.parse::<f64>().map_err(|_| Error::Checkpoint(format!("bad value `{tok}`")))?);
            }
        }
        let embeddings =
            Array2::from_shape_vec((n, d), values).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Self::from_embeddings(role, embeddings)
    }
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(BufReader::new(File::open(path)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr_vis: f64,
    pub lr_ans: f64,
    pub ema_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr_vis: 1e-3, lr_ans: 5e-4, ema_decay: 0.9 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("lr_vis", self.lr_vis), ("lr_ans", self.lr_ans)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        check_decay(self.ema_decay)
    }
}

fn check_decay(decay: f64) -> Result<()> {
    if decay > 0.0 && decay < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("ema decay must lie in (0,1), got {decay}")))
    }
}

fn check_shape(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected, actual })
    }
}

/// All-zero prompt of the requested shape.
pub fn init_prompt(role: PromptRole, num_tokens: usize, embed_dim: usize) -> Result<SoftPrompt> {
    SoftPrompt::from_embeddings(role, Array2::zeros((num_tokens, embed_dim)))
}

/// Plain gradient descent: `P - lr * g`.
pub fn sgd_step(prompt: &SoftPrompt, gradient: &Array2<f64>, lr: f64) -> Result<SoftPrompt> {
    check_shape(prompt.shape(), gradient.dim())?;
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if !gradient.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("{} gradient", prompt.role)));
    }
    let embeddings = &prompt.embeddings - &(gradient * lr);
    SoftPrompt::from_embeddings(prompt.role, embeddings)
}

/// `decay * teacher + (1 - decay) * student`. The result keeps the teacher's role.
pub fn ema_update(teacher: &SoftPrompt, student: &SoftPrompt, decay: f64) -> Result<SoftPrompt> {
    check_shape(teacher.shape(), student.shape())?;
    check_decay(decay)?;
    let mut embeddings = teacher.embeddings.clone();
    embeddings.zip_mut_with(&student.embeddings, |t, &s| *t = decay * *t + (1.0 - decay) * s);
    SoftPrompt::from_embeddings(teacher.role, embeddings)
}

/// Independent teacher copy of the student prompts.
pub fn sync_teacher(student: &SoftPrompt) -> SoftPrompt {
    student.with_role(PromptRole::Teacher)
}
