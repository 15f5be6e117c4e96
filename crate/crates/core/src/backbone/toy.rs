//! A small frozen language model with analytic prompt gradients.
//!
//! Conditioning sequence: the prompt rows followed by an image feature row
//! (patch-averaged RGB through a fixed projection) and a question row (signed
//! feature hashing). A query built from the image and question rows attends
//! over the whole sequence; the attended context drives a tanh recurrence over
//! decoded tokens, and a linear head produces next-token logits.
//!
//! ```text
//! X    = [P; v_img; v_q]
//! u    = W_q (v_img + v_q)
//! a    = softmax(X u / sqrt(D))
//! c    = W_c (X^T a)
//! h_t  = tanh(W_h h_{t-1} + E[y_{t-1}] + c),   h_0 = 0, E[y_0] = bos
//! z_t  = W_o h_t + b_o
//! ```
//!
//! Everything runs in `f64`.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{check_prompt, check_targets, Backbone, BackboneDescriptor, BackboneKind, DecodeState};
use crate::error::{Error, Result};
use crate::geometry::Image;
use crate::prompt::SoftPrompt;

const GRID: u32 = 2;
const IMAGE_FEATURES: usize = (GRID * GRID * 3) as usize;

#[derive(Clone, Debug)]
pub struct ToyBackbone {
    descriptor: BackboneDescriptor,
    seed: u64,
    w_img: Array2<f64>,
    w_query: Array2<f64>,
    w_ctx: Array2<f64>,
    w_rec: Array2<f64>,
    token_emb: Array2<f64>,
    bos: Array1<f64>,
    w_out: Array2<f64>,
    b_out: Array1<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn log_softmax(z: &Array1<f64>) -> Vec<f64> {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Cached forward quantities of the conditioning block.
struct Conditioning {
    rows: Array2<f64>,
    query: Array1<f64>,
    attn: Array1<f64>,
    /// `W_c * context`, the per-step recurrent input.
    drive: Array1<f64>,
}

impl ToyBackbone {
    pub fn new(seed: u64, vocab: usize, embed_dim: usize, kind: BackboneKind) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::InvalidDimensions(format!("vocabulary of {vocab} < 2")));
        }
        if embed_dim == 0 {
            return Err(Error::InvalidDimensions("embed_dim must be >= 1".into()));
        }
        let salt = match kind {
            BackboneKind::Grounding => 0x67,
            BackboneKind::Answer => 0x61,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt);
        let d = embed_dim;
        let inv = 1.0 / (d as f64).sqrt();
        let w_img = gaussian(&mut rng, (d, IMAGE_FEATURES), 2.0 / (IMAGE_FEATURES as f64).sqrt());
        let w_query = gaussian(&mut rng, (d, d), 2.0 * inv);
        let w_ctx = gaussian(&mut rng, (d, d), 1.5 * inv);
        let w_rec = gaussian(&mut rng, (d, d), inv);
        let token_emb = gaussian(&mut rng, (vocab, d), 1.0);
        let bos = gaussian(&mut rng, (1, d), 1.0).remove_axis(Axis(0));
        let w_out = gaussian(&mut rng, (vocab, d), 2.0 * inv);
        let b_out = gaussian(&mut rng, (1, vocab), 0.5).remove_axis(Axis(0));
        let mut model = Self {
            descriptor: BackboneDescriptor {
                name: "toy".into(),
                kind,
                vocab_size: vocab,
                embed_dim,
                fingerprint: String::new(),
                input_resolution: None,
            },
            seed,
            w_img,
            w_query,
            w_ctx,
            w_rec,
            token_emb,
            bos,
            w_out,
            b_out,
        };
        model.descriptor.fingerprint = model.parameter_fingerprint();
        Ok(model)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn image_row(&self, view: &Image) -> Array1<f64> {
        let (w, h) = view.size();
        let mut feats = Array1::zeros(IMAGE_FEATURES);
        for gy in 0..GRID {
            let y0 = gy * h / GRID;
            let y1 = ((gy + 1) * h / GRID).max(y0 + 1);
            for gx in 0..GRID {
                let x0 = gx * w / GRID;
                let x1 = ((gx + 1) * w / GRID).max(x0 + 1);
                let mut sum = [0u64; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = view.pixel(x, y);
                        for c in 0..3 {
                            sum[c] += u64::from(p[c]);
                        }
                    }
                }
                let n = f64::from((y1 - y0) * (x1 - x0));
                let base = ((gy * GRID + gx) * 3) as usize;
                for c in 0..3 {
                    feats[base + c] = sum[c] as f64 / (255.0 * n) - 0.5;
                }
            }
        }
        self.w_img.dot(&feats).mapv(f64::tanh)
    }

    fn question_row(&self, question: &str) -> Array1<f64> {
        let d = self.descriptor.embed_dim;
        let mut v = Array1::zeros(d);
        let lower = question.to_lowercase();
        let words: Vec<&str> =
            lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
        for w in &words {
            let h = fnv1a(self.seed, w.as_bytes());
            let sign = if (h >> 32) & 1 == 1 { 1.0 } else { -1.0 };
            v[(h % d as u64) as usize] += sign;
        }
        if !words.is_empty() {
            v /= (words.len() as f64).sqrt();
        }
        v
    }

    fn condition(&self, view: &Image, question: &str, prompt: &SoftPrompt) -> Conditioning {
        let d = self.descriptor.embed_dim;
        let n = prompt.num_tokens();
        let img = self.image_row(view);
        let q = self.question_row(question);
        let mut rows = Array2::zeros((n + 2, d));
        rows.slice_mut(s![..n, ..]).assign(prompt.embeddings());
        rows.row_mut(n).assign(&img);
        rows.row_mut(n + 1).assign(&q);
        let query = self.w_query.dot(&(&img + &q));
        let scores = rows.dot(&query) / (d as f64).sqrt();
        let m = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let e = scores.mapv(|v| (v - m).exp());
        let attn = &e / e.sum();
        let context = rows.t().dot(&attn);
        let drive = self.w_ctx.dot(&context);
        Conditioning { rows, query, attn, drive }
    }

    fn embed(&self, prev: Option<u32>) -> ArrayView1<'_, f64> {
        match prev {
            None => self.bos.view(),
            Some(t) => self.token_emb.row(t as usize),
        }
    }

    fn step(&self, h: &Array1<f64>, prev: Option<u32>, drive: &Array1<f64>) -> Array1<f64> {
        (self.w_rec.dot(h) + self.embed(prev) + drive).mapv(f64::tanh)
    }

    fn check_token(&self, t: u32) -> Result<()> {
        if (t as usize) < self.descriptor.vocab_size {
            Ok(())
        } else {
            Err(Error::VocabRange { token: t, vocab: self.descriptor.vocab_size })
        }
    }

    /// Raw next-token logits at every teacher-forced position.
    pub fn logits(
        &self,
        view: &Image,
        question: &str,
        prompt: &SoftPrompt,
        targets: &[u32],
    ) -> Result<Vec<Array1<f64>>> {
        check_prompt(self, prompt)?;
        check_targets(self, targets)?;
        let cond = self.condition(view, question, prompt);
        let mut h = Array1::zeros(self.descriptor.embed_dim);
        let mut prev = None;
        let mut out = Vec::with_capacity(targets.len());
        for &t in targets {
            h = self.step(&h, prev, &cond.drive);
            out.push(self.w_out.dot(&h) + &self.b_out);
            prev = Some(t);
        }
        Ok(out)
    }
}

struct ToyState<'a> {
    model: &'a ToyBackbone,
    drive: Array1<f64>,
    /// Hidden state for the position about to be predicted.
    h: Array1<f64>,
}

impl DecodeState for ToyState<'_> {
    fn next_log_probs(&mut self) -> Result<Vec<f64>> {
        Ok(log_softmax(&(self.model.w_out.dot(&self.h) + &self.model.b_out)))
    }

    fn push(&mut self, token: u32) -> Result<()> {
        self.model.check_token(token)?;
        self.h = self.model.step(&self.h, Some(token), &self.drive);
        Ok(())
    }
}

impl Backbone for ToyBackbone {
    fn descriptor(&self) -> &BackboneDescriptor {
        &self.descriptor
    }

    fn parameter_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.descriptor.vocab_size as u64).to_le_bytes());
        h.update((self.descriptor.embed_dim as u64).to_le_bytes());
        for v in [&self.w_img, &self.w_query, &self.w_ctx, &self.w_rec, &self.token_emb, &self.w_out]
            .into_iter()
            .flat_map(|m| m.iter())
            .chain(self.bos.iter())
            .chain(self.b_out.iter())
        {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn start<'a>(
        &'a self,
        view: &Image,
        question: &str,
        prompt: &SoftPrompt,
    ) -> Result<Box<dyn DecodeState + 'a>> {
        check_prompt(self, prompt)?;
        let cond = self.condition(view, question, prompt);
        let h = self.step(&Array1::zeros(self.descriptor.embed_dim), None, &cond.drive);
        Ok(Box::new(ToyState { model: self, drive: cond.drive, h }))
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
        let d = self.descriptor.embed_dim;
        let n = prompt.num_tokens();
        let cond = self.condition(view, question, prompt);

        // Forward, keeping hidden states.
        let mut hs: Vec<Array1<f64>> = Vec::with_capacity(targets.len());
        let mut h = Array1::zeros(d);
        let mut prev = None;
        for &t in targets {
            h = self.step(&h, prev, &cond.drive);
            hs.push(h.clone());
            prev = Some(t);
        }

        // Backward through the recurrence.
        let mut d_drive = Array1::<f64>::zeros(d);
        let mut d_h_next = Array1::<f64>::zeros(d);
        for t in (0..targets.len()).rev() {
            let h = &hs[t];
            let logp = log_softmax(&(self.w_out.dot(h) + &self.b_out));
            let mut dz = Array1::from_iter(logp.iter().map(|lp| -weights[t] * lp.exp()));
            dz[targets[t] as usize] += weights[t];
            let dh = self.w_out.t().dot(&dz) + &d_h_next;
            let da = &dh * &h.mapv(|v| 1.0 - v * v);
            d_drive += &da;
            d_h_next = self.w_rec.t().dot(&da);
        }

        // Back through the attention pooling into the prompt rows.
        let d_context = self.w_ctx.t().dot(&d_drive);
        let d_attn = cond.rows.dot(&d_context);
        let mean = cond.attn.dot(&d_attn);
        let d_scores = &cond.attn * &(d_attn - mean);
        let scale = 1.0 / (d as f64).sqrt();
        let mut grad = Array2::zeros((n, d));
        for i in 0..n {
            let row = &d_context * cond.attn[i] + &cond.query * (d_scores[i] * scale);
            grad.row_mut(i).assign(&row);
        }
        Ok(grad)
    }
}
