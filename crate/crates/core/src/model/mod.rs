//! Span classifier: token encoder, span representation, feed-forward head,
//! softmax, and cross-entropy training with exact analytic gradients.
//!
//! A span `(i, j)` is represented as `h_i ⊕ h_j ⊕ D[j - i]` where `h` are the
//! encoder outputs and `D` is a learned width table. The head is
//! `num_layers` rectified layers of size `hidden_dim` followed by a linear
//! projection to `num_classes` logits.

mod checkpoint;
mod encoder;
mod head;
mod loss;
mod predict;
mod train;
mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use encoder::encode;
pub use head::{forward, softmax, span_repr, Mode};
pub use loss::{
    loss_and_grads, topneg_count, topneg_select, Batch, BatchItem, BatchSentence, LossAndGrads, NegativePolicy,
};
pub use predict::{decode_spans, predict_spans, score_spans};
pub use train::{train_epoch, Adam, AdamConfig, EpochStats, TrainingData, TrainingSentence};
pub use vocab::{Vocab, PAD, UNK};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    /// `h_i = E[t_i]`
    Lookup,
    /// `h_i = relu(W [E[t_i]; mean(E[t_{i-w..=i+w}])] + b)`
    Window,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub encoder: EncoderVariant,
    pub window_radius: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub width_embed_dim: usize,
    pub max_width: usize,
    pub num_classes: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2,
            embed_dim: 32,
            encoder: EncoderVariant::Window,
            window_radius: 1,
            hidden_dim: 150,
            num_layers: 2,
            width_embed_dim: 150,
            max_width: 8,
            num_classes: 2,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("width_embed_dim", self.width_embed_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Width of a token vector `h_i`.
    pub fn token_dim(&self) -> usize {
        self.embed_dim
    }

    /// Width of a span vector.
    pub fn span_dim(&self) -> usize {
        2 * self.token_dim() + self.width_embed_dim
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `out = self[:, cols] · x` for a contiguous column block.
    pub(crate) fn matvec_block(&self, col0: usize, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.row(r)[col0..col0 + x.len()];
            *o = dot(row, x);
        }
    }

    /// `out += self[:, cols]^T · g` for a contiguous column block.
    pub(crate) fn add_matvec_t_block(&self, col0: usize, g: &[f64], out: &mut [f64]) {
        debug_assert_eq!(g.len(), self.rows);
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            let row = &self.row(r)[col0..col0 + out.len()];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += gr * w;
            }
        }
    }

    /// `self[:, cols] += g ⊗ x` for a contiguous column block.
    pub(crate) fn add_outer_block(&mut self, col0: usize, g: &[f64], x: &[f64]) {
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            let row = &mut self.row_mut(r)[col0..col0 + x.len()];
            for (w, &xv) in row.iter_mut().zip(x) {
                *w += gr * xv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out x in`
    pub weight: Matrix,
    /// `1 x out`
    pub bias: Matrix,
}

impl Linear {
    fn zeros(out: usize, inp: usize) -> Self {
        Linear {
            weight: Matrix::zeros(out, inp),
            bias: Matrix::zeros(1, out),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }
}

/// Every trainable tensor of the span classifier.
///
/// Declared order (used by the optimizer, checkpoints, and gradient checks):
/// `embedding`, `mixer.weight`, `mixer.bias`, `width`, then
/// `hidden.{k}.weight` / `hidden.{k}.bias` for each layer, then
/// `output.weight`, `output.bias`. The mixer tensors are empty for the
/// lookup encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanClassifierParams {
    pub embedding: Matrix,
    pub mixer: Linear,
    pub width: Matrix,
    pub hidden: Vec<Linear>,
    pub output: Linear,
}

impl SpanClassifierParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.token_dim();
        let mixer = match cfg.encoder {
            EncoderVariant::Lookup => Linear::zeros(0, 0),
            EncoderVariant::Window => Linear::zeros(d, 2 * cfg.embed_dim),
        };
        let mut hidden = Vec::with_capacity(cfg.num_layers);
        let mut inp = cfg.span_dim();
        for _ in 0..cfg.num_layers {
            hidden.push(Linear::zeros(cfg.hidden_dim, inp));
            inp = cfg.hidden_dim;
        }
        SpanClassifierParams {
            embedding: Matrix::zeros(cfg.vocab_size, cfg.embed_dim),
            mixer,
            width: Matrix::zeros(cfg.max_width + 1, cfg.width_embed_dim),
            hidden,
            output: Linear::zeros(cfg.num_classes, inp),
        }
    }

    /// Standard-normal embedding tables; linear layers uniform in
    /// `±1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut p = Self::zeros(cfg);
        for v in p.embedding.data.iter_mut().chain(p.width.data.iter_mut()) {
            *v = rng.sample(StandardNormal);
        }
        let linears = std::iter::once(&mut p.mixer)
            .chain(p.hidden.iter_mut())
            .chain(std::iter::once(&mut p.output));
        for lin in linears {
            if lin.weight.is_empty() {
                continue;
            }
            let bound = 1.0 / (lin.weight.cols as f64).sqrt();
            for v in lin.weight.data.iter_mut().chain(lin.bias.data.iter_mut()) {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.data.fill(value);
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embedding, &self.mixer.weight, &self.mixer.bias, &self.width];
        for h in &self.hidden {
            out.push(&h.weight);
            out.push(&h.bias);
        }
        out.push(&self.output.weight);
        out.push(&self.output.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![
            &mut self.embedding,
            &mut self.mixer.weight,
            &mut self.mixer.bias,
            &mut self.width,
        ];
        for h in &mut self.hidden {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec![
            "embedding".to_string(),
            "mixer.weight".to_string(),
            "mixer.bias".to_string(),
            "width".to_string(),
        ];
        for k in 0..self.hidden.len() {
            names.push(format!("hidden.{k}.weight"));
            names.push(format!("hidden.{k}.bias"));
        }
        names.push("output.weight".to_string());
        names.push("output.bias".to_string());
        names
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .zip(self.tensor_names())
            .find(|(t, _)| t.data.iter().any(|v| !v.is_finite()))
            .map(|(_, n)| n)
    }

    /// Checks tensor shapes against a config.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(cfg);
        for ((a, b), name) in self.tensors().iter().zip(expected.tensors()).zip(self.tensor_names()) {
            if (a.rows, a.cols) != (b.rows, b.cols) {
                return Err(Error::contract(format!(
                    "{name}: shape {}x{} does not match config {}x{}",
                    a.rows, a.cols, b.rows, b.cols
                )));
            }
        }
        if self.hidden.len() != cfg.num_layers {
            return Err(Error::contract("layer count does not match config"));
        }
        Ok(())
    }
}
