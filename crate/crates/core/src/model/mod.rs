//! Shared feature extractor with a closed-set head and a one-vs-all head.
//!
//! The extractor is an MLP with a ReLU after every layer. Both heads are
//! linear maps on the extracted features. The one-vs-all head emits `2K`
//! logits; logits `2j` and `2j + 1` belong to the sub-classifier of class
//! `j` and score "inlier" and "outlier" respectively.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of the inlier column of a one-vs-all sub-classifier.
pub const INLIER: usize = 0;
/// Index of the outlier column of a one-vs-all sub-classifier.
pub const OUTLIER: usize = 1;

/// Weight `[in, out]` and bias `[out]` of an affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("weight shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub extractor: Vec<Linear>,
    pub closed_head: Linear,
    pub ova_head: Linear,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let mut extractor = Vec::with_capacity(hidden.len());
        let mut width = input_dim;
        for &h in hidden {
            extractor.push(Linear::glorot(width, h, rng));
            width = h;
        }
        let closed_head = Linear::glorot(width, num_classes, rng);
        let ova_head = Linear::glorot(width, 2 * num_classes, rng);
        ModelParams {
            extractor,
            closed_head,
            ova_head,
        }
    }

    /// All weights and biases zero: every head outputs a uniform distribution.
    pub fn zeros(input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        let mut extractor = Vec::with_capacity(hidden.len());
        let mut width = input_dim;
        for &h in hidden {
            extractor.push(Linear::zeros(width, h));
            width = h;
        }
        ModelParams {
            extractor,
            closed_head: Linear::zeros(width, num_classes),
            ova_head: Linear::zeros(width, 2 * num_classes),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.extractor
            .first()
            .map(Linear::fan_in)
            .unwrap_or_else(|| self.closed_head.fan_in())
    }

    pub fn feature_dim(&self) -> usize {
        self.closed_head.fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.closed_head.fan_out()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.extractor.iter().map(Linear::fan_out).collect()
    }

    /// Checks that layer shapes chain and that the heads agree on `K`.
    pub fn validate(&self) -> Result<()> {
        let mut width = self.input_dim();
        for layer in self.layers() {
            if layer.weight.ndim() != 2 || layer.bias.shape() != [layer.fan_out()] {
                return Err(Error::shape("layer", layer.weight.shape(), layer.bias.shape()));
            }
        }
        for layer in &self.extractor {
            if layer.fan_in() != width {
                return Err(Error::shape("extractor", &[width], layer.weight.shape()));
            }
            width = layer.fan_out();
        }
        for head in [&self.closed_head, &self.ova_head] {
            if head.fan_in() != width {
                return Err(Error::shape("head", &[width], head.weight.shape()));
            }
        }
        if self.ova_head.fan_out() != 2 * self.num_classes() {
            return Err(Error::shape(
                "ova_head",
                self.ova_head.weight.shape(),
                &[width, 2 * self.num_classes()],
            ));
        }
        Ok(())
    }

    fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.extractor
            .iter()
            .chain([&self.closed_head, &self.ova_head])
    }

    /// Every tensor in a fixed order: extractor layers (weight, bias), then
    /// the closed head, then the one-vs-all head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.extractor
            .iter_mut()
            .chain([&mut self.closed_head, &mut self.ova_head])
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Rebuilds parameters from the order produced by [`ModelParams::tensors`].
    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() < 4 || tensors.len() % 2 != 0 {
            return Err(Error::Checkpoint(format!(
                "expected an even number (>= 4) of tensors, got {}",
                tensors.len()
            )));
        }
        let mut layers: Vec<Linear> = tensors
            .chunks_exact(2)
            .map(|pair| Linear {
                weight: pair[0].clone(),
                bias: pair[1].clone(),
            })
            .collect();
        let ova_head = layers.pop().expect("len >= 2");
        let closed_head = layers.pop().expect("len >= 2");
        let params = ModelParams {
            extractor: layers,
            closed_head,
            ova_head,
        };
        params.validate()?;
        Ok(params)
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        self.register_with(tape, true)
    }

    /// Registers every tensor as a constant, for inference.
    pub fn register_frozen(&self, tape: &mut Tape) -> ModelVars {
        self.register_with(tape, false)
    }

    fn register_with(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let mut pair = |l: &Linear| (put(&l.weight), put(&l.bias));
        let extractor = self.extractor.iter().map(&mut pair).collect();
        let closed = pair(&self.closed_head);
        let ova = pair(&self.ova_head);
        ModelVars {
            extractor,
            closed,
            ova,
            num_classes: self.num_classes(),
        }
    }

    /// Closed-set probabilities `[B, K]` for a batch of clean inputs.
    pub fn closed_probs(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let input = tape.constant(x.clone());
        let feats = feature_extract(&mut tape, &vars, input)?;
        let probs = classify_closed(&mut tape, &vars, feats)?;
        Ok(tape.value(probs).clone())
    }

    /// One-vs-all probabilities for a batch of clean inputs.
    pub fn ova_probs(&self, x: &Tensor) -> Result<OvaProbs> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let input = tape.constant(x.clone());
        let feats = feature_extract(&mut tape, &vars, input)?;
        let probs = ova_probs(&mut tape, &vars, feats)?;
        OvaProbs::new(tape.value(probs).clone())
    }

    /// Open-set prediction for every row of `x`. Inputs are used as-is.
    pub fn predict_open(&self, x: &Tensor) -> Result<Vec<OpenSetPrediction>> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let input = tape.constant(x.clone());
        let feats = feature_extract(&mut tape, &vars, input)?;
        let closed = classify_closed(&mut tape, &vars, feats)?;
        let ova = ova_probs(&mut tape, &vars, feats)?;
        let ova = OvaProbs::new(tape.value(ova).clone())?;
        let closed = tape.value(closed);
        Ok((0..closed.rows())
            .map(|b| {
                let label = argmax(closed.row(b));
                OpenSetPrediction::new(label, ova.inlier(b, label))
            })
            .collect())
    }
}

/// Tape handles for every tensor of a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub extractor: Vec<(Var, Var)>,
    pub closed: (Var, Var),
    pub ova: (Var, Var),
    num_classes: usize,
}

impl ModelVars {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Inverse of [`ModelVars::all`].
    pub fn from_handles(handles: &[Var], num_classes: usize) -> Result<Self> {
        if handles.len() < 4 || handles.len() % 2 != 0 {
            return Err(Error::shape("model handles", &[handles.len()], &[]));
        }
        let mut pairs: Vec<(Var, Var)> = handles.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        let ova = pairs.pop().expect("len >= 2");
        let closed = pairs.pop().expect("len >= 2");
        Ok(ModelVars {
            extractor: pairs,
            closed,
            ova,
            num_classes,
        })
    }

    /// Handles in the order of [`ModelParams::tensors`].
    pub fn all(&self) -> Vec<Var> {
        self.extractor
            .iter()
            .chain([&self.closed, &self.ova])
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

fn affine(tape: &mut Tape, (w, b): (Var, Var), x: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

/// `[B, d_in] -> [B, d_feat]`.
pub fn feature_extract(tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<Var> {
    let mut h = x;
    for &layer in &vars.extractor {
        let z = affine(tape, layer, h)?;
        h = tape.relu(z);
    }
    Ok(h)
}

/// Closed-set softmax probabilities `[B, K]`.
pub fn classify_closed(tape: &mut Tape, vars: &ModelVars, features: Var) -> Result<Var> {
    let logits = affine(tape, vars.closed, features)?;
    tape.softmax(logits, 1)
}

/// One-vs-all probabilities `[B, K, 2]`, softmax over the last axis.
pub fn ova_probs(tape: &mut Tape, vars: &ModelVars, features: Var) -> Result<Var> {
    let logits = affine(tape, vars.ova, features)?;
    let rows = tape.shape(logits)[0];
    let logits = tape.reshape(logits, &[rows, vars.num_classes, 2])?;
    tape.softmax(logits, 2)
}

/// First index of the maximum; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-sample `K x 2` matrices of one-vs-all probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct OvaProbs {
    probs: Tensor,
}

impl OvaProbs {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.ndim() != 3 || probs.shape()[2] != 2 {
            return Err(Error::shape("ova_probs", probs.shape(), &[0, 0, 2]));
        }
        Ok(OvaProbs { probs })
    }

    pub fn batch_size(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape()[1]
    }

    /// `p^j(t | x_b)`.
    pub fn get(&self, b: usize, j: usize, t: usize) -> f64 {
        self.probs.data()[(b * self.num_classes() + j) * 2 + t]
    }

    pub fn inlier(&self, b: usize, j: usize) -> f64 {
        self.get(b, j, INLIER)
    }

    pub fn outlier(&self, b: usize, j: usize) -> f64 {
        self.get(b, j, OUTLIER)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Class(usize),
    Outlier,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpenSetPrediction {
    pub closed_label: usize,
    pub inlier_prob: f64,
    pub verdict: Verdict,
}

impl OpenSetPrediction {
    /// Rejects as an outlier exactly when `inlier_prob < 0.5`.
    pub fn new(closed_label: usize, inlier_prob: f64) -> Self {
        let verdict = if inlier_prob < 0.5 {
            Verdict::Outlier
        } else {
            Verdict::Class(closed_label)
        };
        OpenSetPrediction {
            closed_label,
            inlier_prob,
            verdict,
        }
    }

    pub fn is_outlier(&self) -> bool {
        self.verdict == Verdict::Outlier
    }
}
