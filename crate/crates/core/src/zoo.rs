//! Canonical desk-scale architectures and supervised training.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{one_hot, ForwardTape, ModelGraph, ParamGrads};
use crate::layers::{log_softmax, softmax, Layer};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 3;
pub const IMAGE_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Four conv blocks and a dense head.
    Teacher,
    /// Two conv blocks and a dense head.
    Student,
    /// Conv blocks, global average pooling, one dense layer.
    GapCam,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Teacher => "teacher",
            Architecture::Student => "student",
            Architecture::GapCam => "gap_cam",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Architecture::Teacher),
            "student" => Ok(Architecture::Student),
            "gap_cam" | "gap-cam" => Ok(Architecture::GapCam),
            other => Err(Error::UnknownModel(other.to_string())),
        }
    }
}

/// Glorot-uniform initialisation, `U[-s, s]` with `s = sqrt(6 / (fan_in + fan_out))`.
fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-s..=s))
}

fn conv(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize, k: usize, padding: usize) -> Layer {
    let w = glorot(rng, &[out_ch, in_ch, k, k], in_ch * k * k, out_ch * k * k);
    Layer::conv2d(w, Tensor::zeros(&[out_ch]), 1, padding).expect("conv shapes")
}

fn dense(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Layer {
    let w = glorot(rng, &[outputs, inputs], inputs, outputs);
    Layer::dense(w, Tensor::zeros(&[outputs])).expect("dense shapes")
}

fn pool() -> Layer {
    Layer::MaxPool2d { size: 2, stride: 2 }
}

/// Builds one of the canonical architectures for `3 x 32 x 32` inputs and
/// three classes, with seeded Glorot-uniform weights and zero biases.
pub fn build_model(arch: Architecture, seed: u64) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = vec![3, IMAGE_SIZE, IMAGE_SIZE];
    let (layers, designated) = match arch {
        Architecture::Teacher => (
            vec![
                conv(&mut rng, 3, 8, 3, 1),
                Layer::Relu,
                pool(),
                conv(&mut rng, 8, 16, 3, 1),
                Layer::Relu,
                pool(),
                conv(&mut rng, 16, 16, 3, 1),
                Layer::Relu,
                conv(&mut rng, 16, 16, 3, 1),
                Layer::Relu,
                Layer::Flatten,
                dense(&mut rng, 16 * 8 * 8, NUM_CLASSES),
            ],
            9,
        ),
        Architecture::Student => (
            vec![
                conv(&mut rng, 3, 4, 3, 1),
                Layer::Relu,
                pool(),
                conv(&mut rng, 4, 8, 3, 1),
                Layer::Relu,
                pool(),
                Layer::Flatten,
                dense(&mut rng, 8 * 8 * 8, NUM_CLASSES),
            ],
            4,
        ),
        Architecture::GapCam => (
            vec![
                conv(&mut rng, 3, 8, 3, 1),
                Layer::Relu,
                pool(),
                conv(&mut rng, 8, 16, 3, 1),
                Layer::Relu,
                pool(),
                conv(&mut rng, 16, 16, 3, 1),
                Layer::Relu,
                Layer::GlobalAvgPool,
                dense(&mut rng, 16, NUM_CLASSES),
            ],
            7,
        ),
    };
    ModelGraph::new(arch.as_str(), input, NUM_CLASSES, layers, designated)
        .expect("canonical architectures are well formed")
}

/// Builds a model by name: `teacher`, `student`, or `gap_cam`.
pub fn build_model_named(name: &str, seed: u64) -> Result<ModelGraph> {
    Ok(build_model(name.parse()?, seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 12,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(
                "learning_rate must be a finite non-negative number",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Anything usable as a supervised example.
pub trait LabeledImage {
    fn image(&self) -> &Tensor;
    fn label(&self) -> usize;
}

impl LabeledImage for (Tensor, usize) {
    fn image(&self) -> &Tensor {
        &self.0
    }

    fn label(&self) -> usize {
        self.1
    }
}

/// Mean per-sample losses for one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub total: f64,
    pub cross_entropy: f64,
    pub interpret: f64,
    pub kd: f64,
}

impl EpochLoss {
    fn add(&mut self, other: &EpochLoss) {
        self.total += other.total;
        self.cross_entropy += other.cross_entropy;
        self.interpret += other.interpret;
        self.kd += other.kd;
    }

    fn scale(&mut self, factor: f64) {
        self.total *= factor;
        self.cross_entropy *= factor;
        self.interpret *= factor;
        self.kd *= factor;
    }

    fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.cross_entropy.is_finite()
            && self.interpret.is_finite()
            && self.kd.is_finite()
    }
}

/// Softmax cross-entropy of `logits` against `label`, with its gradient
/// w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let lsm = log_softmax(logits);
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    (-lsm[label], grad)
}

/// Forward pass plus cross-entropy backprop for one example. Parameter
/// gradients are accumulated into `grads`.
pub(crate) fn cross_entropy_step(
    graph: &ModelGraph,
    image: &Tensor,
    label: usize,
    grads: &mut ParamGrads,
) -> Result<(f64, ForwardTape)> {
    graph.check_class(label)?;
    let tape = graph.forward(image)?;
    let (loss, dlogits) = cross_entropy(tape.scores().data(), label);
    let seed = Tensor::from_raw(vec![dlogits.len()], dlogits);
    graph.backprop(&tape, graph.layers().len(), seed, Some(grads), false)?;
    Ok((loss, tape))
}

/// Minibatch SGD with momentum. `step` computes one example's loss and adds
/// its (unaveraged) parameter gradient to the accumulator.
pub(crate) fn fit<S, F>(
    graph: &ModelGraph,
    data: &[S],
    config: &TrainConfig,
    mut step: F,
) -> Result<(ModelGraph, Vec<EpochLoss>)>
where
    S: LabeledImage,
    F: FnMut(&ModelGraph, &S, &mut ParamGrads) -> Result<EpochLoss>,
{
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(bad) = data.iter().find(|s| s.label() >= graph.num_classes()) {
        return Err(Error::ClassOutOfRange {
            class: bad.label(),
            num_classes: graph.num_classes(),
        });
    }
    let mut model = graph.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity = vec![0.0; model.param_count()];
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = EpochLoss::default();
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads = ParamGrads::zeros(&model);
            for &i in batch {
                let loss = step(&model, &data[i], &mut grads)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss at epoch {epoch}, batch {b}, sample {i}"
                    )));
                }
                epoch_loss.add(&loss);
            }
            if !grads.is_finite() {
                return Err(Error::NonFinite(format!(
                    "parameter gradient at epoch {epoch}, batch {b}"
                )));
            }
            let inv = 1.0 / batch.len() as f64;
            let mut params = model.flat_params();
            for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(grads.flatten()) {
                *v = config.momentum * *v + g * inv;
                *p -= config.learning_rate * *v;
            }
            model.set_flat_params(&params)?;
        }
        epoch_loss.scale(1.0 / data.len() as f64);
        log::debug!("epoch {epoch}: loss {:.6}", epoch_loss.total);
        trace.push(epoch_loss);
    }
    Ok((model, trace))
}

/// Trains with softmax cross-entropy. Returns the trained graph and the
/// per-epoch mean loss.
pub fn train<S: LabeledImage>(
    graph: &ModelGraph,
    data: &[S],
    config: &TrainConfig,
) -> Result<(ModelGraph, Vec<EpochLoss>)> {
    fit(graph, data, config, |model, sample, grads| {
        let (ce, _) = cross_entropy_step(model, sample.image(), sample.label(), grads)?;
        Ok(EpochLoss {
            total: ce,
            cross_entropy: ce,
            ..EpochLoss::default()
        })
    })
}

/// Arg-max class and softmax probabilities.
pub fn predict(graph: &ModelGraph, image: &Tensor) -> Result<(usize, Vec<f64>)> {
    let scores = graph.scores(image)?;
    Ok((scores.argmax(), softmax(scores.data())))
}

/// Fraction of misclassified examples.
pub fn error_rate<S: LabeledImage>(graph: &ModelGraph, data: &[S]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut wrong = 0usize;
    for s in data {
        if predict(graph, s.image())?.0 != s.label() {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / data.len() as f64)
}

/// Seed vector with a one at `class`, for external callers building their
/// own backward passes.
pub fn class_seed(num_classes: usize, class: usize) -> Tensor {
    one_hot(num_classes, class)
}
