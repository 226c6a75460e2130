//! Full-batch training of the joint objective.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, ParamStore};
use crate::decoder::{JointLossReport, LossTargets};
use crate::error::{Error, Result};
use crate::model::{ModelInput, SaAsrModel};
use crate::speaker::SpeakerProfileMatrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent with a fixed step.
    #[default]
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::invalid(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Rescales the gradient when its global norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Stop once the mean total loss falls below this.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Sgd,
            clip_norm: Some(5.0),
            target_loss: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, _, v)| Array2::zeros(v.dim())).collect();
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (zeros(), zeros()),
        };
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            step: 0,
            first,
            second,
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &Gradients, scale: f64) {
        self.step += 1;
        let lr = self.learning_rate;
        for (id, grad) in grads.iter() {
            let param = store.get_mut(id);
            match self.kind {
                OptimizerKind::Sgd => param.scaled_add(-lr * scale, grad),
                OptimizerKind::Adam => {
                    let (b1, b2) = (self.beta1, self.beta2);
                    let m = &mut self.first[id.0];
                    let v = &mut self.second[id.0];
                    m.zip_mut_with(grad, |m, &g| *m = b1 * *m + (1.0 - b1) * g * scale);
                    v.zip_mut_with(grad, |v, &g| *v = b2 * *v + (1.0 - b2) * (g * scale).powi(2));
                    let c1 = 1.0 - b1.powi(self.step as i32);
                    let c2 = 1.0 - b2.powi(self.step as i32);
                    let eps = self.eps;
                    ndarray::Zip::from(param)
                        .and(&*m)
                        .and(&*v)
                        .for_each(|p, &m, &v| *p -= lr * (m / c1) / ((v / c2).sqrt() + eps));
                }
            }
        }
    }
}

/// One training pair.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub input: ModelInput,
    pub targets: LossTargets,
}

/// Mean joint loss and its gradient over `examples`.
pub fn batch_gradients(
    model: &SaAsrModel,
    examples: &[TrainingExample],
    profiles: &SpeakerProfileMatrix,
) -> Result<(JointLossReport, Gradients)> {
    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let w = 1.0 / examples.len() as f64;
    let mut grads = Gradients::default();
    let (mut asr, mut spk) = (0.0, 0.0);
    for ex in examples {
        let mut g = Graph::new(&model.store);
        let nodes = model.loss_graph(&mut g, &ex.input, &ex.targets, profiles)?;
        asr += w * g.value(nodes.asr)[[0, 0]];
        spk += w * g.value(nodes.speaker)[[0, 0]];
        grads.accumulate(&g.backward(nodes.total), w);
    }
    Ok((JointLossReport::new(asr, spk, model.config.speaker_weight), grads))
}

/// Runs `config.steps` full-batch updates and returns the loss before each
/// update. `on_step` sees the step index and its loss.
pub fn train(
    model: &mut SaAsrModel,
    examples: &[TrainingExample],
    profiles: &SpeakerProfileMatrix,
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, &JointLossReport),
) -> Result<Vec<JointLossReport>> {
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &model.store);
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (report, grads) = batch_gradients(model, examples, profiles)?;
        on_step(step, &report);
        curve.push(report);
        if !report.total.is_finite() {
            return Err(Error::invalid(format!("loss diverged at step {step}")));
        }
        if config.target_loss.is_some_and(|t| report.total < t) {
            break;
        }
        let norm = grads.global_norm();
        let scale = match config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        opt.apply(&mut model.store, &grads, scale);
    }
    Ok(curve)
}
