//! Frozen-backbone training.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, SeqBatch};
use crate::error::{Error, Result};
use crate::model::{Model, PassOptions};
use crate::moe::InputMode;
use crate::optim::{Optimizer, OptimizerKind};
use crate::tape::Tape;
use crate::taskgen::{sample_batch, Batch, EmbeddingProvider, Split, TaskSuite};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Steps of backbone language-model warm-up before freezing; 0 skips it.
    pub warmup_steps: usize,
    pub warmup_lr: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 8,
            steps: 2000,
            optimizer: OptimizerKind::Adafactor,
            seed: 0,
            checkpoint_every: 0,
            warmup_steps: 0,
            warmup_lr: 1e-2,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("train.lr must be a finite value ≥ 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.warmup_lr > 0.0) {
            return Err(Error::Config("train.warmup_lr must be positive".into()));
        }
        Ok(())
    }
}

/// What one step logged.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    /// `task + α·aux`.
    pub loss: f64,
    pub task_loss: f64,
    pub aux: f64,
    pub grad_norm: f64,
    /// Mean routing entropy per router, in nats.
    pub entropies: Vec<(String, f64)>,
}

impl StepReport {
    /// One metrics line: `step`, `loss`, `aux`, `grad_norm` and an
    /// `entropy_site_<router>` key per router.
    pub fn to_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        m.insert("step".into(), self.step.into());
        m.insert("loss".into(), self.loss.into());
        m.insert("aux".into(), self.aux.into());
        m.insert("grad_norm".into(), self.grad_norm.into());
        for (k, v) in &self.entropies {
            m.insert(format!("entropy_site_{k}"), (*v).into());
        }
        serde_json::Value::Object(m)
    }

    pub fn mean_entropy(&self) -> Option<f64> {
        if self.entropies.is_empty() {
            return None;
        }
        Some(self.entropies.iter().map(|(_, v)| v).sum::<f64>() / self.entropies.len() as f64)
    }
}

/// Loss, gradients and routing entropies of the adapters on one batch.
pub struct Gradients {
    pub loss: f64,
    pub task_loss: f64,
    pub aux: f64,
    pub grads: BTreeMap<String, Tensor>,
    pub entropies: Vec<(String, f64)>,
}

pub fn adapter_gradients(model: &Model, batch: &SeqBatch, embeddings: Option<&Tensor>) -> Result<Gradients> {
    if model.adapters.as_ref().is_none_or(|a| a.params().is_empty()) {
        return Err(Error::Contract("model has no trainable adapters".into()));
    }
    let mut tape = Tape::new();
    let opts = PassOptions {
        train_adapters: true,
        embeddings,
        ..PassOptions::default()
    };
    let loss = model.loss(&mut tape, batch, opts)?;
    let total = tape.value(loss.total).item() as f64;
    let task_loss = tape.value(loss.task).item() as f64;
    let aux = loss.pass.aux.map_or(0.0, |a| tape.value(a).item() as f64);
    tape.backward(loss.total)?;
    let mut grads = BTreeMap::new();
    for (name, &v) in &loss.pass.adapter_vars {
        let g = tape
            .grad(v)
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
        grads.insert(name.clone(), g);
    }
    Ok(Gradients {
        loss: total,
        task_loss,
        aux,
        grads,
        entropies: loss.pass.entropies,
    })
}

/// One optimizer step on the adapters; the backbone is never touched.
pub fn train_step(
    model: &mut Model,
    batch: &Batch,
    opt: &mut Optimizer,
    lr: f64,
    step: usize,
) -> Result<StepReport> {
    let g = match adapter_gradients(model, &batch.seq, batch.embeddings.as_ref()) {
        Err(Error::Numeric(_)) => return Err(Error::Divergence { step, loss: f64::NAN }),
        other => other?,
    };
    let grad_norm = g
        .grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if !g.loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::Divergence { step, loss: g.loss });
    }
    let adapters = model.adapters.as_mut().expect("checked by adapter_gradients");
    opt.step(adapters.params_mut(), &g.grads, lr)?;
    Ok(StepReport {
        step,
        loss: g.loss,
        task_loss: g.task_loss,
        aux: g.aux,
        grad_norm,
        entropies: g.entropies,
    })
}

/// Embedding provider implied by a model's routing input.
pub fn embedding_provider(model: &Model) -> Option<EmbeddingProvider> {
    let spec = model.adapters.as_ref()?.spec();
    (spec.routed() && spec.routing.input_mode == InputMode::Sentence).then_some(EmbeddingProvider {
        width: spec.routing.embed_width,
    })
}

/// Per-step batch seeds derived from the run seed.
pub fn batch_seeds(seed: u64, steps: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..steps).map(|_| rng.next_u64()).collect()
}

/// Trains the adapters for `hyper.steps` steps on the training split,
/// calling `on_step` after each step.
pub fn train_run(
    model: &mut Model,
    suite: &TaskSuite,
    hyper: &TrainHyper,
    mut on_step: impl FnMut(&StepReport, &Model) -> Result<()>,
) -> Result<Vec<StepReport>> {
    hyper.validate()?;
    let provider = embedding_provider(model);
    let mut opt = Optimizer::new(hyper.optimizer);
    let mut reports = Vec::with_capacity(hyper.steps);
    for (i, seed) in batch_seeds(hyper.seed, hyper.steps).into_iter().enumerate() {
        let batch = sample_batch(suite, Split::Train, hyper.batch_size, seed, provider.as_ref())?;
        let report = train_step(model, &batch, &mut opt, hyper.lr, i + 1)?;
        on_step(&report, model)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Short denoising warm-up of the backbone itself: each training input is
/// reconstructed from its own tokens. Run before adapters are attached.
pub fn warm_up(backbone: &Backbone, suite: &TaskSuite, steps: usize, lr: f64, seed: u64, batch_size: usize) -> Result<Backbone> {
    let mut bb = backbone.clone();
    let mut opt = Optimizer::new(OptimizerKind::Adafactor);
    let max_out = bb.config().max_out;
    for (i, s) in batch_seeds(seed ^ 0x5eed, steps).into_iter().enumerate() {
        let batch = sample_batch(suite, Split::Train, batch_size, s, None)?;
        let inputs: Vec<Vec<usize>> = (0..batch.seq.rows)
            .map(|r| {
                let len = batch.seq.input.row_len(r);
                batch.seq.input.ids[r * batch.seq.input.len..r * batch.seq.input.len + len].to_vec()
            })
            .collect();
        let targets: Vec<Vec<usize>> = inputs.iter().map(|r| r.iter().copied().take(max_out).collect()).collect();
        let seq = SeqBatch::new(&inputs, &targets)?;
        let model = Model::new(bb.clone(), None);
        let mut tape = Tape::new();
        let opts = PassOptions {
            train_backbone: true,
            ..PassOptions::default()
        };
        let loss = model.loss(&mut tape, &seq, opts)?;
        let value = tape.value(loss.task).item() as f64;
        if !value.is_finite() {
            return Err(Error::Divergence { step: i + 1, loss: value });
        }
        tape.backward(loss.total)?;
        let mut grads = BTreeMap::new();
        for (name, &v) in loss.pass.weights.iter() {
            if let Some(g) = tape.grad(v) {
                grads.insert(name.clone(), g);
            }
        }
        let mut weights: BTreeMap<String, Tensor> = bb.weights().clone();
        opt.step(&mut weights, &grads, lr)?;
        bb = Backbone::from_weights(bb.config().clone(), weights)?;
    }
    Ok(bb)
}
