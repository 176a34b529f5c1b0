//! Optimizers over named tensors.
//!
//! Adafactor keeps no first moment. Matrices store row and column sums of
//! the squared-gradient moving average and reconstruct the second moment as
//! their normalized outer product; vectors keep a full moving average. The
//! decay at step `t` is `1 - t^-0.8`, updates are clipped to RMS 1 and the
//! step size is the absolute learning rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adafactor,
    Adam,
    Sgd,
}

/// Added to squared gradients.
pub const ADAFACTOR_EPS: f64 = 1e-30;
pub const ADAFACTOR_DECAY: f64 = 0.8;
pub const ADAFACTOR_CLIP: f64 = 1.0;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
enum Slot {
    Factored { row: Vec<f64>, col: Vec<f64> },
    Full { v: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64> },
    Stateless,
}

impl Slot {
    fn floats(&self) -> usize {
        match self {
            Slot::Factored { row, col } => row.len() + col.len(),
            Slot::Full { v } => v.len(),
            Slot::Adam { m, v } => m.len() + v.len(),
            Slot::Stateless => 0,
        }
    }
}

/// Whether Adafactor factors a tensor of this shape.
pub fn is_factored(shape: &[usize]) -> bool {
    shape.len() == 2 && shape[0] > 1 && shape[1] > 1
}

/// State floats an optimizer keeps for one tensor.
pub fn state_floats(kind: OptimizerKind, shape: &[usize]) -> usize {
    let numel: usize = shape.iter().product();
    match kind {
        OptimizerKind::Adafactor if is_factored(shape) => shape[0] + shape[1],
        OptimizerKind::Adafactor => numel,
        OptimizerKind::Adam => 2 * numel,
        OptimizerKind::Sgd => 0,
    }
}

/// Second-moment estimate `R·Cᵀ / ΣR` from factored accumulators.
pub fn factored_second_moment(row: &[f64], col: &[f64]) -> Vec<f64> {
    let total: f64 = row.iter().sum();
    row.iter()
        .flat_map(|&r| col.iter().map(move |&c| r * c / total))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: usize,
    slots: BTreeMap<String, Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Floats currently held as state.
    pub fn state_floats(&self) -> usize {
        self.slots.values().map(Slot::floats).sum()
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    /// Adafactor row and column accumulators of a factored tensor.
    pub fn factored_state(&self, name: &str) -> Option<(&[f64], &[f64])> {
        match self.slots.get(name) {
            Some(Slot::Factored { row, col }) => Some((row, col)),
            _ => None,
        }
    }

    /// Unfactored second moment of a tensor.
    pub fn full_state(&self, name: &str) -> Option<&[f64]> {
        match self.slots.get(name) {
            Some(Slot::Full { v }) | Some(Slot::Adam { v, .. }) => Some(v),
            _ => None,
        }
    }

    /// Applies one update to every tensor that has a gradient.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut BTreeMap<String, Tensor<T>>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| dim_err!("gradient for unknown tensor `{name}`"))?;
            if p.shape() != g.shape() {
                return Err(dim_err!(
                    "gradient {:?} for `{name}` of shape {:?}",
                    g.shape(),
                    p.shape()
                ));
            }
            let g: Vec<f64> = g.data().iter().map(|v| v.f64()).collect();
            let slot = self
                .slots
                .entry(name.clone())
                .or_insert_with(|| new_slot(self.kind, p.shape()));
            let update = match slot {
                Slot::Stateless => g,
                Slot::Adam { m, v } => {
                    let (c1, c2) = (1.0 - ADAM_BETA1.powf(t), 1.0 - ADAM_BETA2.powf(t));
                    m.iter_mut()
                        .zip(v.iter_mut())
                        .zip(&g)
                        .map(|((m, v), &gi)| {
                            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gi;
                            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gi * gi;
                            (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS)
                        })
                        .collect()
                }
                Slot::Full { v } => {
                    let beta = 1.0 - t.powf(-ADAFACTOR_DECAY);
                    let u: Vec<f64> = v
                        .iter_mut()
                        .zip(&g)
                        .map(|(v, &gi)| {
                            *v = beta * *v + (1.0 - beta) * (gi * gi + ADAFACTOR_EPS);
                            gi / v.sqrt()
                        })
                        .collect();
                    clip_rms(u)
                }
                Slot::Factored { row, col } => {
                    let beta = 1.0 - t.powf(-ADAFACTOR_DECAY);
                    let (rows, cols) = (row.len(), col.len());
                    let mut rsum = vec![0.0; rows];
                    let mut csum = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            let sq = g[i * cols + j].powi(2) + ADAFACTOR_EPS;
                            rsum[i] += sq;
                            csum[j] += sq;
                        }
                    }
                    row.iter_mut()
                        .zip(&rsum)
                        .for_each(|(r, s)| *r = beta * *r + (1.0 - beta) * s);
                    col.iter_mut()
                        .zip(&csum)
                        .for_each(|(c, s)| *c = beta * *c + (1.0 - beta) * s);
                    let v = factored_second_moment(row, col);
                    clip_rms(g.iter().zip(&v).map(|(gi, vi)| gi / vi.sqrt()).collect())
                }
            };
            for (x, u) in p.data_mut().iter_mut().zip(&update) {
                *x = T::lit(x.f64() - lr * u);
            }
        }
        Ok(())
    }
}

fn new_slot(kind: OptimizerKind, shape: &[usize]) -> Slot {
    let numel = shape.iter().product();
    match kind {
        OptimizerKind::Sgd => Slot::Stateless,
        OptimizerKind::Adam => Slot::Adam {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
        },
        OptimizerKind::Adafactor if is_factored(shape) => Slot::Factored {
            row: vec![0.0; shape[0]],
            col: vec![0.0; shape[1]],
        },
        OptimizerKind::Adafactor => Slot::Full { v: vec![0.0; numel] },
    }
}

fn clip_rms(mut u: Vec<f64>) -> Vec<f64> {
    let rms = (u.iter().map(|x| x * x).sum::<f64>() / u.len() as f64).sqrt();
    let d = (rms / ADAFACTOR_CLIP).max(1.0);
    if d > 1.0 {
        u.iter_mut().for_each(|x| *x /= d);
    }
    u
}

/// Parameter and optimizer-state sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    pub trainable_params: usize,
    pub frozen_params: usize,
    pub optimizer_state_floats: usize,
}

/// Sizes for a trainable set under an optimizer; frozen tensors carry no state.
pub fn memory_report<'a>(
    trainable: impl IntoIterator<Item = &'a [usize]>,
    frozen_params: usize,
    kind: OptimizerKind,
) -> MemoryReport {
    let (mut params, mut state) = (0, 0);
    for shape in trainable {
        params += shape.iter().product::<usize>();
        state += state_floats(kind, shape);
    }
    MemoryReport {
        trainable_params: params,
        frozen_params,
        optimizer_state_floats: state,
    }
}
