//! Per-task routing statistics.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Model, PassOptions};
use crate::moe::{entropy, jsd};
use crate::site::{Block, BlockKey, Side, Site, SiteKey};
use crate::tape::Tape;
use crate::taskgen::{Batch, TaskSuite};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskRouting {
    pub task: String,
    /// Non-padding tokens averaged over.
    pub tokens: usize,
    pub mean: Vec<f64>,
    /// Entropy of `mean`, in nats.
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingStats {
    pub router: String,
    pub tasks: Vec<TaskRouting>,
    /// Pairwise Jensen-Shannon divergence between task means, in nats.
    pub jsd: Vec<Vec<f64>>,
}

/// Router label of the last decoder feed-forward block.
pub fn default_probe<T: Scalar>(model: &Model<T>) -> Result<String> {
    let set = model
        .adapters
        .as_ref()
        .filter(|a| a.spec().routed())
        .ok_or_else(|| Error::Contract("model has no routers".into()))?;
    let layers = model.backbone.config().layers;
    let site = SiteKey {
        block: BlockKey {
            side: Side::Dec,
            layer: layers - 1,
            block: Block::Ffn,
        },
        site: Site::Ff,
    };
    Ok(set.spec().routing.router_for(site).to_string())
}

/// Sums of routing probabilities per task id over valid tokens at `probe`.
pub fn routing_sums<T: Scalar>(model: &Model<T>, batch: &Batch<T>, probe: &str) -> Result<BTreeMap<usize, (Vec<f64>, usize)>> {
    let mut tape = Tape::new();
    let opts = PassOptions {
        embeddings: batch.embeddings.as_ref(),
        ..PassOptions::default()
    };
    let pass = model.forward(&mut tape, &batch.seq, opts)?;
    let record = pass.routes.iter().find(|r| r.label() == probe).ok_or_else(|| {
        let known: Vec<String> = pass.routes.iter().map(|r| r.label()).collect();
        Error::Input(format!("no router `{probe}`; known: {}", known.join(", ")))
    })?;
    let p = tape.value(record.probs);
    let n = p.shape()[1];
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (t, (&row, &valid)) in record.rows.iter().zip(&record.valid).enumerate() {
        if !valid {
            continue;
        }
        let entry = sums.entry(batch.task_ids[row]).or_insert_with(|| (vec![0.0; n], 0));
        for (s, v) in entry.0.iter_mut().zip(p.row(t)) {
            *s += v.f64();
        }
        entry.1 += 1;
    }
    Ok(sums)
}

/// Mean routing distribution per task at `probe` (default: last decoder
/// feed-forward router), its entropy and the pairwise JSD matrix.
pub fn routing_stats<T: Scalar>(
    model: &Model<T>,
    suite: &TaskSuite,
    batches: &[Batch<T>],
    probe: Option<&str>,
) -> Result<RoutingStats> {
    if batches.iter().all(|b| b.seq.rows == 0) {
        return Err(Error::Input("routing statistics need at least one row".into()));
    }
    let router = match probe {
        Some(p) => p.to_string(),
        None => default_probe(model)?,
    };
    let mut total: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for b in batches {
        for (task, (s, c)) in routing_sums(model, b, &router)? {
            let e = total.entry(task).or_insert_with(|| (vec![0.0; s.len()], 0));
            e.0.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
            e.1 += c;
        }
    }
    let tasks: Vec<TaskRouting> = total
        .into_iter()
        .filter(|(_, (_, c))| *c > 0)
        .map(|(task, (s, c))| {
            let mean: Vec<f64> = s.iter().map(|v| v / c as f64).collect();
            TaskRouting {
                task: suite.tasks.get(task).map_or_else(|| task.to_string(), |t| t.name.clone()),
                tokens: c,
                entropy: entropy(mean.iter().copied()),
                mean,
            }
        })
        .collect();
    if tasks.is_empty() {
        return Err(Error::Input("no valid tokens reached the probed router".into()));
    }
    let jsd = tasks
        .iter()
        .map(|a| {
            tasks
                .iter()
                .map(|b| if a.task == b.task { 0.0 } else { jsd(&a.mean, &b.mean) })
                .collect()
        })
        .collect();
    Ok(RoutingStats { router, tasks, jsd })
}

impl RoutingStats {
    pub fn task(&self, name: &str) -> Option<&TaskRouting> {
        self.tasks.iter().find(|t| t.task == name)
    }
}
