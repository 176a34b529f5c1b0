//! Rank-classification evaluation.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::taskgen::{EmbeddingProvider, Split, TaskSuite, Vocab};
use crate::tensor::Tensor;
use crate::train::embedding_provider;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskEval {
    pub task: String,
    pub split: Split,
    /// Accuracy under each template, in template order.
    pub per_template: Vec<f64>,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskEval>,
    /// Mean of the per-task medians.
    pub average: f64,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 0 {
        0.5 * (s[m - 1] + s[m])
    } else {
        s[m]
    }
}

/// Scores `samples` instances of every task in `split` under every template.
/// Instances depend only on `seed` and the task, so templates see the same
/// instances.
pub fn evaluate(model: &Model, suite: &TaskSuite, split: Split, samples: usize, seed: u64) -> Result<EvalReport> {
    if samples == 0 {
        return Err(Error::Config("eval needs at least one sample per task".into()));
    }
    let ids = suite.task_ids(split);
    if ids.is_empty() {
        return Err(Error::Config(format!("suite `{}` has no {split:?} tasks", suite.name)));
    }
    let provider = embedding_provider(model);
    let mut tasks = Vec::with_capacity(ids.len());
    for id in ids {
        let spec = &suite.tasks[id];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let instances: Vec<_> = (0..samples).map(|_| spec.instance(rng.next_u64())).collect();
        let mut per_template = Vec::with_capacity(spec.templates.len());
        for t in 0..spec.templates.len() {
            let mut right = 0usize;
            for inst in &instances {
                let input = Vocab::encode(&spec.render(t, inst))?;
                let options = inst
                    .options
                    .iter()
                    .map(|o| Vocab::encode(o))
                    .collect::<Result<Vec<_>>>()?;
                let emb = embed(provider.as_ref(), &input)?;
                if model.score_options(&input, &options, emb.as_ref())? == inst.correct {
                    right += 1;
                }
            }
            per_template.push(right as f64 / samples as f64);
        }
        tasks.push(TaskEval {
            task: spec.name.clone(),
            split,
            median: median(&per_template),
            per_template,
        });
    }
    let average = tasks.iter().map(|t| t.median).sum::<f64>() / tasks.len() as f64;
    Ok(EvalReport { tasks, average })
}

fn embed(provider: Option<&EmbeddingProvider>, input: &[usize]) -> Result<Option<Tensor>> {
    provider
        .map(|p| {
            let v = p.embed(input)?;
            Tensor::from_f64(&[1, v.len()], &v)
        })
        .transpose()
}
