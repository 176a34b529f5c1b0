//! Synthetic instruction tasks over a character vocabulary.
//!
//! Every task draws an instance from a seed, renders it through one of
//! several prompt templates and offers a fixed list of answer options. The
//! correct option depends only on the instance, never on the template.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{SeqBatch, PAD};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Characters after the padding id, in id order.
const CHARS: &str = " abcdefghijklmnopqrstuvwxyz0123456789.,:;?!-+=<>()[]{}/*#@&%$^|";

/// Character vocabulary; id 0 is padding.
#[derive(Debug, Clone, Copy, Default)]
pub struct Vocab;

impl Vocab {
    pub fn size() -> usize {
        CHARS.chars().count() + 1
    }

    pub fn encode(text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                CHARS
                    .chars()
                    .position(|v| v == c)
                    .map(|p| p + 1)
                    .ok_or_else(|| Error::Input(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD)
            .filter_map(|&i| CHARS.chars().nth(i - 1))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Parity,
    SortedChoice,
    PatternNext,
    DigitSum,
    FirstLetter,
    Contains,
    LongerChoice,
    DigitCompare,
    /// Separation suite: answer `y` iff the letters fall in the group the
    /// task rewards.
    Group { rewards_low: bool },
}

/// One drawn instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Instance {
    /// Filled into the template's `{x}`.
    pub x: String,
    pub options: Vec<String>,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub split: Split,
    /// Prompt templates with a single `{x}` slot.
    pub templates: Vec<String>,
}

impl TaskSpec {
    fn new(name: &str, kind: TaskKind, split: Split, templates: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind,
            split,
            templates: templates.iter().map(|t| t.to_string()).collect(),
        }
    }

    pub fn instance(&self, seed: u64) -> Instance {
        generate(self.kind, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn render(&self, template: usize, inst: &Instance) -> String {
        self.templates[template].replace("{x}", &inst.x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub name: String,
    pub description: String,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
}

impl TaskSuite {
    pub fn task_ids(&self, split: Split) -> Vec<usize> {
        (0..self.tasks.len())
            .filter(|&i| self.tasks[i].split == split)
            .collect()
    }

    pub fn task(&self, name: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::Config(format!("suite `{}` has no task `{name}`", self.name)))
    }

    pub fn manifest(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("suite serializes")
    }

    /// Longest rendered input and answer over `samples` draws per template.
    pub fn max_lengths(&self, samples: u64) -> (usize, usize) {
        let (mut inp, mut out) = (0, 0);
        for t in &self.tasks {
            for s in 0..samples {
                let inst = t.instance(s);
                for k in 0..t.templates.len() {
                    inp = inp.max(t.render(k, &inst).chars().count());
                }
                out = out.max(inst.options.iter().map(|o| o.chars().count()).max().unwrap_or(0));
            }
        }
        (inp, out)
    }
}

/// Ten templated tasks: six for training, four held out.
pub fn make_task_suite(seed: u64) -> TaskSuite {
    use Split::*;
    use TaskKind::*;
    let mut tasks = vec![
        TaskSpec::new("copy", Copy, Train, &["copy: {x}", "repeat {x} ="]),
        TaskSpec::new("reverse", Reverse, Train, &["reverse: {x}", "{x} backwards ="]),
        TaskSpec::new("parity", Parity, Train, &["parity of {x}?", "count ones in {x}: even or odd?"]),
        TaskSpec::new("sorted", SortedChoice, Train, &["sort: {x}", "order {x} ="]),
        TaskSpec::new("pattern", PatternNext, Train, &["next: {x}", "continue {x} ->"]),
        TaskSpec::new("digit_sum", DigitSum, Train, &["{x} =", "sum {x} mod 10:"]),
        TaskSpec::new("first_letter", FirstLetter, Eval, &["first of {x}?", "{x}: first letter ="]),
        TaskSpec::new("contains", Contains, Eval, &["{x}?", "check: {x}"]),
        TaskSpec::new("longer", LongerChoice, Eval, &["longer: {x}", "which is longer, {x}?"]),
        TaskSpec::new("compare", DigitCompare, Eval, &["is {x}?", "{x} true?"]),
    ];
    // the suite seed only permutes template order within each task so that
    // "template 0" is not always the same surface form
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in &mut tasks {
        t.templates.shuffle(&mut rng);
    }
    TaskSuite {
        name: "toy".into(),
        description: "six training tasks and four held-out tasks over a character vocabulary".into(),
        seed,
        tasks,
    }
}

/// Two tasks that want opposite treatment of the same content.
///
/// Each input is a task marker (`#` or `@`) followed by three letters drawn
/// from either the low group `a..h` or the high group `i..p`. Task `sep_a`
/// answers `y` for low letters and `n` for high ones; `sep_b` answers the
/// reverse. The
/// content alone says nothing about the answer, so one shared rescaling must
/// compromise between the tasks, while experts selected by the marker can
/// each fit one task.
pub fn make_separation_suite() -> TaskSuite {
    use TaskKind::Group;
    TaskSuite {
        name: "separation".into(),
        description: "sep_a (marker #): y iff the letters come from a..h; sep_b (marker @): y iff they come from i..p; \
                      rows are balanced across tasks and groups, so a single adapter sees \
                      contradictory targets for identical content"
            .into(),
        seed: 0,
        tasks: vec![
            TaskSpec::new("sep_a", Group { rewards_low: true }, Split::Train, &["# {x}", "#: {x} ?"]),
            TaskSpec::new("sep_b", Group { rewards_low: false }, Split::Train, &["@ {x}", "@: {x} ?"]),
        ],
    }
}

/// One-feature, two-task miniature of the separation suite.
///
/// Rows carry a feature `x = ±1` and a task. Task 0 labels `x = +1`
/// positive, task 1 labels `x = -1` positive, and the model's logit is
/// `s·x` for a rescaling `s`. Any single `s` costs
/// `½(softplus(s) + softplus(-s)) ≥ ln 2`; one `s` per task costs
/// `softplus(-|s|)`, which goes to zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct Miniature;

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl Miniature {
    /// `(task, x, positive)` for the four balanced rows.
    pub fn rows() -> [(usize, f64, bool); 4] {
        [(0, 1.0, true), (0, -1.0, false), (1, 1.0, false), (1, -1.0, true)]
    }

    /// Mean log loss of per-row rescalings `s[task]`.
    pub fn loss(scale: impl Fn(usize) -> f64) -> f64 {
        Self::rows()
            .iter()
            .map(|&(t, x, pos)| {
                let z = scale(t) * x;
                if pos { softplus(-z) } else { softplus(z) }
            })
            .sum::<f64>()
            / 4.0
    }

    pub fn single_vector_loss(s: f64) -> f64 {
        Self::loss(|_| s)
    }

    /// Two experts with one-hot task routing.
    pub fn expert_loss(s0: f64, s1: f64) -> f64 {
        Self::loss(|t| if t == 0 { s0 } else { s1 })
    }

    /// Smallest single-vector loss on an even grid over `[lo, hi]`.
    pub fn grid_bound(lo: f64, hi: f64, points: usize) -> f64 {
        (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1).max(1) as f64)
            .map(Self::single_vector_loss)
            .fold(f64::INFINITY, f64::min)
    }

    /// Trains a soft-routed MoV layer on the miniature and returns its final
    /// loss. The router reads a one-hot task marker; the experts rescale the
    /// feature and start at one.
    pub fn fit_mov(n_experts: usize, steps: usize, lr: f64, seed: u64) -> Result<f64> {
        use crate::moe;
        use crate::optim::{Optimizer, OptimizerKind};
        use crate::tape::Tape;
        use std::collections::BTreeMap;

        let rows = Self::rows();
        let x: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let marker: Vec<f64> = rows.iter().flat_map(|r| if r.0 == 0 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
        let labels: Vec<usize> = rows.iter().map(|r| r.2 as usize).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
        params.insert("bank".into(), Tensor::ones(&[n_experts, 1]));
        params.insert("router".into(), Tensor::randn(&[2, n_experts], 0.05, &mut rng));
        let mut opt = Optimizer::new(OptimizerKind::Adafactor);
        let mut last = f64::NAN;
        for step in 0..=steps {
            let mut tape = Tape::<f64>::new();
            let bank = tape.param(params["bank"].clone());
            let w_g = tape.param(params["router"].clone());
            let xv = tape.constant(Tensor::new(&[4, 1], x.clone())?);
            let mk = tape.constant(Tensor::new(&[4, 2], marker.clone())?);
            let probs = moe::route_probs(&mut tape, w_g, mk)?;
            let z = moe::mov_forward(&mut tape, xv, bank, probs, true)?;
            // two-class logits [-z/2, z/2] so that p(positive) = σ(z)
            let spread = tape.constant(Tensor::new(&[1, 2], vec![-0.5, 0.5])?);
            let logits = tape.matmul(z, spread)?;
            let logits = tape.reshape(logits, &[4, 1, 2])?;
            let loss = tape.cross_entropy(logits, &labels, &[1.0; 4])?;
            last = tape.value(loss).item();
            if step == steps {
                break;
            }
            tape.backward(loss)?;
            let grads: BTreeMap<String, Tensor<f64>> = [("bank", bank), ("router", w_g)]
                .into_iter()
                .filter_map(|(k, v)| tape.grad(v).map(|g| (k.to_string(), g)))
                .collect();
            opt.step(&mut params, &grads, lr)?;
        }
        Ok(last)
    }
}

fn letters(rng: &mut impl Rng, lo: u8, hi: u8, len: usize) -> String {
    (0..len).map(|_| rng.random_range(lo..=hi) as char).collect()
}

fn two_options(rng: &mut impl Rng, right: String, wrong: String) -> Instance {
    let correct = rng.random_range(0..2usize);
    let options = if correct == 0 { vec![right, wrong] } else { vec![wrong, right] };
    Instance {
        x: String::new(),
        options,
        correct,
    }
}

fn labelled(x: String, options: &[&str], correct: usize) -> Instance {
    Instance {
        x,
        options: options.iter().map(|s| s.to_string()).collect(),
        correct,
    }
}

fn generate(kind: TaskKind, rng: &mut ChaCha8Rng) -> Instance {
    match kind {
        TaskKind::Copy => {
            let len = rng.random_range(3..=5);
            let x = letters(rng, b'a', b'z', len);
            let mut wrong: Vec<char> = x.chars().collect();
            let i = rng.random_range(0..len);
            let shift = rng.random_range(1..26u8);
            wrong[i] = (b'a' + (wrong[i] as u8 - b'a' + shift) % 26) as char;
            let mut inst = two_options(rng, x.clone(), wrong.into_iter().collect());
            inst.x = x;
            inst
        }
        TaskKind::Reverse => {
            let len = rng.random_range(3..=5);
            let mut x = letters(rng, b'a', b'z', len);
            while x.chars().rev().collect::<String>() == x {
                x = letters(rng, b'a', b'z', len);
            }
            let rev: String = x.chars().rev().collect();
            let mut inst = two_options(rng, rev, x.clone());
            inst.x = x;
            inst
        }
        TaskKind::Parity => {
            let odd = rng.random_bool(0.5);
            let len = rng.random_range(4..=7);
            let mut bits: Vec<bool> = (0..len).map(|_| rng.random_bool(0.5)).collect();
            if (bits.iter().filter(|&&b| b).count() % 2 == 1) != odd {
                let i = rng.random_range(0..len);
                bits[i] = !bits[i];
            }
            let x = bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
            labelled(x, &["even", "odd"], odd as usize)
        }
        TaskKind::SortedChoice => {
            let mut chars: Vec<char> = letters(rng, b'a', b'z', 3).chars().collect();
            while chars[0] == chars[1] || chars[1] == chars[2] || chars[0] == chars[2] {
                chars = letters(rng, b'a', b'z', 3).chars().collect();
            }
            let x: String = chars.iter().collect();
            let mut sorted = chars.clone();
            sorted.sort();
            let mut wrong = sorted.clone();
            wrong.swap(rng.random_range(0..2), 2);
            let mut inst = two_options(rng, sorted.into_iter().collect(), wrong.into_iter().collect());
            inst.x = x;
            inst
        }
        TaskKind::PatternNext => {
            let period = rng.random_range(2..=3);
            let mut unit: Vec<char> = letters(rng, b'a', b'z', period).chars().collect();
            while unit.iter().skip(1).any(|&c| c == unit[0]) {
                unit = letters(rng, b'a', b'z', period).chars().collect();
            }
            let shown = rng.random_range(period + 2..=2 * period + 2);
            let x: String = (0..shown).map(|i| unit[i % period]).collect();
            let next = unit[shown % period];
            let wrong = unit[(shown + 1) % period];
            let mut inst = two_options(rng, next.to_string(), wrong.to_string());
            inst.x = x;
            inst
        }
        TaskKind::DigitSum => {
            let (a, b) = (rng.random_range(0..10u32), rng.random_range(0..10u32));
            let right = (a + b) % 10;
            let wrong = (right + rng.random_range(1..10)) % 10;
            let mut inst = two_options(rng, right.to_string(), wrong.to_string());
            inst.x = format!("{a}+{b}");
            inst
        }
        TaskKind::FirstLetter => {
            let len = rng.random_range(3..=5);
            let mut x = letters(rng, b'a', b'z', len);
            while x.chars().last() == x.chars().next() {
                x = letters(rng, b'a', b'z', len);
            }
            let first = x.chars().next().unwrap().to_string();
            let last = x.chars().last().unwrap().to_string();
            let mut inst = two_options(rng, first, last);
            inst.x = x;
            inst
        }
        TaskKind::Contains => {
            let len = rng.random_range(3..=5);
            let target = rng.random_range(b'a'..=b'z') as char;
            let yes = rng.random_bool(0.5);
            let mut word: Vec<char> = (0..len)
                .map(|_| loop {
                    let c = rng.random_range(b'a'..=b'z') as char;
                    if c != target {
                        break c;
                    }
                })
                .collect();
            if yes {
                let i = rng.random_range(0..len);
                word[i] = target;
            }
            let x = format!("{target} in {}", word.iter().collect::<String>());
            labelled(x, &["yes", "no"], if yes { 0 } else { 1 })
        }
        TaskKind::LongerChoice => {
            let la = rng.random_range(2..=5);
            let mut lb = rng.random_range(2..=5);
            while lb == la {
                lb = rng.random_range(2..=5);
            }
            let a = letters(rng, b'a', b'z', la);
            let b = letters(rng, b'a', b'z', lb);
            let x = format!("{a} or {b}");
            let correct = if la > lb { 0 } else { 1 };
            Instance {
                x,
                options: vec![a, b],
                correct,
            }
        }
        TaskKind::DigitCompare => {
            let a = rng.random_range(0..10u32);
            let mut b = rng.random_range(0..10u32);
            while b == a {
                b = rng.random_range(0..10u32);
            }
            labelled(format!("{a}>{b}"), &["yes", "no"], if a > b { 0 } else { 1 })
        }
        TaskKind::Group { rewards_low } => {
            let low = rng.random_bool(0.5);
            let x = if low {
                letters(rng, b'a', b'h', 3)
            } else {
                letters(rng, b'i', b'p', 3)
            };
            labelled(x, &["y", "n"], if low == rewards_low { 0 } else { 1 })
        }
    }
}

/// Hashed bag-of-tokens sentence embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingProvider {
    pub width: usize,
}

impl Default for EmbeddingProvider {
    fn default() -> Self {
        Self {
            width: crate::moe::DEFAULT_EMBED_WIDTH,
        }
    }
}

impl EmbeddingProvider {
    /// Each token adds `±1` at a hashed slot; the sum is L2-normalized.
    pub fn embed(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        if self.width == 0 {
            return Err(Error::Config("embedding width must be positive".into()));
        }
        let mut v = vec![0.0; self.width];
        for &t in tokens.iter().filter(|&&t| t != PAD) {
            let mut h = FnvHasher::default();
            h.write_u64(t as u64);
            let hash = h.finish();
            let sign = if hash >> 63 == 1 { -1.0 } else { 1.0 };
            v[(hash % self.width as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Input("cannot embed an empty instruction".into()));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// Sampled rows with their task labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Scalar = f32> {
    pub seq: SeqBatch,
    pub task_ids: Vec<usize>,
    pub templates: Vec<usize>,
    /// `[rows, width]` when requested.
    pub embeddings: Option<Tensor<T>>,
}

/// Draws rows: task uniform over the split, template uniform per row, target
/// the correct option.
pub fn sample_batch(
    suite: &TaskSuite,
    split: Split,
    batch_size: usize,
    seed: u64,
    embeddings: Option<&EmbeddingProvider>,
) -> Result<Batch> {
    let ids = suite.task_ids(split);
    if ids.is_empty() {
        return Err(Error::Config(format!("suite `{}` has no {split:?} tasks", suite.name)));
    }
    sample_from(suite, &ids, batch_size, seed, embeddings)
}

fn sample_from(
    suite: &TaskSuite,
    ids: &[usize],
    batch_size: usize,
    seed: u64,
    embeddings: Option<&EmbeddingProvider>,
) -> Result<Batch> {
    if batch_size < 1 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut inputs, mut targets, mut task_ids, mut templates) = (vec![], vec![], vec![], vec![]);
    for _ in 0..batch_size {
        let task = ids[rng.random_range(0..ids.len())];
        let spec = &suite.tasks[task];
        let template = rng.random_range(0..spec.templates.len());
        let inst = spec.instance(rng.next_u64());
        inputs.push(Vocab::encode(&spec.render(template, &inst))?);
        targets.push(Vocab::encode(&inst.options[inst.correct])?);
        task_ids.push(task);
        templates.push(template);
    }
    let emb = match embeddings {
        Some(p) => {
            let mut data = Vec::with_capacity(batch_size * p.width);
            for row in &inputs {
                data.extend(p.embed(row)?.into_iter().map(|v| v as f32));
            }
            Some(Tensor::new(&[batch_size, p.width], data)?)
        }
        None => None,
    };
    Ok(Batch {
        seq: SeqBatch::new(&inputs, &targets)?,
        task_ids,
        templates,
        embeddings: emb,
    })
}

/// Rows drawn from one task only.
pub fn sample_task_batch(
    suite: &TaskSuite,
    task: usize,
    batch_size: usize,
    seed: u64,
    embeddings: Option<&EmbeddingProvider>,
) -> Result<Batch> {
    if task >= suite.tasks.len() {
        return Err(Error::Index(format!("task {task} of {}", suite.tasks.len())));
    }
    sample_from(suite, &[task], batch_size, seed, embeddings)
}
