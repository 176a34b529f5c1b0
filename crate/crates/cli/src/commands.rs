//! One function per verb. Each takes resolved arguments and writes its
//! artifacts; `main` only parses flags and maps errors to exit codes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use moe_peft::adapters::PeftKind;
use moe_peft::backbone::{Backbone, BackboneConfig};
use moe_peft::checkpoint::{model_checkpoint, model_from_checkpoint, Checkpoint};
use moe_peft::eval::{evaluate, EvalReport};
use moe_peft::model::{AdapterSet, Model};
use moe_peft::moe::{InputMode, Mixing, RoutingConfig, RouterScope, Strategy};
use moe_peft::params::{count_params, ArchSpec, ParamBudget, PlanPreset};
use moe_peft::site::RouterKey;
use moe_peft::stats::{routing_stats, RoutingStats};
use moe_peft::taskgen::{sample_batch, sample_task_batch, Split, TaskSuite};
use moe_peft::train::{embedding_provider, train_run, warm_up, StepReport};
use moe_peft::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::{check_suite_fits, RunConfig, SuiteConfig};
use crate::output::{create_dir, fmt_float, io_err, strings, write_csv, write_file, write_json};

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const METRICS: &str = "metrics.jsonl";

// ---------------------------------------------------------------- train

pub struct TrainOutcome {
    pub dir: PathBuf,
    pub reports: Vec<StepReport>,
    pub model: Model,
}

/// Frozen backbone (optionally warmed up) with freshly initialized adapters.
pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    let mut backbone = Backbone::build(cfg.backbone.clone())?;
    let t = &cfg.train;
    if t.warmup_steps > 0 {
        backbone = warm_up(&backbone, &cfg.suite.build(), t.warmup_steps, t.warmup_lr, t.seed, t.batch_size)?;
    }
    let adapters = AdapterSet::init(cfg.adapter_spec(), &cfg.backbone, t.seed)?;
    Ok(Model::new(backbone, Some(adapters)))
}

fn checkpoint_meta(cfg: &RunConfig) -> serde_json::Value {
    json!({ "suite": cfg.suite, "seed": cfg.train.seed, "config_hash": cfg.hash() })
}

/// Trains into `dir`: `config.json`, `metrics.jsonl` (one line per step,
/// flushed as it goes so a diverged run keeps its log), `ckpt-<step>.ckpt`
/// at the configured cadence and `final.ckpt`.
pub fn cmd_train(cfg: &RunConfig, dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    create_dir(dir)?;
    write_file(&dir.join("config.json"), cfg.to_json() + "\n")?;
    let suite = cfg.suite.build();
    let mut model = build_model(cfg)?;
    let metrics_path = dir.join(METRICS);
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?);
    let every = cfg.train.checkpoint_every;
    let meta = checkpoint_meta(cfg);
    let result = train_run(&mut model, &suite, &cfg.train, |report, m| {
        writeln!(metrics, "{}", report.to_json())
            .and_then(|_| metrics.flush())
            .map_err(|e| io_err(&metrics_path, e))?;
        if every > 0 && report.step % every == 0 {
            model_checkpoint(m, meta.clone())?.save(&dir.join(format!("ckpt-{:06}.ckpt", report.step)))?;
        }
        Ok(())
    });
    metrics.flush().map_err(|e| io_err(&metrics_path, e))?;
    let reports = result?;
    model_checkpoint(&model, meta)?.save(&dir.join(FINAL_CHECKPOINT))?;
    Ok(TrainOutcome {
        dir: dir.to_path_buf(),
        reports,
        model,
    })
}

// ---------------------------------------------------------------- checkpoints

/// A checkpoint's model and the suite it was trained on, unless overridden.
pub fn load_checkpoint(path: &Path, suite: Option<&SuiteConfig>) -> Result<(Model, SuiteConfig, TaskSuite)> {
    let ckpt = Checkpoint::load(path)?;
    let model = model_from_checkpoint(&ckpt)?;
    let suite_cfg: SuiteConfig = match suite {
        Some(s) => s.clone(),
        None => match ckpt.meta.get("suite") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| Error::Format(format!("checkpoint suite: {e}")))?,
            None => return Err(Error::Config("checkpoint names no suite; pass --suite".into())),
        },
    };
    let suite = suite_cfg.build();
    check_suite_fits(model.backbone.config(), &suite)?;
    Ok((model, suite_cfg, suite))
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSel {
    Train,
    Eval,
    All,
}

impl SplitSel {
    pub fn splits(self) -> Vec<Split> {
        match self {
            SplitSel::Train => vec![Split::Train],
            SplitSel::Eval => vec![Split::Eval],
            SplitSel::All => vec![Split::Train, Split::Eval],
        }
    }
}

impl std::str::FromStr for SplitSel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitSel::Train),
            "eval" => Ok(SplitSel::Eval),
            "all" => Ok(SplitSel::All),
            _ => Err(Error::Config(format!("unknown split `{s}` (train|eval|all)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub tasks: Vec<moe_peft::eval::TaskEval>,
    /// Mean of per-task medians over every evaluated task.
    pub average: f64,
}

pub fn eval_header() -> Vec<String> {
    strings(["task", "split", "median", "mean", "min", "max", "templates"])
}

/// Evaluates every task of the selected splits; splits without tasks are
/// skipped unless none has any.
pub fn run_eval(model: &Model, suite: &TaskSuite, sel: SplitSel, samples: usize, seed: u64) -> Result<EvalSummary> {
    let mut tasks = Vec::new();
    for split in sel.splits() {
        if suite.task_ids(split).is_empty() && sel == SplitSel::All {
            continue;
        }
        let EvalReport { tasks: t, .. } = evaluate(model, suite, split, samples, seed)?;
        tasks.extend(t);
    }
    if tasks.is_empty() {
        return Err(Error::Config(format!("suite `{}` has no tasks to evaluate", suite.name)));
    }
    let average = tasks.iter().map(|t| t.median).sum::<f64>() / tasks.len() as f64;
    Ok(EvalSummary { tasks, average })
}

pub fn eval_rows(summary: &EvalSummary) -> Vec<Vec<String>> {
    let mut rows: Vec<Vec<String>> = summary
        .tasks
        .iter()
        .map(|t| {
            let p = &t.per_template;
            let mean = p.iter().sum::<f64>() / p.len() as f64;
            let min = p.iter().copied().fold(f64::INFINITY, f64::min);
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            vec![
                t.task.clone(),
                split_name(t.split).into(),
                fmt_float(t.median),
                fmt_float(mean),
                fmt_float(min),
                fmt_float(max),
                p.len().to_string(),
            ]
        })
        .collect();
    rows.push(vec![
        "average".into(),
        "all".into(),
        fmt_float(summary.average),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
    ]);
    rows
}

/// Writes `eval.csv` and `eval.json` into `dir`.
pub fn cmd_eval(
    checkpoint: &Path,
    suite: Option<&SuiteConfig>,
    sel: SplitSel,
    samples: usize,
    seed: u64,
    dir: &Path,
) -> Result<EvalSummary> {
    let (model, _, suite) = load_checkpoint(checkpoint, suite)?;
    let summary = run_eval(&model, &suite, sel, samples, seed)?;
    create_dir(dir)?;
    write_csv(&dir.join("eval.csv"), &eval_header(), &eval_rows(&summary))?;
    write_json(&dir.join("eval.json"), &summary)?;
    Ok(summary)
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Eval => "eval",
    }
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    NExperts,
    Strategy,
    RoutingInput,
    BatchSize,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n_experts" => Ok(SweepAxis::NExperts),
            "strategy" => Ok(SweepAxis::Strategy),
            "routing_input" => Ok(SweepAxis::RoutingInput),
            "batch_size" => Ok(SweepAxis::BatchSize),
            _ => Err(Error::Config(format!(
                "unknown sweep axis `{s}` (n_experts|strategy|routing_input|batch_size)"
            ))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::NExperts => "n_experts",
            SweepAxis::Strategy => "strategy",
            SweepAxis::RoutingInput => "routing_input",
            SweepAxis::BatchSize => "batch_size",
        }
    }

    /// The base config with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let bad = || Error::Config(format!("bad {} value `{value}`", self.name()));
        match self {
            SweepAxis::NExperts => cfg.n_experts = value.parse().map_err(|_| bad())?,
            SweepAxis::BatchSize => cfg.train.batch_size = value.parse().map_err(|_| bad())?,
            SweepAxis::Strategy => {
                cfg.routing.strategy = serde_json::from_value(json!(value)).map_err(|_| bad())?;
                if cfg.routing.strategy == Strategy::Soft {
                    cfg.routing.load_balance_alpha = None;
                }
            }
            SweepAxis::RoutingInput => {
                cfg.routing.input_mode = serde_json::from_value::<InputMode>(json!(value)).map_err(|_| bad())?
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub config_hash: String,
    /// `ok`, `diverged` or `failed`.
    pub status: String,
    pub final_loss: Option<f64>,
    pub eval_average: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub error: Option<String>,
}

pub fn sweep_header() -> Vec<String> {
    strings([
        "axis",
        "value",
        "config_hash",
        "status",
        "final_loss",
        "eval_average",
        "mean_entropy",
        "error",
    ])
}

fn sweep_csv_row(r: &SweepRow) -> Vec<String> {
    let f = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
    vec![
        r.axis.clone(),
        r.value.clone(),
        r.config_hash.clone(),
        r.status.clone(),
        f(r.final_loss),
        f(r.eval_average),
        f(r.mean_entropy),
        r.error.clone().unwrap_or_default(),
    ]
}

/// Eval split when the suite has one, training tasks otherwise.
fn sweep_eval_split(suite: &TaskSuite) -> SplitSel {
    if suite.task_ids(Split::Eval).is_empty() {
        SplitSel::Train
    } else {
        SplitSel::Eval
    }
}

fn sweep_child(cfg: &RunConfig, dir: &Path, eval_samples: usize) -> Result<(f64, f64, Option<f64>)> {
    let out = cmd_train(cfg, dir)?;
    let last = out
        .reports
        .last()
        .ok_or_else(|| Error::Config("sweep children need at least one training step".into()))?;
    let suite = cfg.suite.build();
    let summary = run_eval(&out.model, &suite, sweep_eval_split(&suite), eval_samples, cfg.train.seed)?;
    Ok((last.loss, summary.average, last.mean_entropy()))
}

/// Trains one child per value under `dir/<axis>-<value>` using up to
/// `threads` workers, then writes `sweep.csv` and `sweep.json` in value
/// order. A failing child fills its row's `error` column and the sweep
/// continues.
pub fn cmd_sweep(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    eval_samples: usize,
    threads: usize,
    dir: &Path,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    create_dir(dir)?;
    let children: Vec<_> = values
        .iter()
        .map(|v| (v, axis.apply(base, v).map_err(|e| e.to_string())))
        .collect();
    let slots: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; values.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, values.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((value, cfg)) = children.get(i) else { break };
                let child_dir = dir.join(format!("{}-{value}", axis.name()));
                let (hash, result) = match cfg {
                    Ok(c) => (
                        c.hash(),
                        sweep_child(c, &child_dir, eval_samples).map_err(|e| {
                            let status = if matches!(e, Error::Divergence { .. }) { "diverged" } else { "failed" };
                            (status, e.to_string())
                        }),
                    ),
                    Err(msg) => (String::new(), Err(("failed", msg.clone()))),
                };
                let mut row = SweepRow {
                    axis: axis.name().into(),
                    value: value.to_string(),
                    config_hash: hash,
                    status: "ok".into(),
                    final_loss: None,
                    eval_average: None,
                    mean_entropy: None,
                    error: None,
                };
                match result {
                    Ok((loss, avg, ent)) => {
                        row.final_loss = Some(loss);
                        row.eval_average = Some(avg);
                        row.mean_entropy = ent;
                    }
                    Err((status, msg)) => {
                        row.status = status.into();
                        row.error = Some(msg);
                    }
                }
                slots.lock().expect("sweep slots")[i] = Some(row);
            });
        }
    });
    let rows: Vec<SweepRow> = slots
        .into_inner()
        .expect("sweep slots")
        .into_iter()
        .map(|r| r.expect("every child reports"))
        .collect();
    write_csv(&dir.join("sweep.csv"), &sweep_header(), &rows.iter().map(sweep_csv_row).collect::<Vec<_>>())?;
    write_json(&dir.join("sweep.json"), &rows)?;
    Ok(rows)
}

// ---------------------------------------------------------------- params

/// Reference percentages of trainable parameters for the published T5 v1.1
/// configurations: `(arch, plan, percent)`.
pub const REFERENCE_BUDGETS: [(&str, &str, f64); 10] = [
    ("large", "ia3", 0.036),
    ("xl", "ia3", 0.018),
    ("xxl", "ia3", 0.0098),
    ("xl", "mov-10", 0.32),
    ("xxl", "mov-10", 0.143),
    ("xl", "mov-30", 0.68),
    ("xl", "mov-60", 1.22),
    ("xxl", "mov-60", 0.862),
    ("xl", "lora", 0.3),
    ("xl", "molora-10", 3.18),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamsRow {
    pub arch: String,
    pub plan: String,
    pub n_experts: usize,
    #[serde(flatten)]
    pub budget: ParamBudget,
    /// Published percentage, for reference rows.
    pub reference_percent: Option<f64>,
}

/// `large`, `xl`, `xxl`, `toy` (the given backbone) or a path to a TOML
/// architecture file.
pub fn resolve_arch(name: &str, toy: &BackboneConfig) -> Result<ArchSpec> {
    if name == "toy" {
        return Ok(ArchSpec::from_backbone(toy));
    }
    if name.ends_with(".toml") {
        let text = std::fs::read_to_string(name).map_err(|e| Error::Config(format!("{name}: {e}")))?;
        return ArchSpec::from_toml(&text);
    }
    ArchSpec::preset(name)
}

pub fn params_row(
    arch: &ArchSpec,
    plan: &str,
    rank: usize,
    routing: &RoutingConfig,
    reference: Option<f64>,
) -> Result<ParamsRow> {
    let preset: PlanPreset = plan.parse()?;
    let budget = count_params(&preset.plan(rank), arch, preset.n_experts, routing)?;
    Ok(ParamsRow {
        arch: arch.name.clone(),
        plan: plan.to_string(),
        n_experts: preset.n_experts,
        budget,
        reference_percent: reference,
    })
}

/// Every reference row under the default routing layout.
pub fn reference_rows(rank: usize, scope: RouterScope) -> Result<Vec<ParamsRow>> {
    let routing = RoutingConfig {
        scope,
        ..RoutingConfig::default()
    };
    REFERENCE_BUDGETS
        .iter()
        .map(|&(arch, plan, pct)| params_row(&ArchSpec::preset(arch)?, plan, rank, &routing, Some(pct)))
        .collect()
}

pub fn params_header() -> Vec<String> {
    strings([
        "arch",
        "plan",
        "n_experts",
        "adapter_params",
        "router_params",
        "backbone_params",
        "percent_updated",
        "reference_percent",
    ])
}

pub fn params_csv(rows: &[ParamsRow]) -> Result<String> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.arch.clone(),
                r.plan.clone(),
                r.n_experts.to_string(),
                r.budget.adapter_params.to_string(),
                r.budget.router_params.to_string(),
                r.budget.backbone_params.to_string(),
                fmt_float(r.budget.percent_updated),
                r.reference_percent.map(fmt_float).unwrap_or_default(),
            ]
        })
        .collect();
    crate::output::csv_string(&params_header(), &body)
}

/// Plan name for a run config, in the form `params` accepts.
pub fn plan_name(kind: PeftKind, n_experts: usize) -> String {
    match (kind, n_experts) {
        (PeftKind::Ia3, 1) => "ia3".into(),
        (PeftKind::Lora, 1) => "lora".into(),
        (PeftKind::Ia3, n) => format!("mov-{n}"),
        (PeftKind::Lora, n) => format!("molora-{n}"),
    }
}

// ---------------------------------------------------------------- routing-stats

pub fn routing_means_header(n: usize) -> Vec<String> {
    let mut h = strings(["task", "split", "tokens", "entropy"]);
    h.extend((0..n).map(|i| format!("expert_{i}")));
    h
}

pub fn routing_jsd_header(tasks: &[String]) -> Vec<String> {
    let mut h = strings(["task"]);
    h.extend(tasks.iter().cloned());
    h
}

/// Mean routing per task of both splits at router `site` (default: last
/// decoder feed-forward block), written as `routing_means.csv`,
/// `routing_jsd.csv` and `routing.json`.
pub fn cmd_routing_stats(
    checkpoint: &Path,
    suite: Option<&SuiteConfig>,
    site: Option<&str>,
    samples: usize,
    seed: u64,
    dir: &Path,
) -> Result<RoutingStats> {
    let (model, _, suite) = load_checkpoint(checkpoint, suite)?;
    let stats = task_routing(&model, &suite, site, samples, seed)?;
    let split_of: BTreeMap<&str, Split> = suite.tasks.iter().map(|t| (t.name.as_str(), t.split)).collect();
    let n = stats.tasks.first().map_or(0, |t| t.mean.len());
    let means: Vec<Vec<String>> = stats
        .tasks
        .iter()
        .map(|t| {
            let mut r = vec![
                t.task.clone(),
                split_of.get(t.task.as_str()).map_or("", |&s| split_name(s)).into(),
                t.tokens.to_string(),
                fmt_float(t.entropy),
            ];
            r.extend(t.mean.iter().map(|&p| fmt_float(p)));
            r
        })
        .collect();
    let names: Vec<String> = stats.tasks.iter().map(|t| t.task.clone()).collect();
    let jsd: Vec<Vec<String>> = names
        .iter()
        .zip(&stats.jsd)
        .map(|(name, row)| std::iter::once(name.clone()).chain(row.iter().map(|&v| fmt_float(v))).collect())
        .collect();
    create_dir(dir)?;
    write_csv(&dir.join("routing_means.csv"), &routing_means_header(n), &means)?;
    write_csv(&dir.join("routing_jsd.csv"), &routing_jsd_header(&names), &jsd)?;
    write_json(&dir.join("routing.json"), &stats)?;
    Ok(stats)
}

/// `samples` rows of every task, in task order.
pub fn task_routing(model: &Model, suite: &TaskSuite, site: Option<&str>, samples: usize, seed: u64) -> Result<RoutingStats> {
    if samples == 0 {
        return Err(Error::Config("routing statistics need at least one sample per task".into()));
    }
    let provider = embedding_provider(model);
    let batches = (0..suite.tasks.len())
        .map(|t| sample_task_batch(suite, t, samples, seed.wrapping_add(t as u64), provider.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    routing_stats(model, suite, &batches, site)
}

// ---------------------------------------------------------------- export-merged

pub const FOLD_TOLERANCE: f64 = 1e-5;

/// How constant expert weights are chosen for folding.
#[derive(Debug, Clone, PartialEq)]
pub enum MixingChoice {
    Uniform,
    /// Each router's mean distribution on one task.
    TaskMean(String),
    Weights(Vec<f64>),
}

impl std::str::FromStr for MixingChoice {
    type Err = Error;

    /// `uniform`, `task-mean:<task>` or comma-separated weights.
    fn from_str(s: &str) -> Result<Self> {
        if s == "uniform" {
            return Ok(MixingChoice::Uniform);
        }
        if let Some(task) = s.strip_prefix("task-mean:") {
            return Ok(MixingChoice::TaskMean(task.to_string()));
        }
        s.split(',')
            .map(|w| w.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(MixingChoice::Weights)
            .map_err(|_| Error::Config(format!("bad mixing `{s}`; expected uniform, task-mean:<task> or w0,w1,...")))
    }
}

impl MixingChoice {
    pub fn label(&self) -> String {
        match self {
            MixingChoice::Uniform => "uniform".into(),
            MixingChoice::TaskMean(t) => format!("task-mean:{t}"),
            MixingChoice::Weights(w) => w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        }
    }
}

/// Constant mixing for `model`, validated against its expert count.
pub fn resolve_mixing(model: &Model, suite: &TaskSuite, choice: &MixingChoice, samples: usize, seed: u64) -> Result<Mixing> {
    let set = model
        .adapters
        .as_ref()
        .ok_or_else(|| Error::Contract("checkpoint has no adapters to fold".into()))?;
    let n = set.n_experts();
    let mixing = match choice {
        MixingChoice::Uniform => Mixing::uniform(n),
        MixingChoice::Weights(w) => Mixing::Shared(w.clone()),
        MixingChoice::TaskMean(task) => {
            let id = suite.task(task)?;
            if !set.spec().routed() {
                Mixing::uniform(1)
            } else {
                let provider = embedding_provider(model);
                let batch = sample_task_batch(suite, id, samples, seed, provider.as_ref())?;
                let mut per = BTreeMap::new();
                let batches = std::slice::from_ref(&batch);
                for key in set.spec().routers() {
                    // Cross-attention routers that only gate k/v route memory tokens.
                    let stats = routing_stats(model, suite, batches, Some(&key.to_string()))
                        .or_else(|_| routing_stats(model, suite, batches, Some(&format!("{key}.mem"))))?;
                    per.insert(key, stats.tasks[0].mean.clone());
                }
                Mixing::PerRouter(per)
            }
        }
    };
    mixing.validate(n)?;
    Ok(mixing)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldReport {
    pub mixing: String,
    pub weights: BTreeMap<String, Vec<f64>>,
    pub probes: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Folds the adapters under constant mixing and checks the folded backbone
/// against the adapter model routed by the same constants on `probes` inputs.
/// Writes `verify.json` always and `merged.ckpt` only when verification
/// passes.
pub fn cmd_export_merged(
    checkpoint: &Path,
    choice: &MixingChoice,
    probes: usize,
    tolerance: f64,
    seed: u64,
    dir: &Path,
) -> Result<FoldReport> {
    if probes == 0 {
        return Err(Error::Config("verification needs at least one probe input".into()));
    }
    let (model, suite_cfg, suite) = load_checkpoint(checkpoint, None)?;
    let mixing = resolve_mixing(&model, &suite, choice, 128, seed)?;
    let set = model.adapters.as_ref().expect("resolve_mixing checked adapters");
    let folded = set.fold_static(&model.backbone, &mixing)?;
    // Both sides run in f64 on the stored f32 weights, so the deviation
    // measures the fold and its rounding rather than f32 forward noise.
    // Constant mixing never consults the routers, so no embeddings are needed.
    let batch = sample_batch(&suite, Split::Train, probes, seed ^ 0x0f01d, None)?;
    let routed = model.cast::<f64>().logits(&batch.seq, None, &mixing)?;
    let merged = Model::new(folded, None);
    let plain = merged.cast::<f64>().logits(&batch.seq, None, &Mixing::Live)?;
    let max_deviation = routed
        .data()
        .iter()
        .zip(plain.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let report = FoldReport {
        mixing: choice.label(),
        weights: mixing_weights(&mixing, set.spec().routers()),
        probes,
        max_deviation,
        tolerance,
        passed: max_deviation < tolerance,
    };
    create_dir(dir)?;
    write_json(&dir.join("verify.json"), &report)?;
    if !report.passed {
        return Err(Error::Verification(format!(
            "folded model deviates by {max_deviation:e} (tolerance {tolerance:e}); report in {}",
            dir.join("verify.json").display()
        )));
    }
    let meta = json!({
        "folded_from": checkpoint.display().to_string(),
        "mixing": report.mixing,
        "suite": suite_cfg,
    });
    model_checkpoint(&merged, meta)?.save(&dir.join("merged.ckpt"))?;
    Ok(report)
}

fn mixing_weights(mixing: &Mixing, routers: Vec<RouterKey>) -> BTreeMap<String, Vec<f64>> {
    match mixing {
        Mixing::Live => BTreeMap::new(),
        Mixing::Shared(w) if routers.is_empty() => BTreeMap::from([("shared".to_string(), w.clone())]),
        Mixing::Shared(w) => routers.into_iter().map(|k| (k.to_string(), w.clone())).collect(),
        Mixing::PerRouter(m) => m.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
    }
}
