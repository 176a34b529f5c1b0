//! Backbone plus experts and routers.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{apply_ia3, apply_lora, IA3Vector, LoraPair, PeftKind, PeftPlan};
use crate::backbone::{
    target_log_probs, weight_name, Backbone, BackboneConfig, ForwardOut, Hooks, RouteCtx, SeqBatch,
    Source, WeightVars,
};
use crate::error::{Error, Result};
use crate::moe::{self, InputMode, Mixing, RoutingConfig};
use crate::site::{RouterKey, Side, Site, SiteKey};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Shape of the trainable part of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub plan: PeftPlan,
    pub n_experts: usize,
    #[serde(default)]
    pub routing: RoutingConfig,
}

impl AdapterSpec {
    pub fn validate(&self, cfg: &BackboneConfig) -> Result<()> {
        self.plan.validate(cfg)?;
        self.routing.validate(self.n_experts)
    }

    pub fn routed(&self) -> bool {
        self.n_experts > 1
    }

    /// Routers in name order; empty for a single expert.
    pub fn routers(&self) -> Vec<RouterKey> {
        if !self.routed() {
            return Vec::new();
        }
        let set: BTreeSet<RouterKey> = self
            .plan
            .sites
            .iter()
            .map(|&s| self.routing.router_for(s))
            .collect();
        set.into_iter().collect()
    }

    pub fn router_width(&self, cfg: &BackboneConfig) -> usize {
        match self.routing.input_mode {
            InputMode::Token => cfg.d_model,
            InputMode::Sentence => self.routing.embed_width,
        }
    }

    /// Names and shapes of every trainable tensor.
    pub fn tensor_shapes(&self, cfg: &BackboneConfig) -> Vec<(String, Vec<usize>)> {
        let n = self.n_experts;
        let mut out = Vec::new();
        for &s in &self.plan.sites {
            match self.plan.kind {
                PeftKind::Ia3 => {
                    let w = cfg.rescale_width(s.site).unwrap_or(0);
                    out.push((ia3_name(s), vec![n, w]));
                }
                PeftKind::Lora => {
                    let (i, o) = cfg.linear_dims(s.site).unwrap_or((0, 0));
                    let r = self.plan.rank();
                    out.push((lora_a_name(s), vec![i, n * r]));
                    out.push((lora_b_name(s), vec![n * r, o]));
                }
            }
        }
        let width = self.router_width(cfg);
        for rk in self.routers() {
            out.push((router_name(rk), vec![width, n]));
        }
        out
    }
}

pub fn ia3_name(site: SiteKey) -> String {
    format!("ia3.{site}")
}

pub fn lora_a_name(site: SiteKey) -> String {
    format!("lora.{site}.a")
}

pub fn lora_b_name(site: SiteKey) -> String {
    format!("lora.{site}.b")
}

pub fn router_name(key: RouterKey) -> String {
    format!("router.{key}")
}

/// Experts and routers for every adapted site.
///
/// (IA)³ banks are `[n, width]`. LoRA factors are stacked: `A` as
/// `[d_in, n·r]` and `B` as `[n·r, d_out]`, expert `i` owning slice `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<T: Scalar = f32> {
    spec: AdapterSpec,
    dims: BackboneConfig,
    params: BTreeMap<String, Tensor<T>>,
}

impl AdapterSet<f32> {
    /// Fresh experts: (IA)³ vectors at ones, LoRA `A` normal with std
    /// `1/√d_in` and `B` at zero, routers small normal.
    pub fn init(spec: AdapterSpec, cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        spec.validate(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut shapes = spec.tensor_shapes(cfg);
        shapes.sort();
        for (name, shape) in shapes {
            let t = if name.starts_with("ia3.") {
                Tensor::ones(&shape)
            } else if name.starts_with("router.") {
                Tensor::randn(&shape, spec.routing.router_init_std, &mut rng)
            } else if name.ends_with(".a") {
                Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), &mut rng)
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t);
        }
        Ok(Self {
            spec,
            dims: cfg.clone(),
            params,
        })
    }
}

impl<T: Scalar> AdapterSet<T> {
    pub fn from_params(spec: AdapterSpec, cfg: &BackboneConfig, params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        spec.validate(cfg)?;
        let shapes = spec.tensor_shapes(cfg);
        for (name, shape) in &shapes {
            match params.get(name) {
                None => return Err(Error::Format(format!("adapter tensor `{name}` missing"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Format(format!(
                        "adapter tensor `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if params.len() != shapes.len() {
            return Err(Error::Format("adapter checkpoint holds unexpected tensors".into()));
        }
        Ok(Self {
            spec,
            dims: cfg.clone(),
            params,
        })
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn n_experts(&self) -> usize {
        self.spec.n_experts
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Format(format!("adapter tensor `{name}` missing")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Format(format!("adapter tensor `{name}` missing")))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> AdapterSet<U> {
        AdapterSet {
            spec: self.spec.clone(),
            dims: self.dims.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn is_adapted(&self, site: SiteKey) -> bool {
        self.spec.plan.sites.contains(&site)
    }

    /// Expert `i`'s (IA)³ vector at a site.
    pub fn ia3_expert(&self, site: SiteKey, i: usize) -> Result<IA3Vector<T>> {
        let bank = self.param(&ia3_name(site))?;
        if i >= self.n_experts() {
            return Err(Error::Index(format!("expert {i} of {}", self.n_experts())));
        }
        Ok(IA3Vector {
            l: Tensor::new(&[bank.shape()[1]], bank.row(i).to_vec())?,
        })
    }

    /// Expert `i`'s LoRA pair at a site.
    pub fn lora_expert(&self, site: SiteKey, i: usize) -> Result<LoraPair<T>> {
        let (a, b) = (self.param(&lora_a_name(site))?, self.param(&lora_b_name(site))?);
        let r = self.spec.plan.rank();
        if i >= self.n_experts() {
            return Err(Error::Index(format!("expert {i} of {}", self.n_experts())));
        }
        let (din, dout) = (a.shape()[0], b.shape()[1]);
        let cols = a.shape()[1];
        let mut ad = Vec::with_capacity(din * r);
        for row in 0..din {
            ad.extend_from_slice(&a.data()[row * cols + i * r..row * cols + (i + 1) * r]);
        }
        let bd = b.data()[i * r * dout..(i + 1) * r * dout].to_vec();
        Ok(LoraPair {
            a: Tensor::new(&[din, r], ad)?,
            b: Tensor::new(&[r, dout], bd)?,
        })
    }

    /// Writes expert `i`'s LoRA pair back into the stacked factors.
    pub fn set_lora_expert(&mut self, site: SiteKey, i: usize, pair: &LoraPair<T>) -> Result<()> {
        let r = self.spec.plan.rank();
        let a = self.param_mut(&lora_a_name(site))?;
        let (din, cols) = (a.shape()[0], a.shape()[1]);
        if pair.a.shape() != [din, r] {
            return Err(crate::error::dim_err!("A {:?} vs [{din}, {r}]", pair.a.shape()));
        }
        for row in 0..din {
            a.data_mut()[row * cols + i * r..row * cols + (i + 1) * r]
                .copy_from_slice(&pair.a.data()[row * r..(row + 1) * r]);
        }
        let b = self.param_mut(&lora_b_name(site))?;
        let dout = b.shape()[1];
        if pair.b.shape() != [r, dout] {
            return Err(crate::error::dim_err!("B {:?} vs [{r}, {dout}]", pair.b.shape()));
        }
        b.data_mut()[i * r * dout..(i + 1) * r * dout].copy_from_slice(pair.b.data());
        Ok(())
    }

    /// Puts every adapter tensor on the tape.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect()
    }

    /// Mixture weights applied at a site under constant routing.
    fn constant_weights<'m>(&self, site: SiteKey, mixing: &'m Mixing) -> Result<std::borrow::Cow<'m, [f64]>> {
        if !self.spec.routed() {
            return Ok(std::borrow::Cow::Owned(vec![1.0]));
        }
        Ok(std::borrow::Cow::Borrowed(mixing.weights(self.spec.routing.router_for(site))?))
    }

    /// Folds the adapters into a copy of the backbone under constant routing.
    ///
    /// LoRA adds `scale·Σᵢ s̄ᵢAᵢBᵢ` to the frozen matrix. (IA)³ scales the
    /// output columns of `W_K`/`W_V`, or the rows of `W₂` for the FFN site.
    pub fn fold_static(&self, backbone: &Backbone<T>, mixing: &Mixing) -> Result<Backbone<T>> {
        self.fold_with(backbone, mixing, false)
    }

    /// Inverse of [`fold_static`](Self::fold_static).
    pub fn unfold_static(&self, folded: &Backbone<T>, mixing: &Mixing) -> Result<Backbone<T>> {
        self.fold_with(folded, mixing, true)
    }

    fn fold_with(&self, backbone: &Backbone<T>, mixing: &Mixing, invert: bool) -> Result<Backbone<T>> {
        if !mixing.is_constant() {
            return Err(Error::Contract(
                "cannot fold adapters under token-dependent routing".into(),
            ));
        }
        mixing.validate(self.n_experts())?;
        let mut out = backbone.clone();
        for &site in &self.spec.plan.sites {
            let w = self.constant_weights(site, mixing)?;
            match self.spec.plan.kind {
                PeftKind::Ia3 => {
                    let bank = self.param(&ia3_name(site))?;
                    let width = bank.shape()[1];
                    let mass: f64 = w.iter().sum();
                    let mut l = vec![0.0f64; width];
                    for (e, &s) in w.iter().enumerate() {
                        for (lj, v) in l.iter_mut().zip(bank.row(e)) {
                            *lj += s * v.f64();
                        }
                    }
                    l.iter_mut().for_each(|v| *v /= mass);
                    if invert && l.iter().any(|&v| v == 0.0) {
                        return Err(Error::Numeric(format!("cannot unfold a zero rescaling at {site}")));
                    }
                    let (target, by_rows) = match site.site {
                        Site::Ff => (weight_name(site.block.site(Site::W2)), true),
                        _ => (weight_name(site), false),
                    };
                    let m = out.weight_mut(&target)?;
                    let cols = m.shape()[1];
                    for (idx, v) in m.data_mut().iter_mut().enumerate() {
                        let j = if by_rows { idx / cols } else { idx % cols };
                        let f = if invert { 1.0 / l[j] } else { l[j] };
                        *v = T::lit(v.f64() * f);
                    }
                }
                PeftKind::Lora => {
                    let mut delta: Option<Vec<f64>> = None;
                    for (e, &s) in w.iter().enumerate() {
                        if s == 0.0 {
                            continue;
                        }
                        let d = self.lora_expert(site, e)?.delta()?;
                        let acc = delta.get_or_insert_with(|| vec![0.0; d.numel()]);
                        for (a, v) in acc.iter_mut().zip(d.data()) {
                            *a += s * v.f64();
                        }
                    }
                    if let Some(delta) = delta {
                        let scale = self.spec.plan.lora_scale() * if invert { -1.0 } else { 1.0 };
                        let m = out.weight_mut(&weight_name(site))?;
                        for (v, d) in m.data_mut().iter_mut().zip(&delta) {
                            *v = T::lit(v.f64() + scale * d);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Router probabilities recorded during one pass.
#[derive(Debug, Clone)]
pub struct RouteRecord {
    pub router: RouterKey,
    pub side: Side,
    pub source: Source,
    /// `[tokens, n]`.
    pub probs: Var,
    pub rows: Vec<usize>,
    pub valid: Vec<bool>,
}

impl RouteRecord {
    /// Label used in metric keys.
    pub fn label(&self) -> String {
        match self.source {
            Source::Block => self.router.to_string(),
            Source::Memory => format!("{}.mem", self.router),
        }
    }
}

/// Per-pass adapter state: tape handles for parameters and cached routing.
pub struct Session<'a, T: Scalar> {
    set: &'a AdapterSet<T>,
    vars: BTreeMap<String, Var>,
    embeddings: Option<Var>,
    mixing: &'a Mixing,
    gates: BTreeMap<(RouterKey, Side, Source), Var>,
    records: Vec<RouteRecord>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(
        tape: &mut Tape<T>,
        set: &'a AdapterSet<T>,
        trainable: bool,
        embeddings: Option<&Tensor<T>>,
        mixing: &'a Mixing,
    ) -> Result<Self> {
        mixing.validate(set.n_experts())?;
        let embeddings = match embeddings {
            Some(e) => {
                let width = set.spec.routing.embed_width;
                if e.rank() != 2 || e.shape()[1] != width {
                    return Err(crate::error::dim_err!(
                        "sentence embeddings {:?} do not have width {width}",
                        e.shape()
                    ));
                }
                Some(tape.constant(e.clone()))
            }
            None => None,
        };
        Ok(Self {
            set,
            vars: set.register(tape, trainable),
            embeddings,
            mixing,
            gates: BTreeMap::new(),
            records: Vec::new(),
        })
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn records(&self) -> &[RouteRecord] {
        &self.records
    }

    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("adapter tensor `{name}` missing")))
    }

    fn gates_for(&mut self, tape: &mut Tape<T>, site: SiteKey, ctx: &RouteCtx) -> Result<Var> {
        let routing = &self.set.spec.routing;
        let rk = routing.router_for(site);
        let key = (rk, ctx.stream.side, ctx.source);
        if let Some(&g) = self.gates.get(&key) {
            return Ok(g);
        }
        let n = self.set.n_experts();
        let tokens = ctx.stream.rows.len();
        let g = if self.mixing.is_constant() {
            let w = self.mixing.weights(rk)?;
            let data: Vec<T> = (0..tokens).flat_map(|_| w.iter().map(|&v| T::lit(v))).collect();
            tape.constant(Tensor::new(&[tokens, n], data)?)
        } else {
            let w_g = self.var(&router_name(rk))?;
            let probs = match routing.input_mode {
                InputMode::Token => moe::route_probs(tape, w_g, ctx.reps)?,
                InputMode::Sentence => {
                    let emb = self.embeddings.ok_or_else(|| {
                        Error::Input("sentence routing needs per-row embeddings".into())
                    })?;
                    let per_row = moe::route_probs(tape, w_g, emb)?;
                    tape.gather(per_row, ctx.stream.rows)?
                }
            };
            self.records.push(RouteRecord {
                router: rk,
                side: ctx.stream.side,
                source: ctx.source,
                probs,
                rows: ctx.stream.rows.to_vec(),
                valid: ctx.stream.valid.to_vec(),
            });
            moe::gates(tape, probs, routing)?
        };
        self.gates.insert(key, g);
        Ok(g)
    }

    fn normalized(&self) -> bool {
        self.mixing.is_constant() || self.set.spec.routing.normalized()
    }

    /// Mean load-balancing loss over the routers used in this pass, on
    /// non-padding tokens.
    pub fn aux_loss(&self, tape: &mut Tape<T>) -> Result<Option<Var>> {
        if self.records.is_empty() || self.set.spec.routing.strategy.top_k().is_none() {
            return Ok(None);
        }
        let mut total: Option<Var> = None;
        for r in &self.records {
            let probs = if r.valid.iter().all(|&v| v) {
                r.probs
            } else {
                let ids: Vec<usize> = (0..r.valid.len()).filter(|&i| r.valid[i]).collect();
                tape.gather(r.probs, &ids)?
            };
            let lb = moe::load_balance_loss(tape, probs)?;
            total = Some(match total {
                None => lb,
                Some(t) => tape.add(t, lb)?,
            });
        }
        let count = self.records.len() as f64;
        Ok(total.map(|t| tape.scale(t, 1.0 / count)))
    }

    /// Mean per-token routing entropy of each router used in this pass.
    pub fn entropies(&self, tape: &Tape<T>) -> Vec<(String, f64)> {
        self.records
            .iter()
            .map(|r| {
                let p = tape.value(r.probs);
                let n = p.shape()[1];
                let (mut sum, mut count) = (0.0, 0usize);
                for (t, &v) in r.valid.iter().enumerate() {
                    if v {
                        sum += moe::entropy(p.data()[t * n..(t + 1) * n].iter().map(|x| x.f64()));
                        count += 1;
                    }
                }
                (r.label(), sum / count.max(1) as f64)
            })
            .collect()
    }
}

impl<T: Scalar> Hooks<T> for Session<'_, T> {
    fn linear(&mut self, tape: &mut Tape<T>, site: SiteKey, x: Var, w: Var, ctx: &RouteCtx) -> Result<Var> {
        if self.set.spec.plan.kind != PeftKind::Lora || !self.set.is_adapted(site) {
            return tape.matmul(x, w);
        }
        let (a, b) = (self.var(&lora_a_name(site))?, self.var(&lora_b_name(site))?);
        let scale = self.set.spec.plan.lora_scale();
        if !self.set.spec.routed() {
            return apply_lora(tape, x, w, a, b, scale);
        }
        let g = self.gates_for(tape, site, ctx)?;
        moe::molora_forward(tape, x, w, a, b, g, self.set.spec.plan.rank(), scale)
    }

    fn rescale(&mut self, tape: &mut Tape<T>, site: SiteKey, act: Var, ctx: &RouteCtx) -> Result<Var> {
        if self.set.spec.plan.kind != PeftKind::Ia3 || !self.set.is_adapted(site) {
            return Ok(act);
        }
        let bank = self.var(&ia3_name(site))?;
        if !self.set.spec.routed() {
            let width = tape.shape(bank)[1];
            let l = tape.reshape(bank, &[width])?;
            return apply_ia3(tape, act, l);
        }
        let g = self.gates_for(tape, site, ctx)?;
        let normalized = self.normalized();
        moe::mov_forward(tape, act, bank, g, normalized)
    }
}

static LIVE: Mixing = Mixing::Live;

/// How a pass treats the adapters.
#[derive(Debug, Clone, Copy)]
pub struct PassOptions<'a, T: Scalar> {
    /// Adapter tensors become gradient-bearing leaves.
    pub train_adapters: bool,
    /// Backbone tensors become gradient-bearing leaves (warm-up only).
    pub train_backbone: bool,
    /// `[rows, embed_width]` for sentence routing.
    pub embeddings: Option<&'a Tensor<T>>,
    pub mixing: &'a Mixing,
}

impl<T: Scalar> Default for PassOptions<'_, T> {
    fn default() -> Self {
        Self {
            train_adapters: false,
            train_backbone: false,
            embeddings: None,
            mixing: &LIVE,
        }
    }
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Pass {
    pub out: ForwardOut,
    pub weights: WeightVars,
    pub adapter_vars: BTreeMap<String, Var>,
    pub routes: Vec<RouteRecord>,
    pub entropies: Vec<(String, f64)>,
    /// Load-balancing loss, present for top-k routing.
    pub aux: Option<Var>,
}

/// Task loss, auxiliary loss and their weighted sum.
#[derive(Debug, Clone)]
pub struct Loss {
    pub pass: Pass,
    pub task: Var,
    pub total: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub backbone: Backbone<T>,
    pub adapters: Option<AdapterSet<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(backbone: Backbone<T>, adapters: Option<AdapterSet<T>>) -> Self {
        Self { backbone, adapters }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            backbone: self.backbone.cast(),
            adapters: self.adapters.as_ref().map(AdapterSet::cast),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, batch: &SeqBatch, opts: PassOptions<T>) -> Result<Pass> {
        let weights = self.backbone.register(tape, opts.train_backbone);
        match &self.adapters {
            None => {
                let out = self.backbone.forward(tape, &weights, batch, &mut crate::backbone::NoHooks)?;
                Ok(Pass {
                    out,
                    weights,
                    adapter_vars: BTreeMap::new(),
                    routes: Vec::new(),
                    entropies: Vec::new(),
                    aux: None,
                })
            }
            Some(set) => {
                let mut session = Session::new(tape, set, opts.train_adapters, opts.embeddings, opts.mixing)?;
                let out = self.backbone.forward(tape, &weights, batch, &mut session)?;
                let aux = session.aux_loss(tape)?;
                let entropies = session.entropies(tape);
                Ok(Pass {
                    out,
                    weights,
                    adapter_vars: session.vars,
                    routes: session.records,
                    entropies,
                    aux,
                })
            }
        }
    }

    /// `task + α·aux`; with `α = 0` or no aux the total is the task loss node.
    pub fn loss(&self, tape: &mut Tape<T>, batch: &SeqBatch, opts: PassOptions<T>) -> Result<Loss> {
        let pass = self.forward(tape, batch, opts)?;
        let targets = batch.target.ids.clone();
        let task = tape.cross_entropy(pass.out.logits, &targets, &batch.target_mask::<T>())?;
        let alpha = self.adapters.as_ref().map_or(0.0, |a| a.spec().routing.alpha());
        let total = match pass.aux {
            Some(aux) if alpha != 0.0 => {
                let weighted = tape.scale(aux, alpha);
                tape.add(task, weighted)?
            }
            _ => task,
        };
        Ok(Loss { pass, task, total })
    }

    /// Logits `[rows, target_len, vocab]` without gradient tracking.
    pub fn logits(&self, batch: &SeqBatch, embeddings: Option<&Tensor<T>>, mixing: &Mixing) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let opts = PassOptions {
            embeddings,
            mixing,
            ..PassOptions::default()
        };
        let pass = self.forward(&mut tape, batch, opts)?;
        Ok(tape.value(pass.out.logits).clone())
    }

    /// Index of the option with the highest mean per-token log-likelihood;
    /// ties go to the lowest index.
    pub fn score_options(
        &self,
        input: &[usize],
        options: &[Vec<usize>],
        embedding: Option<&Tensor<T>>,
    ) -> Result<usize> {
        let scores = self.option_scores(input, options, embedding)?;
        Ok(argmax_first(&scores))
    }

    /// Length-normalized log-likelihood of each option.
    pub fn option_scores(
        &self,
        input: &[usize],
        options: &[Vec<usize>],
        embedding: Option<&Tensor<T>>,
    ) -> Result<Vec<f64>> {
        if options.len() < 2 {
            return Err(Error::Input(format!("need at least 2 options, got {}", options.len())));
        }
        if options.iter().any(Vec::is_empty) {
            return Err(Error::Input("empty answer option".into()));
        }
        let inputs = vec![input.to_vec(); options.len()];
        let batch = SeqBatch::new(&inputs, options)?;
        let emb = match embedding {
            Some(e) => {
                let data: Vec<T> = (0..options.len()).flat_map(|_| e.data().iter().copied()).collect();
                Some(Tensor::new(&[options.len(), e.numel()], data)?)
            }
            None => None,
        };
        let logits = self.logits(&batch, emb.as_ref(), &Mixing::Live)?;
        let sums = target_log_probs(&logits, &batch);
        Ok(sums
            .iter()
            .enumerate()
            .map(|(i, s)| s / options[i].len() as f64)
            .collect())
    }
}

/// First index of the maximum.
pub fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
