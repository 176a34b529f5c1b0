//! Routers, soft merging, top-k gating and the MoV / MoLORA layers.
//!
//! A router maps a `[tokens, d_in]` representation to `[tokens, n]` expert
//! probabilities with a bias-free `W_g: [d_in, n]` followed by softmax.
//! Experts are merged in parameter space before they are applied.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::site::{RouterKey, SiteKey};
use crate::tape::{topk_indices, Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Soft,
    Top1,
    Top2,
}

impl Strategy {
    pub fn top_k(self) -> Option<usize> {
        match self {
            Strategy::Soft => None,
            Strategy::Top1 => Some(1),
            Strategy::Top2 => Some(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// Each token routes on its own hidden state.
    #[default]
    Token,
    /// Every token of a sequence routes on one embedding of the whole input.
    Sentence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RouterScope {
    /// One router per block, shared by the sites it adapts.
    #[default]
    Block,
    /// One router per adapted site.
    Site,
}

pub const DEFAULT_LOAD_BALANCE_ALPHA: f64 = 0.01;
pub const DEFAULT_EMBED_WIDTH: usize = 768;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    pub strategy: Strategy,
    /// Weight of the load-balancing loss; only meaningful for top-k.
    pub load_balance_alpha: Option<f64>,
    pub renormalize_topk: bool,
    pub input_mode: InputMode,
    /// Router input width in sentence mode.
    pub embed_width: usize,
    pub scope: RouterScope,
    /// Std of the normal used to initialize `W_g`.
    pub router_init_std: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Soft,
            load_balance_alpha: None,
            renormalize_topk: true,
            input_mode: InputMode::Token,
            embed_width: DEFAULT_EMBED_WIDTH,
            scope: RouterScope::Block,
            router_init_std: 0.05,
        }
    }
}

impl RoutingConfig {
    pub fn alpha(&self) -> f64 {
        match self.strategy {
            Strategy::Soft => 0.0,
            _ => self.load_balance_alpha.unwrap_or(DEFAULT_LOAD_BALANCE_ALPHA),
        }
    }

    /// True when merged experts come from probabilities that sum to one.
    pub fn normalized(&self) -> bool {
        self.strategy == Strategy::Soft || self.renormalize_topk
    }

    pub fn validate(&self, n_experts: usize) -> Result<()> {
        if n_experts == 0 {
            return Err(Error::Config("n_experts must be at least 1".into()));
        }
        match (self.strategy, self.load_balance_alpha) {
            (Strategy::Soft, Some(a)) if a != 0.0 => {
                return Err(Error::Config(
                    "routing.load_balance_alpha must be 0 under soft routing".into(),
                ))
            }
            (_, Some(a)) if !(a >= 0.0) => {
                return Err(Error::Config("routing.load_balance_alpha must be ≥ 0".into()))
            }
            _ => {}
        }
        if let Some(k) = self.strategy.top_k() {
            if k > n_experts {
                return Err(Error::Config(format!(
                    "top-{k} routing needs at least {k} experts, got {n_experts}"
                )));
            }
        }
        if self.embed_width == 0 {
            return Err(Error::Config("routing.embed_width must be positive".into()));
        }
        if !(self.router_init_std >= 0.0) {
            return Err(Error::Config("routing.router_init_std must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Router owning a site under this scope.
    pub fn router_for(&self, site: SiteKey) -> RouterKey {
        match self.scope {
            RouterScope::Block => RouterKey {
                block: site.block,
                site: None,
            },
            RouterScope::Site => RouterKey {
                block: site.block,
                site: Some(site.site),
            },
        }
    }
}

/// `softmax(x·W_g)` over experts.
pub fn route_probs<T: Scalar>(tape: &mut Tape<T>, w_g: Var, x: Var) -> Result<Var> {
    let (sx, sw) = (tape.shape(x), tape.shape(w_g));
    if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
        return Err(dim_err!("router input {sx:?} does not match W_g {sw:?}"));
    }
    let logits = tape.matmul(x, w_g)?;
    tape.softmax(logits, 1)
}

/// Gate values per token: the probabilities themselves, or their top-k.
pub fn gates<T: Scalar>(tape: &mut Tape<T>, probs: Var, cfg: &RoutingConfig) -> Result<Var> {
    match cfg.strategy.top_k() {
        None => Ok(probs),
        Some(k) => tape.topk_gate(probs, k, cfg.renormalize_topk),
    }
}

/// Zeroes all but the `k` largest entries of each row of `probs`.
pub fn topk_route<T: Scalar>(probs: &Tensor<T>, k: usize, renormalize: bool) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let g = tape.topk_gate(p, k, renormalize)?;
    Ok(tape.value(g).clone())
}

/// Per-token merged (IA)³ vectors `[tokens, width]` from gates `[tokens, n]`
/// and a bank `[n, width]`.
///
/// When the gates are normalized the merge divides by each row's mass, which
/// leaves identical experts unchanged bit for bit.
pub fn merge_vectors<T: Scalar>(tape: &mut Tape<T>, gates: Var, bank: Var, normalized: bool) -> Result<Var> {
    if normalized {
        tape.soft_merge(gates, bank)
    } else {
        let (sg, sb) = (tape.shape(gates), tape.shape(bank));
        if sg.len() != 2 || sb.len() != 2 || sg[1] != sb[0] {
            return Err(dim_err!("gates {sg:?} vs bank {sb:?}"));
        }
        tape.matmul(gates, bank)
    }
}

/// MoV layer: `x ⊙ Σᵢ gᵢ·lᵢ` per token.
pub fn mov_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, bank: Var, gates: Var, normalized: bool) -> Result<Var> {
    let width = *tape.shape(x).last().unwrap();
    if tape.shape(bank).get(1) != Some(&width) {
        return Err(dim_err!(
            "MoV bank {:?} against activation width {width}",
            tape.shape(bank)
        ));
    }
    let merged = merge_vectors(tape, gates, bank, normalized)?;
    tape.mul(x, merged)
}

/// MoLORA layer: `x·W₀ + scale·Σᵢ gᵢ·(x·Aᵢ)·Bᵢ`.
///
/// `a` stacks the experts' `A` factors column-wise (`[d_in, n·r]`) and `b`
/// stacks the `B` factors row-wise (`[n·r, d_out]`), so one product per side
/// applies all experts and the gate scales each expert's rank-`r` slice.
pub fn molora_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w0: Var,
    a: Var,
    b: Var,
    gates: Var,
    rank: usize,
    scale: f64,
) -> Result<Var> {
    let tokens = tape.shape(x)[0];
    let n = tape.shape(gates)[1];
    if rank == 0 || tape.shape(a)[1] != n * rank || tape.shape(b)[0] != n * rank {
        return Err(Error::Config(format!(
            "MoLORA factors {:?}, {:?} are not {n} experts of rank {rank}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    let base = tape.matmul(x, w0)?;
    let u = tape.matmul(x, a)?;
    let u = tape.reshape(u, &[tokens, n, rank])?;
    let u = tape.permute(u, &[2, 0, 1])?;
    let u = tape.mul(u, gates)?;
    let u = tape.permute(u, &[1, 2, 0])?;
    let u = tape.reshape(u, &[tokens, n * rank])?;
    let mut delta = tape.matmul(u, b)?;
    if scale != 1.0 {
        delta = tape.scale(delta, scale);
    }
    tape.add(base, delta)
}

/// Convex combination `Σᵢ pᵢ·Eᵢ` of same-shaped expert tensors.
pub fn soft_merge<T: Scalar>(probs: &[f64], experts: &[Tensor<T>]) -> Result<Tensor<T>> {
    if probs.len() != experts.len() || experts.is_empty() {
        return Err(dim_err!("{} probabilities for {} experts", probs.len(), experts.len()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-4 || probs.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::Contract(format!(
            "mixing weights must be a distribution, got sum {total}"
        )));
    }
    let shape = experts[0].shape();
    if let Some(e) = experts.iter().find(|e| e.shape() != shape) {
        return Err(dim_err!("expert shapes differ: {shape:?} vs {:?}", e.shape()));
    }
    let mut out = vec![0.0f64; experts[0].numel()];
    for (p, e) in probs.iter().zip(experts) {
        for (o, v) in out.iter_mut().zip(e.data()) {
            *o += p * v.f64();
        }
    }
    Tensor::from_f64(shape, &out)
}

/// `n·Σᵢ fᵢ·Pᵢ` where `fᵢ` is the share of tokens assigned to expert `i` and
/// `Pᵢ` the mean router probability of expert `i`.
pub fn load_balance<T: Scalar>(probs: &Tensor<T>, assignments: &[usize]) -> Result<f64> {
    if probs.rank() != 2 || probs.shape()[0] != assignments.len() {
        return Err(dim_err!(
            "probs {:?} for {} assignments",
            probs.shape(),
            assignments.len()
        ));
    }
    let (tokens, n) = (probs.shape()[0], probs.shape()[1]);
    let mut f = vec![0.0; n];
    for &a in assignments {
        if a >= n {
            return Err(Error::Index(format!("assignment {a} outside {n} experts")));
        }
        f[a] += 1.0 / tokens as f64;
    }
    let mut p = vec![0.0; n];
    for t in 0..tokens {
        for (pi, v) in p.iter_mut().zip(probs.row(t)) {
            *pi += v.f64() / tokens as f64;
        }
    }
    Ok(n as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>())
}

/// Top-1 expert of every row.
pub fn top1<T: Scalar>(probs: &Tensor<T>) -> Vec<usize> {
    (0..probs.shape()[0])
        .map(|t| topk_indices(probs.row(t), 1)[0])
        .collect()
}

/// Taped load-balancing loss over `[tokens, n]` probabilities; the
/// dispatch fractions are constants.
pub fn load_balance_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var) -> Result<Var> {
    let n = tape.shape(probs)[1];
    let p = tape.value(probs);
    let assign = top1(p);
    let tokens = assign.len() as f64;
    let mut f = vec![0.0; n];
    for a in assign {
        f[a] += 1.0 / tokens;
    }
    let f = tape.constant(Tensor::from_f64(&[n], &f)?);
    let mean = tape.mean_rows(probs)?;
    let fp = tape.mul(mean, f)?;
    let s = tape.sum(fp);
    Ok(tape.scale(s, n as f64))
}

/// Mean per-token entropy (nats) of `[tokens, n]` probabilities.
pub fn mean_entropy<T: Scalar>(probs: &Tensor<T>) -> f64 {
    let rows = probs.shape()[0];
    (0..rows).map(|t| entropy(probs.row(t).iter().map(|v| v.f64()))).sum::<f64>() / rows as f64
}

pub fn entropy(p: impl IntoIterator<Item = f64>) -> f64 {
    p.into_iter().filter(|&v| v > 0.0).map(|v| -v * v.ln()).sum()
}

/// Jensen-Shannon divergence in nats.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let kl = |a: &[f64]| -> f64 {
        a.iter()
            .zip(&m)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &mm)| x * (x / mm).ln())
            .sum()
    };
    (0.5 * kl(p) + 0.5 * kl(q)).max(0.0)
}

/// Expert mixture used at inference.
#[derive(Debug, Clone, PartialEq)]
pub enum Mixing {
    /// Token-dependent routing by the trained routers.
    Live,
    /// One constant mixture for every router.
    Shared(Vec<f64>),
    /// A constant mixture per router.
    PerRouter(BTreeMap<RouterKey, Vec<f64>>),
}

impl Mixing {
    pub fn uniform(n: usize) -> Self {
        Mixing::Shared(vec![1.0 / n as f64; n])
    }

    pub fn is_constant(&self) -> bool {
        !matches!(self, Mixing::Live)
    }

    /// Constant weights for one router.
    pub fn weights(&self, key: RouterKey) -> Result<&[f64]> {
        match self {
            Mixing::Live => Err(Error::Contract(
                "routing is token-dependent; no constant mixture exists".into(),
            )),
            Mixing::Shared(w) => Ok(w),
            Mixing::PerRouter(m) => m
                .get(&key)
                .map(Vec::as_slice)
                .ok_or_else(|| Error::Contract(format!("no mixing weights for router {key}"))),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let check = |w: &[f64]| -> Result<()> {
            if w.len() != n {
                return Err(Error::Contract(format!("{} mixing weights for {n} experts", w.len())));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-4 || w.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Contract(format!(
                    "mixing weights must be nonnegative and sum to 1, got sum {total}"
                )));
            }
            Ok(())
        };
        match self {
            Mixing::Live => Ok(()),
            Mixing::Shared(w) => check(w),
            Mixing::PerRouter(m) => m.values().try_for_each(|w| check(w)),
        }
    }
}
