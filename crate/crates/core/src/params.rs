//! Parameter budgets for adapter plans on arbitrary encoder-decoder shapes.
//!
//! Published architectures are loaded from the bundled `data/*.toml` files.
//! Their feed-forward blocks are gated (two input matrices) and their output
//! head is untied; the toy backbone has neither.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adapters::{PeftKind, PeftPlan};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::moe::{InputMode, RoutingConfig};
use crate::site::{Block, BlockKey, Side, Site, SiteKey};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub name: String,
    pub d_model: usize,
    pub d_ff: usize,
    /// Per-head key width.
    pub d_k: usize,
    pub d_v: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub num_decoder_layers: usize,
    pub vocab_size: usize,
    /// Entries per head of each stack's position-bias table.
    pub relative_attention_num_buckets: usize,
    pub gated_ffn: bool,
    pub tied_lm_head: bool,
}

const PRESETS: [(&str, &str); 3] = [
    ("large", include_str!("../data/t5-v1_1-large.toml")),
    ("xl", include_str!("../data/t5-v1_1-xl.toml")),
    ("xxl", include_str!("../data/t5-v1_1-xxl.toml")),
];

impl ArchSpec {
    pub fn preset_names() -> Vec<&'static str> {
        PRESETS.iter().map(|(n, _)| *n).collect()
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            Error::Config(format!(
                "unknown architecture `{name}`; known: toy, {}",
                Self::preset_names().join(", ")
            ))
        })?;
        Self::from_toml(text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let arch: Self = toml::from_str(text).map_err(|e| Error::Config(format!("architecture: {e}")))?;
        arch.validate()?;
        Ok(arch)
    }

    /// The shape of a toy backbone, counted exactly as it is built.
    pub fn from_backbone(cfg: &BackboneConfig) -> Self {
        Self {
            name: "toy".into(),
            d_model: cfg.d_model,
            d_ff: cfg.d_ff,
            d_k: cfg.d_k,
            d_v: cfg.d_v,
            num_heads: cfg.n_heads,
            num_layers: cfg.layers,
            num_decoder_layers: cfg.layers,
            vocab_size: cfg.vocab,
            relative_attention_num_buckets: 2 * cfg.rel_pos_max + 1,
            gated_ffn: false,
            tied_lm_head: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("num_decoder_layers", self.num_decoder_layers),
            ("vocab_size", self.vocab_size),
        ];
        match dims.iter().find(|(_, v)| *v == 0) {
            Some((k, _)) => Err(Error::Config(format!("arch.{k} must be positive"))),
            None => Ok(()),
        }
    }

    fn layers(&self, side: Side) -> usize {
        match side {
            Side::Enc => self.num_layers,
            Side::Dec => self.num_decoder_layers,
        }
    }

    /// `(in, out)` widths of one linear site, and how many such matrices the
    /// block holds (two input matrices in a gated feed-forward).
    fn linear(&self, site: Site) -> Option<((usize, usize), usize)> {
        let (d, k, v) = (self.d_model, self.d_k * self.num_heads, self.d_v * self.num_heads);
        let gate = if self.gated_ffn { 2 } else { 1 };
        Some(match site {
            Site::Q | Site::K => ((d, k), 1),
            Site::V => ((d, v), 1),
            Site::O => ((v, d), 1),
            Site::W1 => ((d, self.d_ff), gate),
            Site::W2 => ((self.d_ff, d), 1),
            Site::Ff => return None,
        })
    }

    fn rescale_width(&self, site: Site) -> Option<usize> {
        match site {
            Site::K => Some(self.d_k * self.num_heads),
            Site::V => Some(self.d_v * self.num_heads),
            Site::Ff => Some(self.d_ff),
            _ => None,
        }
    }

    /// Every backbone parameter, embeddings and norms included.
    pub fn total_params(&self) -> usize {
        let d = self.d_model;
        let attn: usize = [Site::Q, Site::K, Site::V, Site::O]
            .iter()
            .map(|&s| self.linear(s).map_or(0, |((i, o), c)| i * o * c))
            .sum();
        let ffn: usize = [Site::W1, Site::W2]
            .iter()
            .map(|&s| self.linear(s).map_or(0, |((i, o), c)| i * o * c))
            .sum();
        let bias = self.relative_attention_num_buckets * self.num_heads;
        let enc = self.num_layers * (attn + ffn + 2 * d) + d + bias;
        let dec = self.num_decoder_layers * (2 * attn + ffn + 3 * d) + d + bias;
        let head = if self.tied_lm_head { 0 } else { self.vocab_size * d };
        self.vocab_size * d + head + enc + dec
    }

    fn blocks(&self) -> impl Iterator<Item = BlockKey> + '_ {
        [Side::Enc, Side::Dec].into_iter().flat_map(move |side| {
            (0..self.layers(side))
                .flat_map(move |layer| Block::for_side(side).iter().map(move |&b| BlockKey::new(side, layer, b)))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamBudget {
    pub adapter_params: usize,
    pub router_params: usize,
    pub backbone_params: usize,
    /// `(adapter + router) / backbone · 100`.
    pub percent_updated: f64,
}

/// Trainable parameters of `plan`'s site kinds applied at every layer of
/// `arch` with `n_experts` experts.
pub fn count_params(plan: &PeftPlan, arch: &ArchSpec, n_experts: usize, routing: &RoutingConfig) -> Result<ParamBudget> {
    arch.validate()?;
    if n_experts == 0 {
        return Err(Error::Config("n_experts must be at least 1".into()));
    }
    let kinds: BTreeSet<Site> = plan.sites.iter().map(|s| s.site).collect();
    let mut per_expert = 0;
    let mut routers = BTreeSet::new();
    for block in arch.blocks() {
        for &site in kinds.iter().filter(|s| s.block_kind() == block.block.kind()) {
            per_expert += match plan.kind {
                PeftKind::Ia3 => arch.rescale_width(site).unwrap_or(0),
                PeftKind::Lora => arch
                    .linear(site)
                    .map_or(0, |((i, o), c)| c * plan.rank() * (i + o)),
            };
            routers.insert(routing.router_for(SiteKey { block, site }));
        }
    }
    let width = match routing.input_mode {
        InputMode::Token => arch.d_model,
        InputMode::Sentence => routing.embed_width,
    };
    let router_params = if n_experts > 1 { routers.len() * width * n_experts } else { 0 };
    let adapter_params = per_expert * n_experts;
    let backbone_params = arch.total_params();
    Ok(ParamBudget {
        adapter_params,
        router_params,
        backbone_params,
        percent_updated: (adapter_params + router_params) as f64 / backbone_params as f64 * 100.0,
    })
}

/// A named adapter configuration: `ia3`, `lora`, `mov-<n>` or `molora-<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanPreset {
    pub kind: PeftKind,
    pub n_experts: usize,
}

impl std::str::FromStr for PlanPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, n) = match s.split_once('-') {
            None => (s, "1"),
            Some((k, n)) => (k, n),
        };
        let n: usize = n
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("bad expert count in plan `{s}`")))?;
        let kind = match kind {
            "ia3" | "mov" => PeftKind::Ia3,
            "lora" | "molora" => PeftKind::Lora,
            _ => return Err(Error::Config(format!("unknown plan `{s}`; expected ia3, lora, mov-<n> or molora-<n>"))),
        };
        Ok(Self { kind, n_experts: n })
    }
}

impl PlanPreset {
    /// The plan over a toy layout; only its site kinds matter for counting.
    pub fn plan(&self, rank: usize) -> PeftPlan {
        let layout = BackboneConfig::default();
        match self.kind {
            PeftKind::Ia3 => PeftPlan::ia3(&layout),
            PeftKind::Lora => PeftPlan::lora(&layout, rank, &crate::adapters::DEFAULT_LORA_SITES),
        }
    }
}
