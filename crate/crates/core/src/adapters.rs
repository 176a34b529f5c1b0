//! (IA)³ rescaling vectors and LoRA low-rank pairs.

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{dim_err, Error, Result};
use crate::site::{Block, Site, SiteKey};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeftKind {
    Ia3,
    Lora,
}

/// Which sites get adapted, and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeftPlan {
    pub kind: PeftKind,
    /// LoRA rank.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    /// LoRA delta is scaled by `alpha / rank` when set, unscaled otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_alpha: Option<f64>,
    pub sites: Vec<SiteKey>,
}

pub const DEFAULT_LORA_RANK: usize = 4;
pub const IA3_SITES: [Site; 3] = [Site::K, Site::V, Site::Ff];
pub const DEFAULT_LORA_SITES: [Site; 6] = Site::LINEAR;

impl PeftPlan {
    /// Keys and values of every attention block plus every FFN intermediate.
    pub fn ia3(cfg: &BackboneConfig) -> Self {
        Self::with_sites(PeftKind::Ia3, None, &IA3_SITES, cfg)
    }

    /// LoRA at the given kinds of linear site in every block.
    pub fn lora(cfg: &BackboneConfig, rank: usize, sites: &[Site]) -> Self {
        Self::with_sites(PeftKind::Lora, Some(rank), sites, cfg)
    }

    /// Every site of the listed kinds that exists in the backbone.
    pub fn with_sites(kind: PeftKind, rank: Option<usize>, kinds: &[Site], cfg: &BackboneConfig) -> Self {
        let mut sites = Vec::new();
        for b in cfg.blocks() {
            for &s in kinds {
                let fits = match b.block {
                    Block::Ffn => matches!(s, Site::W1 | Site::W2 | Site::Ff),
                    _ => matches!(s, Site::Q | Site::K | Site::V | Site::O),
                };
                if fits {
                    sites.push(b.site(s));
                }
            }
        }
        Self {
            kind,
            rank,
            lora_alpha: None,
            sites,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank.unwrap_or(DEFAULT_LORA_RANK)
    }

    /// Multiplier on the LoRA delta.
    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha.map_or(1.0, |a| a / self.rank() as f64)
    }

    pub fn validate(&self, cfg: &BackboneConfig) -> Result<()> {
        if self.sites.is_empty() {
            return Err(Error::Config("peft plan adapts no sites".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.sites {
            if !seen.insert(*s) {
                return Err(Error::Config(format!("site {s} listed twice")));
            }
            if s.block.layer >= cfg.layers {
                return Err(Error::Config(format!("site {s} is past layer {}", cfg.layers - 1)));
            }
            if s.block.side == crate::site::Side::Enc && s.block.block == Block::Cross {
                return Err(Error::Config(format!("encoder has no cross-attention ({s})")));
            }
            let in_block = match s.block.block {
                Block::Ffn => matches!(s.site, Site::W1 | Site::W2 | Site::Ff),
                _ => matches!(s.site, Site::Q | Site::K | Site::V | Site::O),
            };
            if !in_block {
                return Err(Error::Config(format!("site {s} does not exist")));
            }
            match self.kind {
                PeftKind::Ia3 if !IA3_SITES.contains(&s.site) => {
                    return Err(Error::Config(format!("(IA)³ adapts only k, v and ff, not {s}")))
                }
                PeftKind::Lora if !s.site.is_linear() => {
                    return Err(Error::Config(format!("LoRA needs a linear site, not {s}")))
                }
                _ => {}
            }
        }
        if self.kind == PeftKind::Lora {
            let r = self.rank();
            if r == 0 {
                return Err(Error::Config("LoRA rank must be positive".into()));
            }
            for s in &self.sites {
                let (i, o) = cfg.linear_dims(s.site).unwrap();
                if r > i.min(o) {
                    return Err(Error::Config(format!(
                        "LoRA rank {r} exceeds min({i}, {o}) at {s}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Trainable scalars per expert, summed over sites.
    pub fn params_per_expert(&self, cfg: &BackboneConfig) -> usize {
        self.sites
            .iter()
            .map(|s| match self.kind {
                PeftKind::Ia3 => cfg.rescale_width(s.site).unwrap_or(0),
                PeftKind::Lora => {
                    let (i, o) = cfg.linear_dims(s.site).unwrap_or((0, 0));
                    self.rank() * (i + o)
                }
            })
            .sum()
    }
}

/// One (IA)³ expert at one site.
#[derive(Debug, Clone, PartialEq)]
pub struct IA3Vector<T: Scalar = f32> {
    pub l: Tensor<T>,
}

/// One LoRA expert: `x ↦ x·A·B` with `A: [d_in, r]`, `B: [r, d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T: Scalar = f32> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> LoraPair<T> {
    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    /// Dense `A·B`, shaped like the frozen matrix.
    pub fn delta(&self) -> Result<Tensor<T>> {
        self.a.matmul(&self.b)
    }
}

/// `act ⊙ l` for a shared vector `l`.
pub fn apply_ia3<T: Scalar>(tape: &mut Tape<T>, act: Var, l: Var) -> Result<Var> {
    let width = *tape.shape(act).last().unwrap();
    if tape.shape(l) != [width] {
        return Err(dim_err!(
            "(IA)³ vector {:?} against activation width {width}",
            tape.shape(l)
        ));
    }
    tape.mul(act, l)
}

/// `x·W₀ + scale·(x·A)·B`.
pub fn apply_lora<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w0: Var,
    a: Var,
    b: Var,
    scale: f64,
) -> Result<Var> {
    let (wi, wo) = (tape.shape(w0)[0], tape.shape(w0)[1]);
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[0] != wi || sb[1] != wo || sa[1] != sb[0] {
        return Err(dim_err!("LoRA pair {sa:?}, {sb:?} does not fit W₀ [{wi}, {wo}]"));
    }
    if sa[1] > wi.min(wo) {
        return Err(Error::Config(format!(
            "LoRA rank {} exceeds min({wi}, {wo})",
            sa[1]
        )));
    }
    let base = tape.matmul(x, w0)?;
    let u = tape.matmul(x, a)?;
    let mut delta = tape.matmul(u, b)?;
    if scale != 1.0 {
        delta = tape.scale(delta, scale);
    }
    tape.add(base, delta)
}
