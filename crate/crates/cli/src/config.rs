//! The JSON run description shared by `train` and `sweep`.

use std::fs;
use std::path::{Path, PathBuf};

use moe_peft::adapters::{PeftKind, PeftPlan, DEFAULT_LORA_SITES, IA3_SITES};
use moe_peft::backbone::BackboneConfig;
use moe_peft::model::AdapterSpec;
use moe_peft::moe::RoutingConfig;
use moe_peft::site::Site;
use moe_peft::taskgen::{make_separation_suite, make_task_suite, TaskSuite, Vocab};
use moe_peft::train::TrainHyper;
use moe_peft::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Instances drawn per template when checking that a suite fits the backbone.
const LENGTH_PROBE_SAMPLES: u64 = 256;

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub plan: PlanConfig,
    pub n_experts: usize,
    #[serde(default)]
    pub routing: RoutingConfig,
    #[serde(default)]
    pub train: TrainHyper,
    pub suite: SuiteConfig,
    /// Output root; the run directory is created beneath it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Adapter kind and the site kinds it is applied to at every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub kind: PeftKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_alpha: Option<f64>,
    /// Defaults to k, v, ff for (IA)³ and every linear map for LoRA.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sites: Option<Vec<Site>>,
}

impl PlanConfig {
    pub fn build(&self, cfg: &BackboneConfig) -> PeftPlan {
        let kinds: &[Site] = match (&self.sites, self.kind) {
            (Some(s), _) => s,
            (None, PeftKind::Ia3) => &IA3_SITES,
            (None, PeftKind::Lora) => &DEFAULT_LORA_SITES,
        };
        let mut plan = PeftPlan::with_sites(self.kind, self.rank, kinds, cfg);
        plan.lora_alpha = self.lora_alpha;
        plan
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteName {
    Toy,
    Separation,
}

impl std::str::FromStr for SuiteName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(SuiteName::Toy),
            "separation" => Ok(SuiteName::Separation),
            _ => Err(Error::Config(format!("unknown suite `{s}` (toy|separation)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub name: SuiteName,
    /// Seed of the toy suite's templates; the separation suite is fixed.
    #[serde(default)]
    pub seed: u64,
}

impl SuiteConfig {
    pub fn build(&self) -> TaskSuite {
        match self.name {
            SuiteName::Toy => make_task_suite(self.seed),
            SuiteName::Separation => make_separation_suite(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_kind(&e))))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn adapter_spec(&self) -> AdapterSpec {
        AdapterSpec {
            plan: self.plan.build(&self.backbone),
            n_experts: self.n_experts,
            routing: self.routing.clone(),
        }
    }

    /// Checks every part, and that the suite fits the backbone.
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.adapter_spec().validate(&self.backbone)?;
        self.train.validate()?;
        check_suite_fits(&self.backbone, &self.suite.build())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }
}

/// Vocabulary and length compatibility of a backbone with a suite.
pub fn check_suite_fits(cfg: &BackboneConfig, suite: &TaskSuite) -> Result<()> {
    if cfg.vocab != Vocab::size() {
        return Err(Error::Config(format!(
            "vocab mismatch: backbone has {} entries, suite `{}` needs {}",
            cfg.vocab,
            suite.name,
            Vocab::size()
        )));
    }
    let (inp, out) = suite.max_lengths(LENGTH_PROBE_SAMPLES);
    if inp > cfg.max_in || out > cfg.max_out {
        return Err(Error::Config(format!(
            "suite `{}` needs max_in ≥ {inp} and max_out ≥ {out}, backbone has {} and {}",
            suite.name, cfg.max_in, cfg.max_out
        )));
    }
    Ok(())
}

fn strip_kind(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
