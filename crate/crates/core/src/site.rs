//! Addresses of the places adapters attach to.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_with::{DeserializeFromStr, SerializeDisplay};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Enc,
    Dec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    /// Self-attention.
    #[serde(rename = "self")]
    SelfAttn,
    /// Encoder-decoder attention (decoder only).
    Cross,
    Ffn,
}

/// Adapted activation or linear map inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Q,
    K,
    V,
    O,
    W1,
    W2,
    /// FFN intermediate activation `γ(W₁x)`.
    Ff,
}

impl Site {
    pub const LINEAR: [Site; 6] = [Site::Q, Site::K, Site::V, Site::O, Site::W1, Site::W2];

    pub fn block_kind(self) -> BlockKind {
        match self {
            Site::Q | Site::K | Site::V | Site::O => BlockKind::Attention,
            Site::W1 | Site::W2 | Site::Ff => BlockKind::Ffn,
        }
    }

    pub fn is_linear(self) -> bool {
        self != Site::Ff
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::Q => "q",
            Site::K => "k",
            Site::V => "v",
            Site::O => "o",
            Site::W1 => "w1",
            Site::W2 => "w2",
            Site::Ff => "ff",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Attention,
    Ffn,
}

impl Block {
    pub fn kind(self) -> BlockKind {
        match self {
            Block::SelfAttn | Block::Cross => BlockKind::Attention,
            Block::Ffn => BlockKind::Ffn,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Block::SelfAttn => "self",
            Block::Cross => "cross",
            Block::Ffn => "ffn",
        }
    }

    /// Blocks present in one layer of the given side.
    pub fn for_side(side: Side) -> &'static [Block] {
        match side {
            Side::Enc => &[Block::SelfAttn, Block::Ffn],
            Side::Dec => &[Block::SelfAttn, Block::Cross, Block::Ffn],
        }
    }
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Enc => "enc",
            Side::Dec => "dec",
        }
    }
}

/// One block of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockKey {
    pub side: Side,
    pub layer: usize,
    pub block: Block,
}

impl BlockKey {
    pub fn new(side: Side, layer: usize, block: Block) -> Self {
        Self { side, layer, block }
    }

    pub fn site(self, site: Site) -> SiteKey {
        SiteKey { block: self, site }
    }
}

impl fmt::Display for BlockKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.side.name(), self.layer, self.block.name())
    }
}

/// One adapted site: `enc.0.self.k`, `dec.1.ffn.ff`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, SerializeDisplay, DeserializeFromStr)]
pub struct SiteKey {
    pub block: BlockKey,
    pub site: Site,
}

impl SiteKey {
    pub fn new(side: Side, layer: usize, block: Block, site: Site) -> Self {
        BlockKey::new(side, layer, block).site(site)
    }
}

impl fmt::Display for SiteKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.block, self.site.name())
    }
}

/// Where a router lives: a whole block, or a single site within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, SerializeDisplay, DeserializeFromStr)]
pub struct RouterKey {
    pub block: BlockKey,
    pub site: Option<Site>,
}

impl fmt::Display for RouterKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.site {
            Some(s) => write!(f, "{}.{}", self.block, s.name()),
            None => write!(f, "{}", self.block),
        }
    }
}

fn parse_side(s: &str) -> Result<Side, Error> {
    match s {
        "enc" => Ok(Side::Enc),
        "dec" => Ok(Side::Dec),
        _ => Err(Error::Config(format!("unknown side `{s}` (enc|dec)"))),
    }
}

fn parse_block(s: &str) -> Result<Block, Error> {
    match s {
        "self" => Ok(Block::SelfAttn),
        "cross" => Ok(Block::Cross),
        "ffn" => Ok(Block::Ffn),
        _ => Err(Error::Config(format!("unknown block `{s}` (self|cross|ffn)"))),
    }
}

impl FromStr for Site {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        Ok(match s {
            "q" => Site::Q,
            "k" => Site::K,
            "v" => Site::V,
            "o" => Site::O,
            "w1" => Site::W1,
            "w2" => Site::W2,
            "ff" => Site::Ff,
            _ => return Err(Error::Config(format!("unknown site `{s}`"))),
        })
    }
}

impl FromStr for SiteKey {
    type Err = Error;

    /// Parses `enc.0.self.k`.
    fn from_str(s: &str) -> Result<Self, Error> {
        let key: RouterKey = s.parse()?;
        match key.site {
            Some(site) => Ok(key.block.site(site)),
            None => Err(Error::Config(format!("site address `{s}` names no site"))),
        }
    }
}

impl FromStr for RouterKey {
    type Err = Error;

    /// Parses `dec.1.ffn` or `dec.1.ffn.ff`.
    fn from_str(s: &str) -> Result<Self, Error> {
        let parts: Vec<&str> = s.split('.').collect();
        if !(3..=4).contains(&parts.len()) {
            return Err(Error::Config(format!("malformed router address `{s}`")));
        }
        let layer = parts[1]
            .parse()
            .map_err(|_| Error::Config(format!("bad layer index in `{s}`")))?;
        let block = BlockKey::new(parse_side(parts[0])?, layer, parse_block(parts[2])?);
        let site = parts.get(3).map(|p| p.parse()).transpose()?;
        Ok(RouterKey { block, site })
    }
}
