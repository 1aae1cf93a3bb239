use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::layers::GnnKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Architecture {
    Mlp,
    MlpMean,
    MlpMax,
    MlpPma,
    PointNet,
    PointNetAdapted,
    St,
    St150i,
    StNoAtt,
    ReluFormer,
    StFps,
    Gcn,
    Gat,
    Gin,
    Gat3,
    Gin3,
    GatAsap,
    GinAsap,
    GatStFps,
    GinStFps,
}

/// Which kind of context an architecture uses for each event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    NoContext,
    GlobalContext,
    LocalContext,
    LocalGlobalContext,
}

impl Architecture {
    pub const ALL: [Architecture; 20] = [
        Architecture::Mlp,
        Architecture::MlpMean,
        Architecture::MlpMax,
        Architecture::MlpPma,
        Architecture::PointNet,
        Architecture::PointNetAdapted,
        Architecture::St,
        Architecture::St150i,
        Architecture::StNoAtt,
        Architecture::ReluFormer,
        Architecture::StFps,
        Architecture::Gcn,
        Architecture::Gat,
        Architecture::Gin,
        Architecture::Gat3,
        Architecture::Gin3,
        Architecture::GatAsap,
        Architecture::GinAsap,
        Architecture::GatStFps,
        Architecture::GinStFps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Mlp => "mlp",
            Architecture::MlpMean => "mlp-mean",
            Architecture::MlpMax => "mlp-max",
            Architecture::MlpPma => "mlp-pma",
            Architecture::PointNet => "pointnet",
            Architecture::PointNetAdapted => "pointnet-adapted",
            Architecture::St => "st",
            Architecture::St150i => "st-150i",
            Architecture::StNoAtt => "st-no-att",
            Architecture::ReluFormer => "reluformer",
            Architecture::StFps => "st-fps",
            Architecture::Gcn => "gcn",
            Architecture::Gat => "gat",
            Architecture::Gin => "gin",
            Architecture::Gat3 => "gat-3",
            Architecture::Gin3 => "gin-3",
            Architecture::GatAsap => "gat-asap",
            Architecture::GinAsap => "gin-asap",
            Architecture::GatStFps => "gat-st-fps",
            Architecture::GinStFps => "gin-st-fps",
        }
    }

    pub fn family(self) -> Family {
        use Architecture::*;
        match self {
            Mlp | StNoAtt => Family::NoContext,
            MlpMean | MlpMax | MlpPma | PointNet | PointNetAdapted | St | St150i | ReluFormer | StFps => {
                Family::GlobalContext
            }
            Gcn | Gat | Gin | Gat3 | Gin3 => Family::LocalContext,
            GatAsap | GinAsap | GatStFps | GinStFps => Family::LocalGlobalContext,
        }
    }

    pub fn gnn_kind(self) -> Option<GnnKind> {
        use Architecture::*;
        match self {
            Gcn => Some(GnnKind::Gcn),
            Gat | Gat3 | GatAsap | GatStFps => Some(GnnKind::Gat),
            Gin | Gin3 | GinAsap | GinStFps => Some(GnnKind::Gin),
            _ => None,
        }
    }

    pub fn needs_graph(self) -> bool {
        self.gnn_kind().is_some()
    }

    pub fn default_k(self) -> usize {
        match self {
            Architecture::Gat3 | Architecture::Gin3 => 3,
            _ => 10,
        }
    }

    pub fn default_inducing(self) -> usize {
        match self {
            Architecture::St150i => 150,
            _ => 16,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture '{s}'")))
    }
}

impl TryFrom<String> for Architecture {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Architecture> for String {
    fn from(a: Architecture) -> String {
        a.name().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    /// Neighbors per event; the architecture default when absent.
    pub k: Option<usize>,
    /// Learned inducing points; the architecture default when absent.
    pub inducing_points: Option<usize>,
    pub fps_ratio: f64,
    pub fps_min_count: usize,
    pub gat_attention_dropout: f32,
    pub asap_targets: [usize; 2],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::Mlp,
            layers: 4,
            hidden_dim: 32,
            heads: 4,
            k: None,
            inducing_points: None,
            fps_ratio: 0.0005,
            fps_min_count: 16,
            gat_attention_dropout: 0.2,
            asap_targets: [100, 50],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(architecture: Architecture) -> Self {
        ModelConfig {
            architecture,
            ..Default::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn neighbors(&self) -> usize {
        self.k.unwrap_or_else(|| self.architecture.default_k())
    }

    pub fn inducing(&self) -> usize {
        self.inducing_points.unwrap_or_else(|| self.architecture.default_inducing())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.hidden_dim == 0 || self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.neighbors() == 0 && self.architecture.needs_graph() {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.inducing() == 0 {
            return Err(Error::Config("inducing_points must be at least 1".into()));
        }
        if !(self.fps_ratio > 0.0 && self.fps_ratio <= 1.0) {
            return Err(Error::Config(format!("fps_ratio must be in (0, 1], got {}", self.fps_ratio)));
        }
        if !(0.0..1.0).contains(&self.gat_attention_dropout) {
            return Err(Error::Config("gat_attention_dropout must be in [0, 1)".into()));
        }
        if self.asap_targets[0] == 0 || self.asap_targets[1] == 0 || self.asap_targets[1] >= self.asap_targets[0] {
            return Err(Error::Config(format!(
                "asap_targets must be decreasing and positive, got {:?}",
                self.asap_targets
            )));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model: config, canonical markers and the
/// markers removed from node inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub markers: Vec<String>,
    #[serde(default)]
    pub masked: Vec<String>,
    /// Statistics of the training split; set by training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
}

impl ModelSpec {
    pub fn new(config: ModelConfig, markers: Vec<String>, masked: Vec<String>) -> Result<Self> {
        let spec = ModelSpec {
            config,
            markers,
            masked,
            standardization: None,
        };
        spec.input_columns()?;
        Ok(spec)
    }

    /// Canonical marker indices fed to the node inputs.
    pub fn input_columns(&self) -> Result<Vec<usize>> {
        let drop = super::marker_positions(&self.markers, &self.masked)?;
        Ok((0..self.markers.len()).filter(|i| !drop.contains(i)).collect())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize model spec: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ModelSpec = toml::from_str(text).map_err(|e| Error::Config(format!("invalid model spec: {e}")))?;
        spec.config.validate()?;
        spec.input_columns()?;
        Ok(spec)
    }
}
