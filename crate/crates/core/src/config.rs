//! Build and query configuration. Every tunable lives here; a TOML file
//! may override any subset of fields.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierseg::{FloorParams, RoomParams};
use crate::keyframes::KeyframeParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Pixel stride used when fusing the scene cloud.
    pub stride: usize,
    pub voxel_size: f64,
    /// Depth readings beyond this range (meters) are dropped; 0 disables.
    pub max_depth: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            stride: 4,
            voxel_size: 0.05,
            max_depth: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectConfig {
    pub merge_threshold: f64,
    pub voxel: f64,
    pub depth_tol: f64,
    pub theta_vis: f64,
    /// Stride for the projection filter's back-projection.
    pub filter_stride: usize,
}

impl Default for ObjectConfig {
    fn default() -> Self {
        ObjectConfig {
            merge_threshold: 0.3,
            voxel: 0.05,
            depth_tol: 0.08,
            theta_vis: 0.25,
            filter_stride: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummaryConfig {
    /// Maximum descriptions per summarize call before map-reduce kicks in.
    pub chunk_size: usize,
}

impl Default for SummaryConfig {
    fn default() -> Self {
        SummaryConfig { chunk_size: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RagConfig {
    pub k: usize,
    /// Context budget in whitespace tokens.
    pub token_budget: usize,
    pub beam_width: usize,
}

impl Default for RagConfig {
    fn default() -> Self {
        RagConfig {
            k: 5,
            token_budget: 4000,
            beam_width: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub voxel: f64,
    pub grounding_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            voxel: 0.05,
            grounding_iou: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            timeout_ms: 30_000,
            max_in_flight: 4,
            retries: 3,
            backoff_ms: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub ingest: IngestConfig,
    pub floors: FloorParams,
    pub rooms: RoomParams,
    pub keyframes: KeyframeParams,
    pub objects: ObjectConfig,
    pub summaries: SummaryConfig,
    pub rag: RagConfig,
    pub eval: EvalConfig,
    pub providers: ProviderConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.ingest.stride == 0 || self.objects.filter_stride == 0 {
            return bad("strides must be >= 1");
        }
        for (name, v) in [
            ("ingest.voxel_size", self.ingest.voxel_size),
            ("floors.bin", self.floors.bin),
            ("rooms.cell", self.rooms.cell),
            ("keyframes.eps", self.keyframes.eps),
            ("keyframes.coverage_voxel", self.keyframes.coverage_voxel),
            ("objects.voxel", self.objects.voxel),
            ("objects.depth_tol", self.objects.depth_tol),
            ("eval.voxel", self.eval.voxel),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.keyframes.eta) {
            return bad("keyframes.eta must be in [0, 1]");
        }
        if !(self.objects.merge_threshold > 0.0 && self.objects.merge_threshold <= 1.0) {
            return bad("objects.merge_threshold must be in (0, 1]");
        }
        if !(self.objects.theta_vis > 0.0 && self.objects.theta_vis <= 1.0) {
            return bad("objects.theta_vis must be in (0, 1]");
        }
        if self.keyframes.min_pts == 0 || self.keyframes.w < 0.0 {
            return bad("keyframes.min_pts >= 1 and keyframes.w >= 0 required");
        }
        if self.rag.k == 0 || self.rag.beam_width == 0 || self.summaries.chunk_size < 2 {
            return bad("rag.k, rag.beam_width >= 1 and summaries.chunk_size >= 2 required");
        }
        if self.providers.max_in_flight == 0 {
            return bad("providers.max_in_flight must be >= 1");
        }
        Ok(())
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::util::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}
