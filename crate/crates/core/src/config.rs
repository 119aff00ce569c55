//! Pipeline configuration loaded from TOML.
//!
//! ```toml
//! [octree]
//! depth_finest = 6
//! num_levels = 3
//! voxel = 0.4
//!
//! [msgv]
//! sigma_d = 1.6
//! lambdas = [512, 256, 128]
//!
//! [reg]
//! n_c = 256
//! tau_a = 1.6
//! ```
//!
//! Every section and key is optional; missing keys take their defaults and
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::descriptors::DescriptorConfig;
use crate::error::{Error, Result};
use crate::msgv::MsgvConfig;
use crate::octree::{DEFAULT_DEPTH_FINEST, DEFAULT_NUM_LEVELS};
use crate::registration::RegConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OctreeConfig {
    pub depth_finest: u32,
    pub num_levels: usize,
    /// Voxel edge applied before the octree is built; `0` disables it.
    pub voxel: f64,
}

impl Default for OctreeConfig {
    fn default() -> Self {
        Self {
            depth_finest: DEFAULT_DEPTH_FINEST,
            num_levels: DEFAULT_NUM_LEVELS,
            voxel: 0.4,
        }
    }
}

impl OctreeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0 || self.depth_finest as usize + 1 < self.num_levels || self.depth_finest > 21 {
            return Err(Error::InvalidDepth(format!(
                "depth_finest {} with {} levels",
                self.depth_finest, self.num_levels
            )));
        }
        if !(self.voxel.is_finite() && self.voxel >= 0.0) {
            return Err(Error::InvalidVoxel(self.voxel));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seed: u64,
    /// Number of query/database place pairs.
    pub pairs: usize,
    /// Retrieval depth handed to re-ranking.
    pub k: usize,
    /// A retrieved place counts as correct within this distance (metres).
    pub recall_threshold: f64,
    /// Spacing between neighbouring places on the synthetic trajectory.
    pub place_spacing: f64,
    /// Per-query point noise is drawn from this list round-robin.
    pub noise_sigmas: Vec<f64>,
    pub max_yaw_deg: f64,
    pub max_translation: f64,
    pub occlusion_deg: f64,
    /// Side length of each synthetic place.
    pub extent: f64,
    pub tree_count: usize,
    /// Worker cap; `HIERLOC_THREADS` takes precedence, `0` means all cores.
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 107,
            pairs: 200,
            k: 20,
            recall_threshold: 10.0,
            place_spacing: 50.0,
            noise_sigmas: vec![0.0, 0.05, 0.1],
            max_yaw_deg: 180.0,
            max_translation: 5.0,
            occlusion_deg: 45.0,
            extent: 36.0,
            tree_count: 24,
            threads: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("bench: {m}")));
        if self.pairs < 2 {
            return bad("pairs must be ≥ 2");
        }
        if self.k == 0 {
            return bad("k must be ≥ 1");
        }
        for v in [self.recall_threshold, self.place_spacing, self.extent] {
            if !(v.is_finite() && v > 0.0) {
                return bad("recall_threshold, place_spacing and extent must be positive");
            }
        }
        if self.noise_sigmas.is_empty() || self.noise_sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("noise_sigmas must be a non-empty list of values ≥ 0");
        }
        if !(0.0..=180.0).contains(&self.max_yaw_deg) || !(self.max_translation.is_finite() && self.max_translation >= 0.0) {
            return bad("max_yaw_deg must lie in [0, 180] and max_translation be ≥ 0");
        }
        if !(0.0..360.0).contains(&self.occlusion_deg) {
            return bad("occlusion_deg must lie in [0, 360)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub octree: OctreeConfig,
    pub descriptors: DescriptorConfig,
    pub msgv: MsgvConfig,
    pub reg: RegConfig,
    pub bench: BenchConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.octree.validate()?;
        self.descriptors.validate()?;
        self.msgv.validate()?;
        self.reg.validate()?;
        self.bench.validate()?;
        if self.descriptors.dims.len() != self.octree.num_levels {
            return Err(Error::Config(format!(
                "descriptors.dims has {} entries for {} octree levels",
                self.descriptors.dims.len(),
                self.octree.num_levels
            )));
        }
        if self.msgv.lambdas.len() > self.octree.num_levels {
            return Err(Error::Config(format!(
                "msgv uses {} scales but the octree has {} levels",
                self.msgv.lambdas.len(),
                self.octree.num_levels
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}
