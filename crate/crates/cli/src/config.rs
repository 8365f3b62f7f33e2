//! TOML configuration. Every key is optional; command-line flags override.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vgr_core::datakit::VerifyConfig;
use vgr_core::feature_pool::{DEFAULT_MAX_CROPS, MAX_CROPS_LIMIT};
use vgr_core::{PoolingConfig, ReplayPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub patch_size: u32,
    pub patch_stride: u32,
    pub max_crops: usize,
    pub pooling: PoolingConfig,
    pub replay: ReplayPolicy,
    pub verify: VerifyConfig,
    pub judge: JudgeConfig,
    pub workers: usize,
    pub image_root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    /// Use the in-process deterministic judge.
    pub mock: bool,
    pub seed: u64,
    pub url: Option<String>,
    pub timeout_secs: u64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            mock: false,
            seed: 0,
            url: None,
            timeout_secs: 30,
        }
    }
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            patch_size: 336,
            patch_stride: 14,
            max_crops: DEFAULT_MAX_CROPS,
            pooling: PoolingConfig::default(),
            replay: ReplayPolicy::default(),
            verify: VerifyConfig::default(),
            judge: JudgeConfig::default(),
            workers: 1,
            image_root: None,
        }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Checks every value against the owning module's preconditions.
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_stride == 0 || !self.patch_size.is_multiple_of(self.patch_stride) {
            bail!(
                "patch_size {} must be a positive multiple of patch_stride {}",
                self.patch_size,
                self.patch_stride
            );
        }
        if self.max_crops == 0 || self.max_crops > MAX_CROPS_LIMIT {
            bail!("max_crops must be in 1..={MAX_CROPS_LIMIT}, got {}", self.max_crops);
        }
        self.pooling.validate()?;
        self.replay.validate()?;
        let v = &self.verify;
        if !(0.0..=1.0).contains(&v.anls_threshold) {
            bail!("verify.anls_threshold must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&v.anls_pass) || !(0.0..=1.0).contains(&v.anls_rewrite_floor) {
            bail!("verify.anls_pass and verify.anls_rewrite_floor must be in [0, 1]");
        }
        if v.anls_rewrite_floor > v.anls_pass {
            bail!("verify.anls_rewrite_floor must not exceed verify.anls_pass");
        }
        if v.judge_threshold > 5 {
            bail!("verify.judge_threshold must be in 0..=5");
        }
        if !(v.expand_margin >= 0.0 && v.expand_margin.is_finite()) {
            bail!("verify.expand_margin must be a finite non-negative number");
        }
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: CliConfig = toml::from_str("max_crops = 20\n[pooling]\nlocal_stride = 2\n[judge]\nmock = true\nseed = 7\n").unwrap();
        assert_eq!(cfg.max_crops, 20);
        assert_eq!(cfg.pooling.local_stride, 2);
        assert_eq!(cfg.pooling.snapshot_stride, 2);
        assert_eq!(cfg.replay.max_replays, 8);
        assert!(cfg.judge.mock);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(toml::from_str::<CliConfig>("bogus = 1").is_err());
        let cfg = CliConfig { patch_stride: 13, ..CliConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = CliConfig { max_crops: 65, ..CliConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_round_trips() {
        let text = toml::to_string(&CliConfig::default()).unwrap();
        assert_eq!(toml::from_str::<CliConfig>(&text).unwrap(), CliConfig::default());
    }
}
