//! Run configuration: one TOML file, every key optional.

use std::path::{Path, PathBuf};

use fia_core::fia::{FiaConfig, FriMode};
use fia_core::model::{GuidanceConfig, ModelConfig};
use fia_core::schedule::{make_linear_schedule, NoiseMode, NoiseSchedule};
use fia_core::spectral::FusionWeights;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    /// Seed for the per-step noise draws.
    pub seed: u64,
    pub prompts: PromptSection,
    pub schedule: ScheduleSection,
    pub guidance: GuidanceSection,
    pub model: ModelSection,
    pub fia: FiaSection,
    pub codec: CodecSection,
    pub fixtures: FixtureSection,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSection {
    pub source: String,
    pub target: String,
    /// Salt for the word hashes.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub skip_fraction: f64,
    pub noise_mode: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub source: f64,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub patch_size: usize,
    pub n_blocks_dual: usize,
    pub n_blocks_cross_only: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub text_dim: usize,
    pub seed: u64,
    /// Load weights from a snapshot instead of drawing them from `seed`.
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FiaSection {
    pub fri_enabled: bool,
    pub fri_mode: String,
    pub lambda1: f64,
    pub lambda2: f64,
    pub filter_sigma: f64,
    pub filter_normalized: bool,
    pub fij_enabled: bool,
    pub fij_step_cutoff: Option<usize>,
    pub fij_block_range: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    pub patch: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureSection {
    pub names: Vec<String>,
    /// Side length of the generated square images.
    pub size: usize,
}


impl Default for PromptSection {
    fn default() -> Self {
        Self {
            source: "a red ball in front of a striped wall".into(),
            target: "a blue cube in front of a striped wall".into(),
            seed: 0,
        }
    }
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 50,
            skip_fraction: 0.0,
            noise_mode: NoiseMode::default().as_str().into(),
        }
    }
}

impl Default for GuidanceSection {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        Self {
            source: g.mu_src(),
            target: g.mu_tar(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            patch_size: m.patch_size,
            n_blocks_dual: m.n_blocks_dual,
            n_blocks_cross_only: m.n_blocks_cross_only,
            d_model: m.d_model,
            n_heads: m.n_heads,
            text_dim: m.text_dim,
            seed: m.seed,
            weights: None,
        }
    }
}

impl Default for FiaSection {
    fn default() -> Self {
        let f = FiaConfig::default();
        Self {
            fri_enabled: f.fri_enabled,
            fri_mode: f.fri_mode.as_str().into(),
            lambda1: f.fusion.lambda1(),
            lambda2: f.fusion.lambda2(),
            filter_sigma: f.filter_sigma,
            filter_normalized: f.filter_normalized,
            fij_enabled: f.fij_enabled,
            fij_step_cutoff: f.fij_step_cutoff,
            fij_block_range: None,
        }
    }
}

impl Default for CodecSection {
    fn default() -> Self {
        Self { patch: 2 }
    }
}

impl Default for FixtureSection {
    fn default() -> Self {
        Self {
            names: vec!["blob".into()],
            size: 64,
        }
    }
}

/// A configuration with every string field parsed and every value checked.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub seed: u64,
    pub source_prompt: String,
    pub target_prompt: String,
    pub prompt_seed: u64,
    pub schedule: NoiseSchedule,
    pub noise_mode: NoiseMode,
    pub guidance: GuidanceConfig,
    pub model: ModelConfig,
    pub weights: Option<PathBuf>,
    pub fia: FiaConfig,
    pub codec_patch: usize,
    pub fixtures: Vec<String>,
    pub fixture_size: usize,
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    /// Reads a config file. A missing or unreadable file is a configuration
    /// error, not an I/O one.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let s = &self.schedule;
        let schedule = make_linear_schedule(s.steps, s.skip_fraction).map_err(config_err)?;
        let noise_mode: NoiseMode = s.noise_mode.parse().map_err(config_err)?;
        let guidance = GuidanceConfig::new(self.guidance.source, self.guidance.target).map_err(config_err)?;

        let p = self.codec.patch;
        if p == 0 {
            return Err(config_err("codec patch must be positive"));
        }
        let m = &self.model;
        let model = ModelConfig {
            latent_channels: 3 * p * p,
            patch_size: m.patch_size,
            n_blocks_dual: m.n_blocks_dual,
            n_blocks_cross_only: m.n_blocks_cross_only,
            d_model: m.d_model,
            n_heads: m.n_heads,
            text_dim: m.text_dim,
            seed: m.seed,
        };
        model.validate().map_err(config_err)?;

        let f = &self.fia;
        let fia = FiaConfig {
            fri_enabled: f.fri_enabled,
            fri_mode: f.fri_mode.parse::<FriMode>().map_err(config_err)?,
            fusion: FusionWeights::new(f.lambda1, f.lambda2).map_err(config_err)?,
            filter_sigma: f.filter_sigma,
            filter_normalized: f.filter_normalized,
            fij_enabled: f.fij_enabled,
            fij_step_cutoff: f.fij_step_cutoff,
            fij_block_range: f.fij_block_range.map(|[lo, hi]| (lo, hi)),
        };
        fia.validate(&model.topology(), s.steps).map_err(config_err)?;

        if self.fixtures.names.is_empty() {
            return Err(config_err("fixture list is empty"));
        }
        let size = self.fixtures.size;
        if size == 0 || !size.is_multiple_of(p * m.patch_size) {
            return Err(config_err(format!(
                "fixture size {size} must be a positive multiple of {}",
                p * m.patch_size
            )));
        }
        Ok(Resolved {
            seed: self.seed,
            source_prompt: self.prompts.source.clone(),
            target_prompt: self.prompts.target.clone(),
            prompt_seed: self.prompts.seed,
            schedule,
            noise_mode,
            guidance,
            model,
            weights: m.weights.clone(),
            fia,
            codec_patch: p,
            fixtures: self.fixtures.names.clone(),
            fixture_size: size,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let r = cfg.resolve().unwrap();
        assert_eq!(r.guidance.mu_src(), 3.5);
        assert_eq!(r.guidance.mu_tar(), 13.5);
        assert_eq!(r.schedule.step_count(), 50);
        assert_eq!(r.noise_mode, NoiseMode::ReusedEpsilon);
        assert_eq!(r.fia, FiaConfig::default());
        assert_eq!(r.model.latent_channels, 12);
    }

    #[test]
    fn nested_keys_override() {
        let cfg = RunConfig::from_toml_str(
            r#"
            seed = 7
            [schedule]
            steps = 10
            noise_mode = "none"
            [fia]
            fri_mode = "add"
            fij_block_range = [0, 5]
            "#,
        )
        .unwrap();
        let r = cfg.resolve().unwrap();
        assert_eq!(r.seed, 7);
        assert_eq!(r.noise_mode, NoiseMode::None);
        assert_eq!(r.fia.fri_mode, FriMode::Add);
        assert_eq!(r.fia.fij_block_range, Some((0, 5)));
    }

    #[test]
    fn unknown_and_invalid_keys_are_config_errors() {
        for text in [
            "sed = 1",
            "[schedule]\nsteps = 0",
            "[schedule]\nnoise_mode = \"loud\"",
            "[guidance]\nsource = 0.5",
            "[fia]\nfij_block_range = [3, 9]",
            "[fixtures]\nsize = 30",
            "[model]\nd_model = 15",
        ] {
            let err = RunConfig::from_toml_str(text).and_then(|c| c.resolve().map(|_| ()));
            assert!(matches!(err, Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn missing_file_is_config_error() {
        let err = RunConfig::load(Path::new("/nonexistent/fia.toml")).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
