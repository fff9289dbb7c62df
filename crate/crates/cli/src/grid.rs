//! Ablation grids: each axis lists the values to sweep; absent axes keep the
//! base configuration's value.

use std::path::Path;

use fia_core::fia::{FiaConfig, FriMode};
use fia_core::schedule::NoiseMode;
use serde::Deserialize;

use crate::config::Resolved;
use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// `"off"`, `"add"` or `"freq"`.
    pub fri_mode: Option<Vec<String>>,
    pub fij_enabled: Option<Vec<bool>>,
    pub noise_mode: Option<Vec<String>>,
    pub filter_sigma: Option<Vec<f64>>,
    pub fij_block_range: Option<Vec<[usize; 2]>>,
    /// Each seed reseeds both the noise draws and the toy model.
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FriSetting {
    Off,
    On(FriMode),
}

impl FriSetting {
    pub fn as_str(self) -> &'static str {
        match self {
            FriSetting::Off => "off",
            FriSetting::On(m) => m.as_str(),
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "off" => Ok(FriSetting::Off),
            other => other.parse().map(FriSetting::On).map_err(config_err),
        }
    }
}

/// One point of the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub fri: FriSetting,
    pub fij_enabled: bool,
    pub noise_mode: NoiseMode,
    pub filter_sigma: f64,
    pub fij_block_range: Option<(usize, usize)>,
}

impl Cell {
    pub fn fia_config(&self, base: &FiaConfig) -> FiaConfig {
        FiaConfig {
            fri_enabled: self.fri != FriSetting::Off,
            fri_mode: match self.fri {
                FriSetting::On(m) => m,
                FriSetting::Off => base.fri_mode,
            },
            filter_sigma: self.filter_sigma,
            fij_enabled: self.fij_enabled,
            fij_block_range: self.fij_block_range,
            ..*base
        }
    }
}

/// The listed values of an axis, or `None` when the axis is absent.
fn listed<'a, T>(values: &'a Option<Vec<T>>, name: &str) -> Result<Option<&'a [T]>, CliError> {
    match values {
        Some(v) if v.is_empty() => Err(CliError::Config(format!("grid axis {name} is empty"))),
        v => Ok(v.as_deref()),
    }
}

fn axis<T: Clone>(values: &Option<Vec<T>>, base: T, name: &str) -> Result<Vec<T>, CliError> {
    Ok(listed(values, name)?.map_or_else(|| vec![base], <[T]>::to_vec))
}

fn config_err(e: fia_core::FiaError) -> CliError {
    CliError::Config(e.to_string())
}

impl GridSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read grid {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Cartesian product in axis order fri_mode, fij_enabled, noise_mode,
    /// filter_sigma, fij_block_range (last axis fastest).
    pub fn cells(&self, base: &Resolved) -> Result<Vec<Cell>, CliError> {
        let f = &base.fia;
        let base_fri = if f.fri_enabled {
            FriSetting::On(f.fri_mode)
        } else {
            FriSetting::Off
        };
        let fri = match listed(&self.fri_mode, "fri_mode")? {
            None => vec![base_fri],
            Some(v) => v.iter().map(|s| FriSetting::parse(s)).collect::<Result<_, _>>()?,
        };
        let fij = axis(&self.fij_enabled, f.fij_enabled, "fij_enabled")?;
        let noise = match listed(&self.noise_mode, "noise_mode")? {
            None => vec![base.noise_mode],
            Some(v) => v.iter().map(|s| s.parse().map_err(config_err)).collect::<Result<_, _>>()?,
        };
        let sigmas = axis(&self.filter_sigma, f.filter_sigma, "filter_sigma")?;
        let ranges: Vec<Option<(usize, usize)>> = match listed(&self.fij_block_range, "fij_block_range")? {
            None => vec![f.fij_block_range],
            Some(v) => v.iter().map(|&[lo, hi]| Some((lo, hi))).collect(),
        };

        let mut cells = Vec::new();
        for &fri in &fri {
            for &fij_enabled in &fij {
                for &noise_mode in &noise {
                    for &filter_sigma in &sigmas {
                        for &fij_block_range in &ranges {
                            let cell = Cell {
                                index: cells.len(),
                                fri,
                                fij_enabled,
                                noise_mode,
                                filter_sigma,
                                fij_block_range,
                            };
                            cell.fia_config(f)
                                .validate(&base.model.topology(), base.schedule.step_count())
                                .map_err(|e| CliError::Config(format!("grid cell {}: {e}", cell.index)))?;
                            cells.push(cell);
                        }
                    }
                }
            }
        }
        Ok(cells)
    }

    pub fn seeds(&self, base: &Resolved) -> Result<Vec<u64>, CliError> {
        axis(&self.seeds, base.seed, "seeds")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn base() -> Resolved {
        RunConfig::default().resolve().unwrap()
    }

    #[test]
    fn empty_grid_is_the_base_cell() {
        let cells = GridSpec::default().cells(&base()).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].fia_config(&base().fia), base().fia);
    }

    #[test]
    fn product_order_and_size() {
        let g = GridSpec::from_toml_str(
            r#"
            fri_mode = ["off", "add", "freq"]
            fij_enabled = [false, true]
            noise_mode = ["none", "fresh_gaussian", "reused_epsilon"]
            "#,
        )
        .unwrap();
        let cells = g.cells(&base()).unwrap();
        assert_eq!(cells.len(), 18);
        assert_eq!(cells[0].fri, FriSetting::Off);
        assert!(!cells[0].fij_enabled);
        assert_eq!(cells[1].noise_mode, NoiseMode::FreshGaussian);
        assert_eq!(cells[17].fri, FriSetting::On(FriMode::Freq));
        assert!(cells.iter().enumerate().all(|(i, c)| c.index == i));
    }

    #[test]
    fn sigma_grid_counts_cells() {
        let g = GridSpec::from_toml_str("filter_sigma = [0.2, 0.9, 5.0]").unwrap();
        assert_eq!(g.cells(&base()).unwrap().len(), 3);
    }

    #[test]
    fn bad_grids_are_rejected() {
        for text in [
            "fri_mode = []",
            "fri_mode = [\"fast\"]",
            "noise_mode = [\"loud\"]",
            "filter_sigma = [0.0]",
            "fij_block_range = [[2, 7]]",
            "colour = [1]",
        ] {
            let r = GridSpec::from_toml_str(text).and_then(|g| g.cells(&base()));
            assert!(matches!(r, Err(CliError::Config(_))), "{text}");
        }
    }
}
