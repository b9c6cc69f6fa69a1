use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::RenderStyle;
use crate::masking::{BottomSampling, Fill, MaskMode, MaskParams};
use crate::relevance::RegionGrid;

/// Run configuration. Every field is optional in the config file; unknown
/// fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DnRConfig {
    pub mode: MaskMode,
    pub rho_top: f64,
    pub rho_bottom: f64,
    /// Number of stochastic masks per image.
    pub masks: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub beta_ent: f64,
    pub beta_ctr: f64,
    pub style: RenderStyle,
    /// Per-expert style, keyed by expert name; `style` applies elsewhere.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub style_overrides: BTreeMap<String, RenderStyle>,
    /// Expert names to run, in order; all available experts when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub experts: Option<Vec<String>>,
    pub seed: u64,
    pub fill: Fill,
    pub bottom_sampling: BottomSampling,
    /// Tolerance for counting benign selector swaps; not used by selection itself.
    pub selection_epsilon: f64,
}

impl Default for DnRConfig {
    fn default() -> Self {
        Self {
            mode: MaskMode::Hybrid,
            rho_top: 0.25,
            rho_bottom: 0.75,
            masks: 16,
            grid_rows: 16,
            grid_cols: 16,
            beta_ent: 1.0,
            beta_ctr: 1.0,
            style: RenderStyle::default(),
            style_overrides: BTreeMap::new(),
            experts: None,
            seed: 0,
            fill: Fill::default(),
            bottom_sampling: BottomSampling::Stochastic,
            selection_epsilon: 0.01,
        }
    }
}

impl DnRConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: DnRConfig = toml::from_str(text).map_err(|e| Error::parse("config", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, rho) in [("rho_top", self.rho_top), ("rho_bottom", self.rho_bottom)] {
            if !(rho > 0.0 && rho < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0,1), got {rho}")));
            }
        }
        if self.masks < 2 {
            return Err(Error::invalid("masks must be at least 2"));
        }
        self.grid()?;
        if !(self.beta_ent >= 0.0 && self.beta_ctr >= 0.0) || self.beta_ent + self.beta_ctr <= 0.0 {
            return Err(Error::invalid(
                "beta_ent and beta_ctr must be non-negative and not both zero",
            ));
        }
        if !(self.selection_epsilon >= 0.0) {
            return Err(Error::invalid("selection_epsilon must be non-negative"));
        }
        for s in self.style_overrides.values() {
            s.validate()?;
        }
        self.style.validate()
    }

    pub fn style_for(&self, expert: &str) -> &RenderStyle {
        self.style_overrides.get(expert).unwrap_or(&self.style)
    }

    pub fn grid(&self) -> Result<RegionGrid> {
        RegionGrid::new(self.grid_rows, self.grid_cols)
    }

    pub fn mask_params(&self, seed: u64) -> MaskParams {
        MaskParams {
            mode: self.mode,
            rho_top: self.rho_top,
            rho_bottom: self.rho_bottom,
            count: self.masks,
            seed,
            bottom_sampling: self.bottom_sampling,
        }
    }

    /// Short digest of the canonical TOML form.
    pub fn fingerprint(&self) -> String {
        crate::digest::fingerprint(self.to_toml().as_bytes())
    }
}
