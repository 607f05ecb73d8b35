//! Run configuration: TOML with sections, unknown keys rejected, every
//! field defaulting to the desk-scale preset. A full-scale preset mirrors
//! the published training setup; it exists for completeness and is not
//! runnable on one workstation.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::ae::{AeSpec, Regularizer};
use crate::diffusion::{build_schedule, NoiseSchedule};
use crate::error::{Result, VoxError};
use crate::phantom::PhantomSpec;
use crate::spade::SpadeSpec;
use crate::unet3d::UNetSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegType {
    #[serde(rename = "VQ")]
    Vq,
    #[serde(rename = "KL")]
    Kl,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Pre-generated volume tree; when unset, phantoms are generated.
    pub data_dir: Option<PathBuf>,
    pub subjects: usize,
    pub extent: usize,
    pub train_fraction: f64,
    pub noise_std: f64,
    pub smooth_width: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            data_dir: None,
            subjects: 600,
            extent: 32,
            train_fraction: 0.8,
            noise_std: 0.01,
            smooth_width: 3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub ae_channels: Vec<usize>,
    pub d_emb: usize,
    pub codebook_size: usize,
    pub groups: usize,
    /// SPADE trunk channels [in, mid, late].
    pub spade_channels: Vec<usize>,
    pub unet_channels: Vec<usize>,
    pub time_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            ae_channels: vec![8, 16, 16],
            d_emb: 3,
            codebook_size: 512,
            groups: 8,
            spade_channels: vec![4, 8, 4],
            unet_channels: vec![16, 32, 48],
            time_mult: 4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub steps: usize,
    pub warmup_steps: usize,
    pub adv_weight: f64,
    pub perc_weight: f64,
    pub cycle_weight: f64,
    pub snapshot_refresh: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            steps: 4000,
            warmup_steps: 1000,
            adv_weight: 0.1,
            perc_weight: 0.5,
            cycle_weight: 1.0,
            snapshot_refresh: 2000,
            log_every: 10,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub steps: usize,
    pub t_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            steps: 8000,
            t_count: 300,
            beta_start: 0.0015,
            beta_end: 0.0195,
            log_every: 10,
            checkpoint_every: 2000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub use_diffusion: bool,
    pub use_palette: bool,
    pub use_spade: bool,
    pub reg_type: RegType,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            use_diffusion: true,
            use_palette: true,
            use_spade: true,
            reg_type: RegType::Vq,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-4,
            weight_decay: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub ablation: AblationConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            ablation: AblationConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn desk() -> RunConfig {
        RunConfig::default()
    }

    /// Published full-scale setup: 8192-entry codebook, [256,512,512]
    /// encoder ladder, [128,256,512] denoiser ladder, T = 1000, lr 2e-6.
    pub fn paper_scale() -> RunConfig {
        let mut c = RunConfig::default();
        c.dataset.extent = 192;
        c.model.ae_channels = vec![256, 512, 512];
        c.model.codebook_size = 8192;
        c.model.groups = 32;
        c.model.spade_channels = vec![128, 256, 128];
        c.model.unet_channels = vec![128, 256, 512];
        c.stage1.steps = 459 * 500;
        c.stage2.steps = 459 * 800;
        c.stage2.t_count = 1000;
        c.optimizer.lr = 2e-6;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if !self.ablation.use_diffusion && self.ablation.use_palette {
            return Err(VoxError::config(
                "invalid ablation: palette conditioning requires the diffusion stage \
                 (set use_palette = false when use_diffusion = false)",
            ));
        }
        if self.model.ae_channels.len() != 3 {
            return Err(VoxError::config(format!(
                "ae_channels needs exactly 3 stages, got {:?}",
                self.model.ae_channels
            )));
        }
        if self.model.spade_channels.len() != 3 {
            return Err(VoxError::config(format!(
                "spade_channels needs [in, mid, late], got {:?}",
                self.model.spade_channels
            )));
        }
        if self.model.unet_channels.len() != 3 {
            return Err(VoxError::config(format!(
                "unet_channels needs exactly 3 levels, got {:?}",
                self.model.unet_channels
            )));
        }
        if self.dataset.extent % 4 != 0 {
            return Err(VoxError::config(format!(
                "extent {} must be divisible by 4 (two 2x downsampling stages)",
                self.dataset.extent
            )));
        }
        if !(0.0 < self.dataset.train_fraction && self.dataset.train_fraction < 1.0) {
            return Err(VoxError::config(format!(
                "train_fraction {} outside (0,1)",
                self.dataset.train_fraction
            )));
        }
        if self.optimizer.lr <= 0.0 {
            return Err(VoxError::config(format!(
                "learning rate {} must be positive",
                self.optimizer.lr
            )));
        }
        if self.stage2.t_count < 1 {
            return Err(VoxError::config("stage2.t_count must be >= 1"));
        }
        self.ae_spec().validate()?;
        self.phantom_spec().validate()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| VoxError::config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        let mut spec = PhantomSpec::desk();
        spec.extent = [self.dataset.extent; 3];
        spec.noise_std = self.dataset.noise_std;
        spec.smooth_width = self.dataset.smooth_width;
        spec.seed = self.seed;
        spec
    }

    pub fn ae_spec(&self) -> AeSpec {
        AeSpec {
            ladder: [
                self.model.ae_channels[0],
                self.model.ae_channels[1],
                self.model.ae_channels[2],
            ],
            d_emb: self.model.d_emb,
            codebook_size: self.model.codebook_size,
            beta_commit: 0.25,
            groups: self.model.groups,
            reg: match self.ablation.reg_type {
                RegType::Vq => Regularizer::Vq,
                RegType::Kl => Regularizer::Kl,
            },
        }
    }

    pub fn spade_spec(&self) -> SpadeSpec {
        SpadeSpec {
            d_emb: self.model.d_emb,
            c_in: self.model.spade_channels[0],
            c_mid: self.model.spade_channels[1],
            c_late: self.model.spade_channels[2],
        }
    }

    pub fn unet_spec(&self, n_modalities: usize) -> UNetSpec {
        UNetSpec {
            d_emb: self.model.d_emb,
            ladder: [
                self.model.unet_channels[0],
                self.model.unet_channels[1],
                self.model.unet_channels[2],
            ],
            time_mult: self.model.time_mult,
            use_palette: self.ablation.use_palette,
            use_conditioning: true,
            modalities: n_modalities,
            groups: self.model.groups,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(
            self.stage2.t_count,
            self.stage2.beta_start,
            self.stage2.beta_end,
        )
    }

    /// Table-row shorthand used by the ablation study: rows a-d plus the
    /// full configuration.
    pub fn apply_ablation_row(&mut self, row: &str) -> Result<()> {
        let (d, p, s, r) = match row {
            "a" => (true, false, false, RegType::Vq),
            "b" => (true, true, false, RegType::Vq),
            "c" => (false, false, true, RegType::Vq),
            "d" => (true, true, true, RegType::Kl),
            "ours" => (true, true, true, RegType::Vq),
            other => {
                return Err(VoxError::config(format!(
                    "unknown ablation row '{other}', expected a, b, c, d or ours"
                )))
            }
        };
        self.ablation = AblationConfig {
            use_diffusion: d,
            use_palette: p,
            use_spade: s,
            reg_type: r,
        };
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_round_trips_through_toml() {
        let cfg = RunConfig::desk();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.model.ae_channels, cfg.model.ae_channels);
        assert_eq!(back.optimizer.lr, cfg.optimizer.lr);
        assert_eq!(back.ablation.reg_type, RegType::Vq);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("banana = 3\n").unwrap_err().to_string();
        assert!(err.contains("banana"), "{err}");
        let err = RunConfig::from_toml_str("[optimizer]\nlr = 0.1\nmomentum = 0.9\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("momentum"), "{err}");
    }

    #[test]
    fn partial_config_fills_desk_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 99\n[stage2]\nt_count = 50\n").unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.stage2.t_count, 50);
        assert_eq!(cfg.stage2.beta_start, 0.0015);
        assert_eq!(cfg.model.codebook_size, 512);
    }

    #[test]
    fn palette_without_diffusion_is_rejected_at_parse() {
        let text = "[ablation]\nuse_diffusion = false\nuse_palette = true\n";
        let err = RunConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(err.contains("palette"), "{err}");
    }

    #[test]
    fn reg_type_uses_published_names() {
        let cfg = RunConfig::from_toml_str("[ablation]\nreg_type = \"KL\"\n").unwrap();
        assert_eq!(cfg.ablation.reg_type, RegType::Kl);
        assert!(RunConfig::from_toml_str("[ablation]\nreg_type = \"vq\"\n").is_err());
    }

    #[test]
    fn paper_scale_preset_carries_published_values() {
        let cfg = RunConfig::paper_scale();
        assert_eq!(cfg.model.codebook_size, 8192);
        assert_eq!(cfg.model.ae_channels, vec![256, 512, 512]);
        assert_eq!(cfg.model.unet_channels, vec![128, 256, 512]);
        assert_eq!(cfg.stage2.t_count, 1000);
        assert_eq!(cfg.optimizer.lr, 2e-6);
        assert_eq!(cfg.stage2.beta_start, 0.0015);
        assert_eq!(cfg.stage2.beta_end, 0.0195);
    }

    #[test]
    fn ablation_rows_map_to_flag_combinations() {
        let mut cfg = RunConfig::desk();
        cfg.apply_ablation_row("a").unwrap();
        assert!(cfg.ablation.use_diffusion && !cfg.ablation.use_palette);
        assert!(!cfg.ablation.use_spade);
        cfg.apply_ablation_row("b").unwrap();
        assert!(cfg.ablation.use_palette && !cfg.ablation.use_spade);
        cfg.apply_ablation_row("c").unwrap();
        assert!(!cfg.ablation.use_diffusion && cfg.ablation.use_spade);
        cfg.validate().unwrap();
        cfg.apply_ablation_row("d").unwrap();
        assert_eq!(cfg.ablation.reg_type, RegType::Kl);
        cfg.apply_ablation_row("ours").unwrap();
        assert_eq!(cfg.ablation.reg_type, RegType::Vq);
        assert!(cfg.ablation.use_diffusion && cfg.ablation.use_palette && cfg.ablation.use_spade);
        assert!(cfg.apply_ablation_row("e").is_err());
    }

    #[test]
    fn derived_specs_are_consistent() {
        let cfg = RunConfig::desk();
        let ae = cfg.ae_spec();
        ae.validate().unwrap();
        assert_eq!(ae.d_emb, cfg.spade_spec().d_emb);
        let unet = cfg.unet_spec(3);
        unet.validate().unwrap();
        assert_eq!(unet.in_channels(), 2 * cfg.model.d_emb);
        let sched = cfg.schedule().unwrap();
        assert_eq!(sched.t_count, 300);
    }
}
