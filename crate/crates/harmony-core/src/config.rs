//! Run configuration: model dimensions, attention scales, sampler steps,
//! seed-selection parameters, and detector thresholds. A config snapshot is
//! stored inside every checkpoint so runs can be replayed exactly.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::HarmonyError;

/// Named block of the denoising backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockSite {
    D1,
    D2,
    D3,
    D4,
    M,
    U4,
    U3,
    U2,
    U1,
}

impl BlockSite {
    pub const ALL: [BlockSite; 9] = [
        BlockSite::D1,
        BlockSite::D2,
        BlockSite::D3,
        BlockSite::D4,
        BlockSite::M,
        BlockSite::U4,
        BlockSite::U3,
        BlockSite::U2,
        BlockSite::U1,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BlockSite::D1 => "D1",
            BlockSite::D2 => "D2",
            BlockSite::D3 => "D3",
            BlockSite::D4 => "D4",
            BlockSite::M => "M",
            BlockSite::U4 => "U4",
            BlockSite::U3 => "U3",
            BlockSite::U2 => "U2",
            BlockSite::U1 => "U1",
        }
    }

    pub fn parse(s: &str) -> Result<Self, HarmonyError> {
        Self::ALL
            .iter()
            .copied()
            .find(|site| site.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| HarmonyError::Config(alloc::format!("unknown block site {s:?}")))
    }
}

/// Where the harmony branch is injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InjectMode {
    /// Dual-branch attention at a single block (the default, at D4).
    Site,
    /// Image-feature branch added to the cross-attention of every block.
    Whole,
}

/// Full hyperparameter set for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonyConfig {
    /// Image side length; scenes are square.
    pub image_size: usize,
    /// Pixel channels.
    pub channels: usize,
    /// Channel widths of the four down blocks (mid reuses the last).
    pub hidden: Vec<usize>,
    /// Query/key width of every backbone cross-attention layer.
    pub attn_dim: usize,
    /// Width of the sinusoidal time embedding and its MLP.
    pub time_dim: usize,
    /// Visual token dimension D_v.
    pub d_v: usize,
    /// Text token dimension D_t.
    pub d_t: usize,
    /// Patch side for the image encoder; tokens = (image_size / patch)^2.
    pub patch: usize,
    /// Heads of the harmony attention module.
    pub heads: usize,
    /// Residual scale of the harmony feature.
    pub alpha: f64,
    /// Scale of the harmony branch in the injected attention.
    pub beta: f64,
    /// Guidance scale w.
    pub guidance: f64,
    /// Injection site for `InjectMode::Site`.
    pub inject_site: BlockSite,
    pub inject_mode: InjectMode,
    /// Whether the harmony attention refinement is applied (when false, the
    /// raw visual tokens are injected unchanged).
    pub use_ha: bool,
    /// Whether inference selects its starting seed from a searched pool.
    pub use_pns: bool,
    /// Diffusion training steps T.
    pub total_steps: usize,
    /// Default sampler steps for full generation.
    pub full_steps: usize,
    /// Sampler steps for the shallow candidate pass.
    pub shallow_steps: usize,
    /// Seeds examined by the offline search.
    pub pool_size: usize,
    /// Candidates retained from the search.
    pub top_k: usize,
    /// RGB distance below which a pixel counts as a class color.
    pub detect_threshold: f64,
    /// Minimum connected-component area, in pixels, for a detection.
    pub detect_min_area: usize,
}

impl Default for HarmonyConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            hidden: alloc::vec![16, 28, 40, 56],
            attn_dim: 32,
            time_dim: 32,
            d_v: 64,
            d_t: 32,
            patch: 8,
            heads: 8,
            alpha: 1.0,
            beta: 1.0,
            guidance: 5.0,
            inject_site: BlockSite::D4,
            inject_mode: InjectMode::Site,
            use_ha: true,
            use_pns: true,
            total_steps: 1000,
            full_steps: 30,
            shallow_steps: 10,
            pool_size: 100,
            top_k: 5,
            detect_threshold: 90.0,
            detect_min_area: 5,
        }
    }
}

impl HarmonyConfig {
    /// A reduced configuration for fast tests: 16x16 images, narrow blocks,
    /// small token dimensions.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            hidden: alloc::vec![6, 8, 10, 12],
            attn_dim: 8,
            time_dim: 8,
            d_v: 16,
            d_t: 8,
            patch: 8,
            heads: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), HarmonyError> {
        if self.hidden.len() != 4 {
            return Err(HarmonyError::Config(alloc::format!(
                "expected 4 down-block widths, got {}",
                self.hidden.len()
            )));
        }
        if self.d_t % self.heads != 0 {
            return Err(HarmonyError::Config(alloc::format!(
                "heads {} must divide d_t {}",
                self.heads,
                self.d_t
            )));
        }
        if self.image_size % 16 != 0 {
            return Err(HarmonyError::Config(alloc::format!(
                "image size {} must be a multiple of 16 (four pooling stages)",
                self.image_size
            )));
        }
        if self.image_size % self.patch != 0 {
            return Err(HarmonyError::Config(alloc::format!(
                "patch {} must divide image size {}",
                self.patch,
                self.image_size
            )));
        }
        if self.full_steps == 0 || self.full_steps > self.total_steps {
            return Err(HarmonyError::Config(alloc::format!(
                "full_steps {} must be in 1..={}",
                self.full_steps,
                self.total_steps
            )));
        }
        if self.top_k == 0 || self.top_k > self.pool_size {
            return Err(HarmonyError::Config(alloc::format!(
                "top_k {} must be in 1..=pool_size {}",
                self.top_k,
                self.pool_size
            )));
        }
        Ok(())
    }
}

/// Ablation variants exercised by the evaluation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    /// No count text, no harmony refinement, no seed selection; source image
    /// features injected at every attention site.
    B0,
    /// Source image features injected only at the layout site; fixed seed.
    B1,
    /// Seed selection on, harmony refinement bypassed.
    B2,
    /// Harmony refinement on, fixed seed.
    B3,
    /// Harmony refinement and seed selection both on.
    Full,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::B0,
        AblationVariant::B1,
        AblationVariant::B2,
        AblationVariant::B3,
        AblationVariant::Full,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::B0 => "B0",
            AblationVariant::B1 => "B1",
            AblationVariant::B2 => "B2",
            AblationVariant::B3 => "B3",
            AblationVariant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self, HarmonyError> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| HarmonyError::Config(alloc::format!("unknown variant {s:?}")))
    }

    /// Apply this variant's flags to a base configuration.
    pub fn apply(&self, base: &HarmonyConfig) -> HarmonyConfig {
        let mut cfg = base.clone();
        match self {
            AblationVariant::B0 => {
                cfg.inject_mode = InjectMode::Whole;
                cfg.use_ha = false;
                cfg.use_pns = false;
            }
            AblationVariant::B1 => {
                cfg.inject_mode = InjectMode::Site;
                cfg.use_ha = false;
                cfg.use_pns = false;
            }
            AblationVariant::B2 => {
                cfg.inject_mode = InjectMode::Site;
                cfg.use_ha = false;
                cfg.use_pns = true;
            }
            AblationVariant::B3 => {
                cfg.inject_mode = InjectMode::Site;
                cfg.use_ha = true;
                cfg.use_pns = false;
            }
            AblationVariant::Full => {
                cfg.inject_mode = InjectMode::Site;
                cfg.use_ha = true;
                cfg.use_pns = true;
            }
        }
        cfg
    }
}

/// Which parameters a training stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainStage {
    /// Backbone, encoders, and the visual-conditioning projection.
    Pretrain,
    /// Harmony attention weights and the harmony-branch key/value maps only.
    Adapter,
}

/// Optimization settings for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: TrainStage,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Probability of dropping all conditioning for a step (trains the
    /// unconditional path used by guidance).
    pub conditional_dropout: f64,
    /// Pretraining only: probability of appending projected visual tokens to
    /// the text context, which trains the visual-conditioning projection.
    pub visual_cond_prob: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Seed for data order, timesteps, noise, and dropout decisions.
    pub seed: u64,
}

impl TrainConfig {
    pub fn adapter_default() -> Self {
        Self {
            stage: TrainStage::Adapter,
            learning_rate: 2.5e-4,
            steps: 2000,
            batch_size: 1,
            conditional_dropout: 0.05,
            visual_cond_prob: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
        }
    }

    pub fn pretrain_default() -> Self {
        Self {
            stage: TrainStage::Pretrain,
            learning_rate: 1e-3,
            steps: 20_000,
            batch_size: 1,
            conditional_dropout: 0.05,
            visual_cond_prob: 0.5,
            weight_decay: 0.01,
            ..Self::adapter_default()
        }
    }

    pub fn validate(&self) -> Result<(), HarmonyError> {
        if !(0.0..1.0).contains(&self.conditional_dropout) {
            return Err(HarmonyError::Config(alloc::format!(
                "conditional dropout {} must be in [0, 1)",
                self.conditional_dropout
            )));
        }
        if self.steps == 0 {
            return Err(HarmonyError::Config(String::from("steps must be positive")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        HarmonyConfig::default().validate().unwrap();
        HarmonyConfig::tiny().validate().unwrap();
    }

    #[test]
    fn heads_must_divide_dt() {
        let cfg = HarmonyConfig {
            heads: 7,
            ..HarmonyConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variant_flags_match_their_definitions() {
        let base = HarmonyConfig::default();
        let b0 = AblationVariant::B0.apply(&base);
        assert_eq!(b0.inject_mode, InjectMode::Whole);
        assert!(!b0.use_ha && !b0.use_pns);
        let b1 = AblationVariant::B1.apply(&base);
        assert_eq!(b1.inject_mode, InjectMode::Site);
        assert!(!b1.use_ha && !b1.use_pns);
        let b2 = AblationVariant::B2.apply(&base);
        assert!(!b2.use_ha && b2.use_pns);
        let b3 = AblationVariant::B3.apply(&base);
        assert!(b3.use_ha && !b3.use_pns);
        let full = AblationVariant::Full.apply(&base);
        assert!(full.use_ha && full.use_pns);
        assert_eq!(full.inject_site, BlockSite::D4);
    }

    #[test]
    fn block_site_parse_round_trips() {
        for site in BlockSite::ALL {
            assert_eq!(BlockSite::parse(site.name()).unwrap(), site);
        }
        assert!(BlockSite::parse("D9").is_err());
    }

    #[test]
    fn train_defaults_pin_published_values() {
        let cfg = TrainConfig::adapter_default();
        assert_eq!(cfg.learning_rate, 2.5e-4);
        assert_eq!(cfg.steps, 2000);
        assert_eq!(cfg.batch_size, 1);
        assert_eq!(cfg.conditional_dropout, 0.05);
    }

    #[test]
    fn model_defaults_pin_published_values() {
        let cfg = HarmonyConfig::default();
        assert_eq!(cfg.alpha, 1.0);
        assert_eq!(cfg.beta, 1.0);
        assert_eq!(cfg.guidance, 5.0);
        assert_eq!(cfg.heads, 8);
        assert_eq!(cfg.full_steps, 30);
        assert_eq!(cfg.shallow_steps, 10);
        assert_eq!(cfg.pool_size, 100);
        assert_eq!(cfg.top_k, 5);
        assert_eq!(cfg.total_steps, 1000);
        assert_eq!(cfg.inject_site, BlockSite::D4);
    }
}
