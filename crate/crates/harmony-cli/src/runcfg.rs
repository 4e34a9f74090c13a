//! Flat `key=value` configuration files, override precedence, and the
//! reproducibility record every run writes next to its outputs.
//!
//! Precedence: command-line flag > config file > built-in default. Lines
//! starting with `#` and blank lines are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use harmony_core::config::{BlockSite, InjectMode, TrainConfig};
use harmony_core::HarmonyConfig;
use serde::Serialize;

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pairs: BTreeMap<String, String>,
}

impl Overrides {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut pairs = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("{}:{}: expected key=value", path.display(), i + 1);
            };
            pairs.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { pairs })
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.pairs.insert(key.to_string(), value);
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Apply model keys; unknown keys are errors so typos cannot pass
    /// silently. Training keys are ignored here and handled by
    /// [`Overrides::apply_train`].
    pub fn apply_model(&self, cfg: &mut HarmonyConfig) -> Result<()> {
        for (key, value) in &self.pairs {
            let parse_f = || -> Result<f64> {
                value
                    .parse()
                    .with_context(|| format!("{key}: bad float {value:?}"))
            };
            let parse_u = || -> Result<usize> {
                value
                    .parse()
                    .with_context(|| format!("{key}: bad integer {value:?}"))
            };
            let parse_b = || -> Result<bool> {
                value
                    .parse()
                    .with_context(|| format!("{key}: bad bool {value:?}"))
            };
            match key.as_str() {
                "image_size" => cfg.image_size = parse_u()?,
                "attn_dim" => cfg.attn_dim = parse_u()?,
                "time_dim" => cfg.time_dim = parse_u()?,
                "d_v" => cfg.d_v = parse_u()?,
                "d_t" => cfg.d_t = parse_u()?,
                "patch" => cfg.patch = parse_u()?,
                "heads" => cfg.heads = parse_u()?,
                "alpha" => cfg.alpha = parse_f()?,
                "beta" => cfg.beta = parse_f()?,
                "guidance" => cfg.guidance = parse_f()?,
                "inject_site" => cfg.inject_site = BlockSite::parse(value)?,
                "inject_mode" => {
                    cfg.inject_mode = match value.as_str() {
                        "site" => InjectMode::Site,
                        "whole" => InjectMode::Whole,
                        other => bail!("inject_mode: expected site|whole, got {other:?}"),
                    }
                }
                "use_ha" => cfg.use_ha = parse_b()?,
                "use_pns" => cfg.use_pns = parse_b()?,
                "hidden" => {
                    cfg.hidden = value
                        .split(',')
                        .map(|v| v.trim().parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .with_context(|| format!("hidden: bad list {value:?}"))?;
                }
                "total_steps" => cfg.total_steps = parse_u()?,
                "full_steps" => cfg.full_steps = parse_u()?,
                "shallow_steps" => cfg.shallow_steps = parse_u()?,
                "pool_size" => cfg.pool_size = parse_u()?,
                "top_k" => cfg.top_k = parse_u()?,
                "detect_threshold" => cfg.detect_threshold = parse_f()?,
                "detect_min_area" => cfg.detect_min_area = parse_u()?,
                _ if TRAIN_KEYS.contains(&key.as_str()) => {}
                other => bail!("unknown config key {other:?}"),
            }
        }
        Ok(())
    }

    pub fn apply_train(&self, cfg: &mut TrainConfig) -> Result<()> {
        for (key, value) in &self.pairs {
            let parse_f = || -> Result<f64> {
                value
                    .parse()
                    .with_context(|| format!("{key}: bad float {value:?}"))
            };
            match key.as_str() {
                "learning_rate" => cfg.learning_rate = parse_f()?,
                "train_steps" => {
                    cfg.steps = value
                        .parse()
                        .with_context(|| format!("train_steps: bad integer {value:?}"))?
                }
                "conditional_dropout" => cfg.conditional_dropout = parse_f()?,
                "visual_cond_prob" => cfg.visual_cond_prob = parse_f()?,
                "weight_decay" => cfg.weight_decay = parse_f()?,
                _ => {}
            }
        }
        Ok(())
    }
}

const TRAIN_KEYS: [&str; 5] = [
    "learning_rate",
    "train_steps",
    "conditional_dropout",
    "visual_cond_prob",
    "weight_decay",
];

/// Reproducibility record: the exact command, its arguments, and the full
/// configuration that produced a run's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord<'a> {
    pub tool_version: &'static str,
    pub command: &'a str,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: &'a HarmonyConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<&'a TrainConfig>,
}

pub fn write_run_record(record: &RunRecord<'_>, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let json = serde_json::to_string_pretty(record)?;
    fs::write(out_dir.join("run.json"), json + "\n")?;
    Ok(())
}

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_apply_with_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nalpha = 0.5\nguidance=2.0\ntrain_steps=5\n").unwrap();
        let mut ov = Overrides::from_file(&path).unwrap();
        // CLI flag wins over the file
        ov.set("guidance", "7.0".to_string());
        let mut cfg = HarmonyConfig::default();
        ov.apply_model(&mut cfg).unwrap();
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.guidance, 7.0);
        let mut tc = TrainConfig::adapter_default();
        ov.apply_train(&mut tc).unwrap();
        assert_eq!(tc.steps, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut ov = Overrides::default();
        ov.set("alpa", "1.0".to_string());
        let mut cfg = HarmonyConfig::default();
        assert!(ov.apply_model(&mut cfg).is_err());
    }

    #[test]
    fn run_record_is_deterministic_json() {
        let cfg = HarmonyConfig::default();
        let rec = RunRecord {
            tool_version: TOOL_VERSION,
            command: "bench",
            args: vec!["--seed".into(), "1".into()],
            seed: 1,
            config: &cfg,
            train: None,
        };
        let a = serde_json::to_string(&rec).unwrap();
        let b = serde_json::to_string(&rec).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        write_run_record(&rec, dir.path()).unwrap();
        assert!(dir.path().join("run.json").exists());
    }
}
