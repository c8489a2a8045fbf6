//! JSON run configuration. Unknown keys are errors: silent config typos
//! are the top cause of irreproducible runs.

use crate::error::{BicoError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

fn d_model_default() -> usize {
    64
}
fn n_blocks_default() -> usize {
    6
}
fn n_heads_default() -> usize {
    4
}
fn patch_t_default() -> usize {
    2
}
fn patch_hw_default() -> usize {
    4
}
fn t_default() -> usize {
    8
}
fn hw_default() -> usize {
    16
}
fn l_max_default() -> usize {
    12
}
fn mlp_ratio_default() -> usize {
    4
}
fn alpha_default() -> f64 {
    0.875
}
fn lr_default() -> f64 {
    1e-4
}
fn iters_default() -> usize {
    1200
}
fn pretrain_steps_default() -> usize {
    20_000
}
fn pretrain_lr_default() -> f64 {
    3e-4
}
fn batch_default() -> usize {
    8
}
fn steps_default() -> usize {
    32
}
fn hue_tol_default() -> f64 {
    15.0
}
fn motion_cos_default() -> f64 {
    0.7
}
fn iou_min_default() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_model_default")]
    pub d_model: usize,
    #[serde(default = "n_blocks_default")]
    pub n_blocks: usize,
    #[serde(default = "n_heads_default")]
    pub n_heads: usize,
    #[serde(default = "patch_t_default")]
    pub patch_t: usize,
    #[serde(default = "patch_hw_default")]
    pub patch_h: usize,
    #[serde(default = "patch_hw_default")]
    pub patch_w: usize,
    /// Desk-scale clip length. Full-scale systems run far longer clips
    /// (81 frames is a common inference default); this artifact keeps the
    /// whole pipeline CPU-sized.
    #[serde(rename = "T", default = "t_default")]
    pub t: usize,
    #[serde(rename = "H", default = "hw_default")]
    pub h: usize,
    #[serde(rename = "W", default = "hw_default")]
    pub w: usize,
    #[serde(rename = "L_max", default = "l_max_default")]
    pub l_max: usize,
    #[serde(default = "mlp_ratio_default")]
    pub mlp_ratio: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Noise level threshold separating high from low noise.
    #[serde(default = "alpha_default")]
    pub alpha: f64,
    /// Binding learning rate.
    #[serde(default = "lr_default")]
    pub lr: f64,
    /// Iterations of the global-binder-only (inverted) sub-stage.
    #[serde(default = "iters_default")]
    pub iters_sub1: usize,
    /// Iterations of the all-binders (uniform) sub-stage. The two
    /// sub-stages together make one 2400-iteration phase.
    #[serde(default = "iters_default")]
    pub iters_sub2: usize,
    #[serde(default = "pretrain_steps_default")]
    pub pretrain_steps: usize,
    #[serde(default = "pretrain_lr_default")]
    pub pretrain_lr: f64,
    #[serde(default = "batch_default")]
    pub batch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    #[serde(default = "steps_default")]
    pub steps: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            steps: steps_default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "hue_tol_default")]
    pub hue_tol_deg: f64,
    #[serde(default = "motion_cos_default")]
    pub motion_cos_min: f64,
    #[serde(default = "iou_min_default")]
    pub iou_min: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub seed: u64,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config =
            serde_json::from_str(&text).map_err(|e| BicoError::InvalidConfig {
                reason: format!("{}: {e}", path.display()),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file, or the built-in defaults for the literal
    /// argument `default`.
    pub fn load_or_default(arg: &str) -> Result<Config> {
        if arg == "default" {
            let cfg = Config::default();
            cfg.validate()?;
            return Ok(cfg);
        }
        Config::load(Path::new(arg))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(BicoError::InvalidConfig { reason });
        let m = &self.model;
        for (name, v) in [
            ("d_model", m.d_model),
            ("n_blocks", m.n_blocks),
            ("n_heads", m.n_heads),
            ("patch_t", m.patch_t),
            ("patch_h", m.patch_h),
            ("patch_w", m.patch_w),
            ("T", m.t),
            ("H", m.h),
            ("W", m.w),
            ("L_max", m.l_max),
            ("mlp_ratio", m.mlp_ratio),
            ("batch", self.train.batch),
            ("steps", self.sample.steps),
        ] {
            if v == 0 {
                return fail(format!("model.{name} must be positive"));
            }
        }
        if !(self.train.alpha > 0.0 && self.train.alpha < 1.0) {
            return fail(format!("train.alpha {} outside (0,1)", self.train.alpha));
        }
        if m.t % m.patch_t != 0 || m.h % m.patch_h != 0 || m.w % m.patch_w != 0 {
            return fail("T/H/W must be divisible by patch_t/patch_h/patch_w".to_string());
        }
        if m.d_model % m.n_heads != 0 {
            return fail("d_model must be divisible by n_heads".to_string());
        }
        if self.train.lr <= 0.0 || self.train.pretrain_lr <= 0.0 {
            return fail("learning rates must be positive".to_string());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_contract() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(c.model.d_model, 64);
        assert_eq!(c.model.n_blocks, 6);
        assert_eq!(c.model.n_heads, 4);
        assert_eq!((c.model.patch_t, c.model.patch_h, c.model.patch_w), (2, 4, 4));
        assert_eq!((c.model.t, c.model.h, c.model.w), (8, 16, 16));
        assert_eq!(c.model.l_max, 12);
        assert_eq!(c.model.mlp_ratio, 4);
        assert_eq!(c.train.alpha, 0.875);
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.train.iters_sub1 + c.train.iters_sub2, 2400);
        assert_eq!(c.train.pretrain_steps, 20_000);
        assert_eq!(c.train.pretrain_lr, 3e-4);
        assert_eq!(c.train.batch, 8);
        assert_eq!(c.sample.steps, 32);
        assert_eq!(c.eval.hue_tol_deg, 15.0);
        assert_eq!(c.eval.motion_cos_min, 0.7);
        assert_eq!(c.eval.iou_min, 0.5);
    }

    #[test]
    fn unknown_keys_fail_closed() {
        let json = r#"{"model": {"d_model": 32, "definitely_a_typo": 1}}"#;
        let res: std::result::Result<Config, _> = serde_json::from_str(json);
        assert!(res.is_err());
        let json2 = r#"{"mode": {}}"#;
        let res2: std::result::Result<Config, _> = serde_json::from_str(json2);
        assert!(res2.is_err());
    }

    #[test]
    fn exact_key_names_in_output() {
        let c = Config::default();
        let v = serde_json::to_value(&c).unwrap();
        assert!(v["model"].get("T").is_some());
        assert!(v["model"].get("H").is_some());
        assert!(v["model"].get("W").is_some());
        assert!(v["model"].get("L_max").is_some());
        assert!(v["train"].get("alpha").is_some());
        assert!(v["eval"].get("hue_tol_deg").is_some());
    }

    #[test]
    fn alpha_bounds_enforced() {
        let mut c = Config::default();
        c.train.alpha = 1.0;
        assert!(c.validate().is_err());
        c.train.alpha = 0.0;
        assert!(c.validate().is_err());
    }
}
