//! Run configuration: flat `key = value` text with `#` comments, no
//! nesting. Unknown keys, duplicate keys and out-of-range values are
//! rejected with the offending line number.

use std::fmt;
use std::path::Path;

use scanfer_core::data::{AugmentPolicy, RebalanceMode};
use scanfer_core::model::{BackboneConfig, ModelConfig};
use scanfer_core::optim::{FitConfig, SgdConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preset::Desk => write!(f, "desk"),
            Preset::Paper => write!(f, "paper"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub input_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub cci_blocks: usize,
    pub lambda: f64,
    pub eca_kernel: Option<usize>,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: bool,
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub rebalance: Option<RebalanceMode>,
    pub rebalance_cap: Option<usize>,
    pub train_manifest: Option<String>,
    pub val_manifest: Option<String>,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            preset: Preset::Desk,
            input_size: 40,
            grid_rows: 5,
            grid_cols: 5,
            cci_blocks: 4,
            lambda: 0.2,
            eca_kernel: None,
            lr_backbone: 1e-4,
            lr_heads: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-3,
            lr_decay: 0.95,
            epochs: 20,
            batch_size: 64,
            augment: true,
            flip: true,
            brightness: 0.4,
            contrast: 0.3,
            saturation: 0.25,
            hue: 0.05,
            rebalance: None,
            rebalance_cap: None,
            train_manifest: None,
            val_manifest: None,
            out_dir: "out".into(),
        }
    }
}

#[derive(Debug)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub detail: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "config line {line}: {}", self.detail),
            None => write!(f, "config: {}", self.detail),
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(line: usize, detail: impl Into<String>) -> ConfigError {
    ConfigError {
        line: Some(line),
        detail: detail.into(),
    }
}

impl RunConfig {
    /// Parse configuration text over the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = RunConfig::default();
        let mut preset_line: Option<usize> = None;
        let mut seen: Vec<String> = Vec::new();
        let mut pending: Vec<(usize, String, String)> = Vec::new();

        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(lineno, format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() || value.is_empty() {
                return Err(err(lineno, "empty key or value"));
            }
            if seen.contains(&key) {
                return Err(err(lineno, format!("duplicate key {key:?}")));
            }
            seen.push(key.clone());
            if key == "preset" {
                preset_line = Some(lineno);
            }
            pending.push((lineno, key, value));
        }

        // apply the preset first so explicit keys can override its defaults
        if let Some(lineno) = preset_line {
            let value = &pending.iter().find(|(_, k, _)| k == "preset").unwrap().2;
            config.apply_preset(value).map_err(|d| err(lineno, d))?;
        }
        for (lineno, key, value) in &pending {
            if key == "preset" {
                continue;
            }
            config.apply(key, value).map_err(|d| err(*lineno, d))?;
        }
        config.validate().map_err(|d| ConfigError { line: None, detail: d })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: None,
            detail: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    fn apply_preset(&mut self, value: &str) -> Result<(), String> {
        match value {
            "desk" => {
                self.preset = Preset::Desk;
                self.input_size = 40;
            }
            "paper" => {
                self.preset = Preset::Paper;
                self.input_size = 224;
            }
            other => return Err(format!("unknown preset {other:?} (expected desk|paper)")),
        }
        Ok(())
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn int(value: &str) -> Result<usize, String> {
            value.parse().map_err(|_| format!("{value:?} is not a non-negative integer"))
        }
        fn real(value: &str) -> Result<f64, String> {
            let v: f64 = value.parse().map_err(|_| format!("{value:?} is not a number"))?;
            if !v.is_finite() {
                return Err(format!("{value:?} is not finite"));
            }
            Ok(v)
        }
        fn flag(value: &str) -> Result<bool, String> {
            match value {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                other => Err(format!("{other:?} is not a boolean (true/false)")),
            }
        }
        match key {
            "seed" => self.seed = value.parse().map_err(|_| format!("{value:?} is not a seed"))?,
            "input_size" => self.input_size = int(value)?,
            "grid_rows" => self.grid_rows = int(value)?,
            "grid_cols" => self.grid_cols = int(value)?,
            "cci_blocks" => self.cci_blocks = int(value)?,
            "lambda" => self.lambda = real(value)?,
            "eca_kernel" => self.eca_kernel = Some(int(value)?),
            "lr_backbone" => self.lr_backbone = real(value)?,
            "lr_heads" => self.lr_heads = real(value)?,
            "momentum" => self.momentum = real(value)?,
            "weight_decay" => self.weight_decay = real(value)?,
            "lr_decay" => self.lr_decay = real(value)?,
            "epochs" => self.epochs = int(value)?,
            "batch_size" => self.batch_size = int(value)?,
            "augment" => self.augment = flag(value)?,
            "flip" => self.flip = flag(value)?,
            "brightness" => self.brightness = real(value)?,
            "contrast" => self.contrast = real(value)?,
            "saturation" => self.saturation = real(value)?,
            "hue" => self.hue = real(value)?,
            "rebalance" => {
                self.rebalance = match value {
                    "none" => None,
                    "oversample" => Some(RebalanceMode::Oversample),
                    "undersample" => Some(RebalanceMode::Undersample),
                    other => {
                        return Err(format!(
                            "unknown rebalance mode {other:?} (none|oversample|undersample)"
                        ))
                    }
                }
            }
            "rebalance_cap" => self.rebalance_cap = Some(int(value)?),
            "train_manifest" => self.train_manifest = Some(value.to_string()),
            "val_manifest" => self.val_manifest = Some(value.to_string()),
            "out_dir" => self.out_dir = value.to_string(),
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(format!("lambda {} outside [0,1]", self.lambda));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum {} outside [0,1)", self.momentum));
        }
        if self.lr_backbone <= 0.0 || self.lr_heads <= 0.0 || self.lr_decay <= 0.0 {
            return Err("learning rates and decay must be positive".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if self.grid_rows == 0 || self.grid_cols == 0 || self.cci_blocks == 0 {
            return Err("grid dimensions must be positive".into());
        }
        if let Some(cap) = self.rebalance_cap {
            if cap == 0 {
                return Err("rebalance_cap must be at least 1".into());
            }
        }
        for (name, bound) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if !(0.0..=1.0).contains(&bound) {
                return Err(format!("{name} {bound} outside [0,1]"));
            }
        }
        if let Some(k) = self.eca_kernel {
            if k == 0 || k % 2 == 0 {
                return Err(format!("eca_kernel must be odd and positive, got {k}"));
            }
        }
        Ok(())
    }

    /// Canonical serialization; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("preset = {}\n", self.preset));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("input_size = {}\n", self.input_size));
        out.push_str(&format!("grid_rows = {}\n", self.grid_rows));
        out.push_str(&format!("grid_cols = {}\n", self.grid_cols));
        out.push_str(&format!("cci_blocks = {}\n", self.cci_blocks));
        out.push_str(&format!("lambda = {}\n", self.lambda));
        if let Some(k) = self.eca_kernel {
            out.push_str(&format!("eca_kernel = {k}\n"));
        }
        out.push_str(&format!("lr_backbone = {}\n", self.lr_backbone));
        out.push_str(&format!("lr_heads = {}\n", self.lr_heads));
        out.push_str(&format!("momentum = {}\n", self.momentum));
        out.push_str(&format!("weight_decay = {}\n", self.weight_decay));
        out.push_str(&format!("lr_decay = {}\n", self.lr_decay));
        out.push_str(&format!("epochs = {}\n", self.epochs));
        out.push_str(&format!("batch_size = {}\n", self.batch_size));
        out.push_str(&format!("augment = {}\n", self.augment));
        out.push_str(&format!("flip = {}\n", self.flip));
        out.push_str(&format!("brightness = {}\n", self.brightness));
        out.push_str(&format!("contrast = {}\n", self.contrast));
        out.push_str(&format!("saturation = {}\n", self.saturation));
        out.push_str(&format!("hue = {}\n", self.hue));
        out.push_str(&format!(
            "rebalance = {}\n",
            match self.rebalance {
                None => "none",
                Some(RebalanceMode::Oversample) => "oversample",
                Some(RebalanceMode::Undersample) => "undersample",
            }
        ));
        if let Some(cap) = self.rebalance_cap {
            out.push_str(&format!("rebalance_cap = {cap}\n"));
        }
        if let Some(path) = &self.train_manifest {
            out.push_str(&format!("train_manifest = {path}\n"));
        }
        if let Some(path) = &self.val_manifest {
            out.push_str(&format!("val_manifest = {path}\n"));
        }
        out.push_str(&format!("out_dir = {}\n", self.out_dir));
        out
    }

    /// Backbone geometry for the selected preset, with the configured input
    /// size applied.
    pub fn backbone(&self) -> BackboneConfig {
        let mut backbone = match self.preset {
            Preset::Desk => BackboneConfig::desk(),
            Preset::Paper => BackboneConfig::paper(),
        };
        backbone.input_size = self.input_size;
        backbone
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone(),
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            cci_blocks: self.cci_blocks,
            lambda: self.lambda,
            eca_kernel: self.eca_kernel,
            ..ModelConfig::default()
        }
    }

    pub fn augment_policy(&self) -> Option<AugmentPolicy> {
        if !self.augment {
            return None;
        }
        Some(AugmentPolicy {
            flip: self.flip,
            brightness: self.brightness,
            contrast: self.contrast,
            saturation: self.saturation,
            hue: self.hue,
        })
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            sgd: SgdConfig {
                lr_backbone: self.lr_backbone,
                lr_heads: self.lr_heads,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
                lr_decay: self.lr_decay,
            },
            augment: self.augment_policy(),
        }
    }
}
