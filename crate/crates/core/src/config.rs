//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Every key can also be set
//! programmatically through [`RunConfig::set`], which is what command-line
//! overrides use.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::infer::{CONF_THRESHOLD, NMS_IOU};
use crate::eval::MATCH_IOU;
use crate::model::{Architecture, ModelVariant};
use crate::train::TrainOptions;

/// Network size preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Depth 0.33, width 0.50, input 960.
    Full,
    /// Depth 0.33, width 0.125, input 192.
    Tiny,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "tiny" => Ok(Profile::Tiny),
            _ => Err(Error::Config(format!("unknown profile `{s}` (expected full or tiny)"))),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Full => "full",
            Profile::Tiny => "tiny",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: Architecture,
    pub profile: Profile,
    /// Overrides the profile's input size.
    pub input_size: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub mosaic: bool,
    /// Dataset root (standard layout).
    pub data: Option<PathBuf>,
    /// Checkpoint written by training / read by eval and detect.
    pub checkpoint: PathBuf,
    /// Checkpoint to continue training from.
    pub resume: Option<PathBuf>,
    /// Directory for loss / precision-recall CSVs.
    pub out_dir: PathBuf,
    /// Save the checkpoint every this many epochs (0: only at the end).
    pub save_every: usize,
    /// Training-set precision/recall every this many epochs (0: never).
    pub eval_every: usize,
    /// Compute anchors from the training boxes instead of the fallback set.
    pub auto_anchors: bool,
    pub conf: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Architecture::Gbh,
            profile: Profile::Full,
            input_size: None,
            epochs: 500,
            batch_size: 16,
            lr: 0.001,
            seed: 0,
            mosaic: true,
            data: None,
            checkpoint: PathBuf::from("gbh.ckpt"),
            resume: None,
            out_dir: PathBuf::from("runs"),
            save_every: 10,
            eval_every: 10,
            auto_anchors: true,
            conf: CONF_THRESHOLD,
            nms_iou: NMS_IOU,
            match_iou: MATCH_IOU,
        }
    }
}

/// Every recognised key, in documentation order.
pub const CONFIG_KEYS: [&str; 18] = [
    "variant",
    "profile",
    "input_size",
    "epochs",
    "batch_size",
    "lr",
    "seed",
    "mosaic",
    "data",
    "checkpoint",
    "resume",
    "out_dir",
    "save_every",
    "eval_every",
    "auto_anchors",
    "conf",
    "nms_iou",
    "match_iou",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: `{value}` is not a boolean"))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "variant" => self.variant = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "profile" => self.profile = value.parse()?,
            "input_size" => self.input_size = if value == "auto" { None } else { Some(parse(key, value)?) },
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "mosaic" => self.mosaic = parse_bool(key, value)?,
            "data" => self.data = optional_path(value),
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "resume" => self.resume = optional_path(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "save_every" => self.save_every = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "auto_anchors" => self.auto_anchors = parse_bool(key, value)?,
            "conf" => self.conf = parse(key, value)?,
            "nms_iou" => self.nms_iou = parse(key, value)?,
            "match_iou" => self.match_iou = parse(key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}` (known: {})",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut c = Self::default();
        c.apply_str(&text)?;
        Ok(c)
    }

    /// Value invariants (paths are checked by the command that uses them).
    pub fn validate(&self) -> Result<()> {
        self.train_options().validate()?;
        for (k, v) in [("conf", self.conf), ("nms_iou", self.nms_iou), ("match_iou", self.match_iou)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{k} = {v} must be in (0, 1]")));
            }
        }
        self.model_variant().validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// The network this configuration describes (fallback anchors).
    pub fn model_variant(&self) -> ModelVariant {
        let v = match self.profile {
            Profile::Full => ModelVariant::new(self.variant),
            Profile::Tiny => ModelVariant::tiny(self.variant),
        };
        match self.input_size {
            Some(s) => v.with_input_size(s),
            None => v,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            mosaic: self.mosaic,
            ..TrainOptions::default()
        }
    }

    /// Serialise every key (round-trips through [`RunConfig::apply_str`]).
    pub fn to_config_string(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let mut s = String::new();
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "profile = {}", self.profile);
        let _ = writeln!(s, "input_size = {}", self.input_size.map_or("auto".to_string(), |v| v.to_string()));
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "mosaic = {}", self.mosaic);
        let _ = writeln!(s, "data = {}", path(&self.data));
        let _ = writeln!(s, "checkpoint = {}", self.checkpoint.display());
        let _ = writeln!(s, "resume = {}", path(&self.resume));
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "save_every = {}", self.save_every);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "auto_anchors = {}", self.auto_anchors);
        let _ = writeln!(s, "conf = {}", self.conf);
        let _ = writeln!(s, "nms_iou = {}", self.nms_iou);
        let _ = writeln!(s, "match_iou = {}", self.match_iou);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults() {
        let c = RunConfig::default();
        assert_eq!((c.batch_size, c.lr, c.epochs), (16, 0.001, 500));
        assert_eq!(c.model_variant().input_size, 960);
        c.validate().unwrap();
    }

    #[test]
    fn file_syntax_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_str("# tiny run\nvariant = yolov5-1\nprofile=tiny\n\nepochs = 3 # short\nmosaic = off\n").unwrap();
        assert_eq!(c.variant, Architecture::Yolov5One);
        assert_eq!(c.model_variant().input_size, 192);
        assert_eq!(c.epochs, 3);
        assert!(!c.mosaic);
        c.set("input_size", "256").unwrap();
        assert_eq!(c.model_variant().input_size, 256);
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.set("data", "/tmp/x").unwrap();
        c.set("conf", "0.3").unwrap();
        let mut back = RunConfig::default();
        back.apply_str(&c.to_config_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_str("colour = red"), Err(Error::Config(_))));
        assert!(matches!(c.apply_str("epochs = many"), Err(Error::Config(_))));
        assert!(matches!(c.apply_str("variant = yolov9"), Err(Error::Config(_))));
        assert!(matches!(c.apply_str("just words"), Err(Error::Config(_))));
        c.set("batch_size", "0").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("input_size", "100").unwrap();
        assert!(c.validate().is_err());
    }
}
