//! Flat `key = value` run configuration.
//!
//! One pair per line, `#` starts a comment, values may be double-quoted.
//! Every key has a default; unknown keys are rejected. Later sources
//! override earlier ones (defaults, then the file, then command-line
//! overrides).

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::adapters::AdapterStyle;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::flow::FlowVariant;
use crate::model::ModelConfig;
use crate::params::AdamConfig;
use crate::synth::SynthConfig;
use crate::temporal::{FusionMode, TpmKind};
use crate::train::{PretrainConfig, TrainConfig};

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("image_px", "32", "frame side in pixels"),
    ("patch_px", "8", "patch side in pixels"),
    ("channels", "3", "colour channels per frame"),
    ("d_model", "64", "backbone token width"),
    ("heads", "4", "backbone attention heads"),
    ("depth", "4", "backbone blocks"),
    ("mlp_ratio", "4", "backbone MLP width multiplier"),
    ("blocks", "all", "blocks with flow adapters and temporal heads: all or e.g. 0,3"),
    ("flow", "static", "off | static | aligned"),
    ("tpm", "lstm", "lstm | tcn | tenc"),
    ("tpm_hidden", "32", "temporal unit width"),
    ("fusion", "mean", "mean | frozen-linear"),
    ("r", "16", "adapter bottleneck width"),
    ("frames", "8", "frames per clip"),
    ("categories", "4", "number of classes"),
    ("style", "parallel", "parallel | serial adapters"),
    ("align_width", "16", "aligning encoder width"),
    ("align_heads", "4", "aligning encoder heads"),
    ("lr", "0.001", "Adam learning rate"),
    ("beta1", "0.9", "Adam first-moment decay"),
    ("beta2", "0.999", "Adam second-moment decay"),
    ("eps", "1e-8", "Adam epsilon"),
    ("batch", "8", "clips per optimizer step"),
    ("epochs", "30", "training epochs"),
    ("seed", "0", "seed for initialization and data order"),
    ("freeze_backbone", "true", "keep backbone weights fixed"),
    ("threshold", "0.95", "train accuracy counted as converged"),
    ("record_time", "false", "write wall-clock seconds into metrics"),
    ("data", "", "directory of clips written by `synth`"),
    ("backbone_weights", "", "weight file of a pretrained backbone; empty for random init"),
    ("noise", "0.05", "background noise amplitude for synthesis"),
    ("jitter", "0", "camera shift amplitude in pixels for synthesis"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (*k, v.to_string())).collect(),
        }
    }
}

fn known(key: &str) -> Result<&'static str> {
    KEYS.iter()
        .map(|(k, _, _)| *k)
        .find(|k| *k == key)
        .ok_or_else(|| Error::Validation(format!("unknown config key `{key}`")))
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

impl RunConfig {
    /// Applies the lines of a config text.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Validation(format!("{origin}:{}: expected `key = value`, got `{line}`", i + 1))
            })?;
            let key = known(k.trim()).map_err(|e| Error::Validation(format!("{origin}:{}: {e}", i + 1)))?;
            self.values.insert(key, unquote(v).to_string());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut c = Self::default();
        c.apply_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    /// Applies one `key=value` override.
    pub fn set_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("override `{pair}` is not key=value")))?;
        let key = known(k.trim())?;
        self.values.insert(key, unquote(v).to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        let key = known(key)?;
        self.values.insert(key, value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Validation(format!("config key `{key}`: cannot parse `{v}`")))
    }

    fn with_key<T>(&self, key: &str, r: Result<T>) -> Result<T> {
        r.map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("config key `{key}`: {m}")),
            other => other,
        })
    }

    /// Effective configuration in the same text format, one key per line.
    pub fn echo(&self) -> String {
        KEYS.iter()
            .map(|(k, _, _)| format!("{k} = \"{}\"\n", self.get(k)))
            .collect()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let config = ModelConfig {
            backbone: BackboneConfig {
                image_px: self.parse("image_px")?,
                patch_px: self.parse("patch_px")?,
                channels: self.parse("channels")?,
                d_model: self.parse("d_model")?,
                heads: self.parse("heads")?,
                blocks: self.parse("depth")?,
                mlp_ratio: self.parse("mlp_ratio")?,
            },
            blocks: self.get("blocks").to_string(),
            flow: self.with_key("flow", FlowVariant::parse(self.get("flow")))?,
            tpm: self.with_key("tpm", TpmKind::parse(self.get("tpm")))?,
            tpm_hidden: self.parse("tpm_hidden")?,
            fusion: self.with_key("fusion", FusionMode::parse(self.get("fusion")))?,
            r: self.parse("r")?,
            frames: self.parse("frames")?,
            categories: self.parse("categories")?,
            style: self.with_key("style", AdapterStyle::parse(self.get("style")))?,
            align_width: self.parse("align_width")?,
            align_heads: self.parse("align_heads")?,
        };
        config.validate()?;
        Ok(config)
    }

    fn adam(&self) -> Result<AdamConfig> {
        Ok(AdamConfig {
            lr: self.parse("lr")?,
            beta1: self.parse("beta1")?,
            beta2: self.parse("beta2")?,
            eps: self.parse("eps")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let config = TrainConfig {
            adam: self.adam()?,
            batch: self.parse("batch")?,
            epochs: self.parse("epochs")?,
            seed: self.parse("seed")?,
            freeze_backbone: self.parse("freeze_backbone")?,
            threshold: self.parse("threshold")?,
            record_time: self.parse("record_time")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        Ok(PretrainConfig {
            adam: self.adam()?,
            batch: self.parse("batch")?,
            epochs: self.parse("epochs")?,
            seed: self.parse("seed")?,
        })
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let config = SynthConfig {
            frames: self.parse("frames")?,
            image_px: self.parse("image_px")?,
            channels: self.parse("channels")?,
            patch_px: self.parse("patch_px")?,
            noise: self.parse("noise")?,
            jitter: self.parse("jitter")?,
        };
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_the_default_model() {
        let c = RunConfig::default();
        assert_eq!(c.model_config().unwrap(), ModelConfig::default());
        assert_eq!(c.train_config().unwrap(), TrainConfig::default());
        assert_eq!(c.synth_config().unwrap(), SynthConfig::default());
    }

    #[test]
    fn file_then_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nflow = \"off\"\nblocks = 0,3 # trailing\n\n", "t").unwrap();
        c.set_override("flow=aligned").unwrap();
        let m = c.model_config().unwrap();
        assert_eq!(m.flow, FlowVariant::Aligned);
        assert_eq!(m.blocks, "0,3");
        let mut again = RunConfig::default();
        again.apply_text(&c.echo(), "echo").unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn errors_name_the_key() {
        let mut c = RunConfig::default();
        let e = c.apply_text("colour = red", "f.cfg").unwrap_err().to_string();
        assert!(e.contains("colour") && e.contains("f.cfg:1"), "{e}");
        c.set_override("lr=fast").unwrap();
        let e = c.train_config().unwrap_err().to_string();
        assert!(e.contains("lr"), "{e}");
        let mut c = RunConfig::default();
        c.set_override("tpm=gru").unwrap();
        let e = c.model_config().unwrap_err().to_string();
        assert!(e.contains("tpm"), "{e}");
        assert!(RunConfig::default().set_override("nokey").is_err());
    }
}
