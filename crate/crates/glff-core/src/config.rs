//! Model configuration, presets and ablation variants.

use crate::amsff::AttentionConfig;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::psm::{PsmConfig, WindowSpec};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Architecture ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Variant {
    #[default]
    Full,
    /// Classify from the global embedding alone.
    GlobalOnly,
    /// Classify from the local embeddings alone.
    LocalOnly,
    /// Replace patch selection with seeded random windows (no suppression).
    NoPsm,
    /// Feed the raw deep tap wherever the fused map is consumed.
    NoAmsff,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::GlobalOnly => "global_only",
            Variant::LocalOnly => "local_only",
            Variant::NoPsm => "no_psm",
            Variant::NoAmsff => "no_amsff",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "global_only" => Ok(Variant::GlobalOnly),
            "local_only" => Ok(Variant::LocalOnly),
            "no_psm" => Ok(Variant::NoPsm),
            "no_amsff" => Ok(Variant::NoAmsff),
            other => Err(Error::config(format!("unknown variant: {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub embed_dim: usize,
    pub backbone: BackboneConfig,
    /// Multi-scale fusion attention. `model_dim = 0` means "derive from the
    /// deep tap's channel count", which is also the only valid explicit
    /// value (the fused map keeps the deep tap's channels).
    pub amsff: AttentionConfig,
    /// Global/local fusion attention over `embed_dim`-wide tokens.
    pub fusion: AttentionConfig,
    pub psm: PsmConfig,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
    pub seed: u64,
    pub variant: Variant,
}

impl ModelConfig {
    /// Full-scale preset: 224 input, ResNet-50 widths, 3-layer 4-head
    /// attention, 128-wide embeddings, 3+3 patches.
    pub fn full(seed: u64) -> Self {
        let mut backbone = BackboneConfig::default();
        backbone.seed = seed;
        ModelConfig {
            input_size: 224,
            embed_dim: 128,
            backbone,
            amsff: AttentionConfig::new(3, 4, 0),
            fusion: AttentionConfig::new(3, 4, 128),
            psm: PsmConfig::default_for_224(),
            norm_mean: [0.485, 0.456, 0.406],
            norm_std: [0.229, 0.224, 0.225],
            seed,
            variant: Variant::Full,
        }
    }

    /// Desk-scale preset: 96 input, narrow backbone, 2+2 patches. Same
    /// architecture, small enough to train on a CPU in seconds.
    pub fn tiny(seed: u64) -> Self {
        ModelConfig {
            input_size: 96,
            embed_dim: 128,
            backbone: BackboneConfig::tiny(seed),
            amsff: AttentionConfig::new(3, 4, 0),
            fusion: AttentionConfig::new(3, 4, 128),
            psm: PsmConfig::tiny_for_96(),
            norm_mean: [0.485, 0.456, 0.406],
            norm_std: [0.229, 0.224, 0.225],
            seed,
            variant: Variant::Full,
        }
    }

    /// Channel count of the configured deep tap.
    pub fn deep_channels(&self) -> usize {
        self.backbone.stage_channels(self.backbone.deep_stage)
    }

    /// Side length of the configured deep tap's feature map.
    pub fn deep_spatial(&self) -> usize {
        self.backbone.stage_spatial(self.input_size, self.backbone.deep_stage)
    }

    /// Validates the configuration and fills derived fields.
    pub fn finalize(mut self) -> Result<Self> {
        self.backbone.validate()?;
        if self.input_size % 32 != 0 || self.input_size == 0 {
            return Err(Error::config(format!(
                "input size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        let c_high = self.deep_channels();
        if self.amsff.model_dim == 0 {
            self.amsff.model_dim = c_high;
        } else if self.amsff.model_dim != c_high {
            return Err(Error::config(format!(
                "fusion width {} must equal the deep tap channels {c_high}",
                self.amsff.model_dim
            )));
        }
        self.amsff.validate()?;
        if self.fusion.model_dim != self.embed_dim {
            return Err(Error::config(format!(
                "fusion-head width {} must equal embed_dim {}",
                self.fusion.model_dim, self.embed_dim
            )));
        }
        self.fusion.validate()?;
        let shallow_sp = self
            .backbone
            .stage_spatial(self.input_size, self.backbone.shallow_stage);
        let deep_sp = self.deep_spatial();
        if deep_sp == 0 || shallow_sp % deep_sp != 0 {
            return Err(Error::config(format!(
                "shallow map {shallow_sp} not divisible by deep map {deep_sp}"
            )));
        }
        self.psm.validate(deep_sp, deep_sp)?;
        if self.psm.input_size != self.input_size {
            return Err(Error::config(format!(
                "patch-selection input size {} disagrees with model input size {}",
                self.psm.input_size, self.input_size
            )));
        }
        Ok(self)
    }

    /// Applies a variant specification from the ablation CLI:
    /// `global_only | local_only | no_psm | no_amsff | stage:<s>,<d>` or
    /// `windows:<HxW>:<count>[,...]`.
    pub fn apply_variant_spec(mut self, spec: &str) -> Result<Self> {
        if let Some(stages) = spec.strip_prefix("stage:") {
            let parts: Vec<&str> = stages.split(',').collect();
            if parts.len() != 2 {
                return Err(Error::config(format!("stage spec needs two indices: {spec}")));
            }
            let s: usize = parts[0]
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("bad stage index: {}", parts[0])))?;
            let d: usize = parts[1]
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("bad stage index: {}", parts[1])))?;
            self.backbone.shallow_stage = s;
            self.backbone.deep_stage = d;
            self.amsff.model_dim = 0; // re-derive from the new deep tap
            return self.finalize();
        }
        if let Some(windows) = spec.strip_prefix("windows:") {
            let mut specs = Vec::new();
            for entry in windows.split(',') {
                let fields: Vec<&str> = entry.split(':').collect();
                if fields.len() < 2 || fields.len() > 3 {
                    return Err(Error::config(format!("bad window entry: {entry}")));
                }
                let dims: Vec<&str> = fields[0].split('x').collect();
                if dims.len() != 2 {
                    return Err(Error::config(format!("bad window size: {}", fields[0])));
                }
                let h: usize = dims[0].parse().map_err(|_| Error::config("bad window height"))?;
                let w: usize = dims[1].parse().map_err(|_| Error::config("bad window width"))?;
                let count: usize = fields[1].parse().map_err(|_| Error::config("bad window count"))?;
                let crop = if fields.len() == 3 {
                    fields[2].parse().map_err(|_| Error::config("bad crop size"))?
                } else if h >= 3 {
                    // larger windows map to full-resolution crops, smaller
                    // windows to half-resolution crops
                    self.input_size
                } else {
                    self.input_size / 2
                };
                specs.push(WindowSpec::new(h, w, count, crop));
            }
            self.psm.windows = specs;
            return self.finalize();
        }
        self.variant = spec.parse()?;
        self.finalize()
    }
}

/// Flat `key=value` configuration file covering the training and model
/// settings; unknown keys are rejected. Later lines win; `#` starts a
/// comment.
pub fn parse_flat_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(format!(
                "config line {} is not key=value: {raw}",
                lineno + 1
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn load_flat_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_flat_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_preset_is_valid_and_derives_width() {
        let cfg = ModelConfig::full(0).finalize().unwrap();
        assert_eq!(cfg.amsff.model_dim, 2048);
        assert_eq!(cfg.deep_spatial(), 7);
        assert_eq!(cfg.psm.total_count(), 6);
    }

    #[test]
    fn tiny_preset_is_valid() {
        let cfg = ModelConfig::tiny(0).finalize().unwrap();
        assert_eq!(cfg.amsff.model_dim, 256);
        assert_eq!(cfg.deep_spatial(), 3);
        assert_eq!(cfg.psm.total_count(), 4);
    }

    #[test]
    fn stage_override_re_derives_width() {
        let cfg = ModelConfig::full(0).apply_variant_spec("stage:2,4").unwrap();
        assert_eq!(cfg.backbone.shallow_stage, 2);
        assert_eq!(cfg.backbone.deep_stage, 4);
        assert_eq!(cfg.amsff.model_dim, 1024);
        assert_eq!(cfg.deep_spatial(), 14);
    }

    #[test]
    fn windows_override_parses_table_style_spec() {
        let cfg = ModelConfig::full(0)
            .apply_variant_spec("windows:5x5:3,3x3:3")
            .unwrap();
        assert_eq!(cfg.psm.windows.len(), 2);
        assert_eq!(cfg.psm.windows[0], WindowSpec::new(5, 5, 3, 224));
        assert_eq!(cfg.psm.windows[1], WindowSpec::new(3, 3, 3, 224));
    }

    #[test]
    fn named_variants_parse() {
        for (s, v) in [
            ("global_only", Variant::GlobalOnly),
            ("local_only", Variant::LocalOnly),
            ("no_psm", Variant::NoPsm),
            ("no_amsff", Variant::NoAmsff),
        ] {
            let cfg = ModelConfig::tiny(1).apply_variant_spec(s).unwrap();
            assert_eq!(cfg.variant, v);
        }
        assert!(ModelConfig::tiny(1).apply_variant_spec("bogus").is_err());
    }

    #[test]
    fn invalid_explicit_width_rejected() {
        let mut cfg = ModelConfig::full(0);
        cfg.amsff.model_dim = 512;
        assert!(cfg.finalize().is_err());
    }

    #[test]
    fn flat_config_parsing() {
        let m = parse_flat_config("a=1\n# comment\n\nbatch_size = 64\nlr=0.0001\n").unwrap();
        assert_eq!(m.get("a").unwrap(), "1");
        assert_eq!(m.get("batch_size").unwrap(), "64");
        assert!(parse_flat_config("nonsense").is_err());
    }
}
