//! Run configuration, read from TOML. Every key has a default; a file only
//! needs the keys it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::captioner::{Ablation, DecoderConfig};
use crate::datagen::GeneratorSpec;
use crate::error::{read_text, write_file, Error, Result};
use crate::localizer::LocalizerConfig;
use crate::metagraph::MetaGraphConfig;
use crate::metalearner::MetaLearnerConfig;
use crate::scenegraph::SceneConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub key_frames: usize,
    pub concept_classes: usize,
    pub min_count: usize,
    pub holdout_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            key_frames: 10,
            concept_classes: 60,
            min_count: 1,
            holdout_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScstConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
}

impl Default for ScstConfig {
    fn default() -> Self {
        Self {
            steps: 0,
            batch_size: 16,
            learning_rate: 8e-5,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub generator: GeneratorSpec,
    pub data: DataConfig,
    pub meta: MetaLearnerConfig,
    pub localizer: LocalizerConfig,
    pub graph: MetaGraphConfig,
    pub scene: SceneConfig,
    pub decoder: DecoderConfig,
    pub scst: ScstConfig,
    pub ablation: Ablation,
}

impl Config {
    /// Small dimensions and larger learning rates for CPU-sized runs.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.meta = MetaLearnerConfig {
            attn_dim: 32,
            hidden: 48,
            embed_dim: 24,
            align_dim: 32,
            batch_size: 16,
            learning_rate: 1e-2,
            epochs: 40,
            ..Default::default()
        };
        c.localizer = LocalizerConfig {
            hidden: 24,
            learning_rate: 1e-2,
            epochs: 15,
            ..Default::default()
        };
        c.graph.out_dim = 32;
        c.scene = SceneConfig {
            node_dim: 16,
            gat_hidden: 4,
            gat_heads: 4,
            out_dim: 16,
            transformer_heads: 4,
            transformer_ffn: 32,
            ..Default::default()
        };
        c.decoder = DecoderConfig {
            word_dim: 24,
            proj_dim: 24,
            hidden: 64,
            learning_rate: 1e-2,
            batch_size: 16,
            max_len: 12,
            epochs: 40,
            ..Default::default()
        };
        c.scst = ScstConfig {
            steps: 0,
            batch_size: 8,
            learning_rate: 5e-4,
            temperature: 1.0,
        };
        c
    }

    pub fn parse(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::parse("config", e.message()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_toml())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data.key_frames", self.data.key_frames),
            ("data.concept_classes", self.data.concept_classes),
            ("meta.frames_sampled", self.meta.frames_sampled),
            ("meta.batch_size", self.meta.batch_size),
            ("localizer.batch_size", self.localizer.batch_size),
            ("decoder.batch_size", self.decoder.batch_size),
            ("decoder.beam", self.decoder.beam),
            ("decoder.max_len", self.decoder.max_len),
            ("scene.gat_heads", self.scene.gat_heads),
            ("scene.transformer_heads", self.scene.transformer_heads),
            ("scst.batch_size", self.scst.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be at least 1")));
            }
        }
        if self.meta.frames_sampled > self.data.key_frames {
            return Err(Error::validation("meta.frames_sampled exceeds data.key_frames"));
        }
        if self.scene.out_dim % self.scene.transformer_heads != 0 {
            return Err(Error::validation(
                "scene.out_dim must be divisible by scene.transformer_heads",
            ));
        }
        if !(0.0..1.0).contains(&self.data.holdout_fraction) {
            return Err(Error::validation("data.holdout_fraction must be in [0, 1)"));
        }
        for (name, v) in [
            ("generator.cell_noise", self.generator.cell_noise),
            ("generator.context_noise", self.generator.context_noise),
            ("meta.lambda", self.meta.lambda),
            ("meta.margin", self.meta.margin),
            ("meta.mask_threshold", self.meta.mask_threshold),
            ("localizer.threshold", self.localizer.threshold),
            ("localizer.region_ratio", self.localizer.region_ratio),
            ("scene.tau_cos", self.scene.tau_cos),
            ("scene.tau_iou", self.scene.tau_iou),
            ("decoder.clip_norm", self.decoder.clip_norm),
        ] {
            if !v.is_finite() {
                return Err(Error::validation(format!("{name} must be finite")));
            }
        }
        if self.meta.lambda < 0.0 || self.meta.margin < 0.0 {
            return Err(Error::validation("meta.lambda and meta.margin must be non-negative"));
        }
        if !(self.scst.temperature > 0.0) {
            return Err(Error::validation("scst.temperature must be positive"));
        }
        for (name, lr) in [
            ("meta", self.meta.learning_rate),
            ("localizer", self.localizer.learning_rate),
            ("decoder", self.decoder.learning_rate),
            ("scst", self.scst.learning_rate),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::validation(format!("{name}.learning_rate must be positive")));
            }
        }
        self.generator.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_dimensions() {
        let c = Config::default();
        assert_eq!(c.data.key_frames, 10);
        assert_eq!(c.data.concept_classes, 60);
        assert_eq!(c.meta.hidden, 512);
        assert_eq!(c.meta.lambda, 0.5);
        assert_eq!(c.meta.margin, 0.3);
        assert_eq!(c.meta.batch_size, 60);
        assert_eq!(c.meta.learning_rate, 4e-4);
        assert_eq!(c.localizer.batch_size, 8);
        assert_eq!(c.localizer.learning_rate, 0.05);
        assert_eq!(c.graph.knn_j, 3);
        assert_eq!(c.graph.out_dim, 256);
        assert_eq!((c.scene.gat_hidden, c.scene.gat_heads, c.scene.out_dim), (8, 8, 256));
        assert_eq!(c.scene.transformer_heads, 4);
        assert_eq!((c.decoder.word_dim, c.decoder.proj_dim), (512, 512));
        assert_eq!(c.decoder.batch_size, 32);
        assert_eq!(c.decoder.learning_rate, 8e-5);
        assert_eq!(c.decoder.beam, 5);
    }

    #[test]
    fn partial_file_overrides() {
        let c = Config::parse("seed = 9\n[graph]\nknn_j = 5\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.graph.knn_j, 5);
        assert_eq!(c.decoder, DecoderConfig::default());
    }

    #[test]
    fn roundtrip_and_errors() {
        let c = Config::desk();
        assert_eq!(Config::parse(&c.to_toml()).unwrap(), c);
        assert!(Config::parse("bogus = 1").is_err());
        assert!(Config::parse("[decoder]\nbeam = 0").is_err());
        assert!(Config::parse("[data]\nkey_frames = \"ten\"").is_err());
    }
}
