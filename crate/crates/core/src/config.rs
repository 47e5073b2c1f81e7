use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::DEFAULT_WIDTHS;
use crate::inversion::{DistanceKind, DEFAULT_PERCEPTUAL_WEIGHT, DEFAULT_STEPS};

/// Every knob of a pipeline run. Unset fields take their defaults, so a
/// config file may list only what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub source_path: Option<PathBuf>,
    pub target_path: Option<PathBuf>,
    pub output_dir: PathBuf,

    /// Seeds hypothesis initialization, crop sampling and reference samples.
    pub master_seed: u64,

    pub extractor_seed: u64,
    pub extractor_widths: Vec<usize>,
    /// Use a second, differently seeded extractor for the target domain.
    pub separate_extractors: bool,

    pub warp_temperature: f64,
    pub warp_epsilon: f64,

    pub generator_seed: u64,
    pub generator_layers: usize,
    pub latent_dim: usize,
    pub base_resolution: usize,

    pub layers: Vec<usize>,
    pub code_count: usize,
    pub steps: usize,
    pub distance: DistanceKind,
    pub perceptual_weight: f64,
    pub learning_rate: f64,
    pub factor: usize,

    pub fid_crops: usize,
    pub fid_embed_size: usize,
    pub reference_samples: usize,
    /// When set, reference statistics come from the images in this directory
    /// instead of generator samples.
    pub reference_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            source_path: None,
            target_path: None,
            output_dir: PathBuf::from("out"),
            master_seed: 0,
            extractor_seed: 1,
            extractor_widths: DEFAULT_WIDTHS.to_vec(),
            separate_extractors: false,
            warp_temperature: 100.0,
            warp_epsilon: 1e-8,
            generator_seed: 7,
            generator_layers: 6,
            latent_dim: 32,
            base_resolution: 4,
            layers: vec![2, 3, 4, 5],
            code_count: 30,
            steps: DEFAULT_STEPS,
            distance: DistanceKind::Combined,
            perceptual_weight: DEFAULT_PERCEPTUAL_WEIGHT,
            learning_rate: 1e-2,
            factor: 4,
            fid_crops: 32,
            fid_embed_size: 16,
            reference_samples: 128,
            reference_dir: None,
        }
    }
}

impl RunConfig {
    /// Reads a JSON or TOML (by `.toml` extension) config file.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        }
    }

    /// Output resolution of the configured generator.
    pub fn output_resolution(&self) -> usize {
        self.base_resolution << self.generator_layers.saturating_sub(2)
    }

    /// Resolution of the warped guide, `output / factor`.
    pub fn guide_resolution(&self) -> usize {
        self.output_resolution() / self.factor.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.generator_layers < 2 {
            return bad(format!("generator_layers must be >= 2, got {}", self.generator_layers));
        }
        if self.layers.is_empty() {
            return bad("at least one composing layer is required".into());
        }
        let mut seen = self.layers.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.layers.len() {
            return bad(format!("composing layers must be distinct, got {:?}", self.layers));
        }
        if let Some(&n) = self.layers.iter().find(|&&n| n == 0 || n >= self.generator_layers) {
            return bad(format!(
                "composing layer {n} outside [1, {}]",
                self.generator_layers - 1
            ));
        }
        if self.code_count == 0 {
            return bad("code_count must be >= 1".into());
        }
        if self.factor == 0 || self.output_resolution() % self.factor != 0 {
            return bad(format!(
                "factor {} does not divide output resolution {}",
                self.factor,
                self.output_resolution()
            ));
        }
        if self.extractor_widths.is_empty() {
            return bad("extractor_widths must not be empty".into());
        }
        let divisor = 1 << (self.extractor_widths.len() - 1);
        if self.guide_resolution() % divisor != 0 {
            return bad(format!(
                "guide resolution {} must be divisible by {divisor} for a {}-layer extractor",
                self.guide_resolution(),
                self.extractor_widths.len()
            ));
        }
        if self.fid_embed_size % divisor != 0 || self.fid_embed_size == 0 {
            return bad(format!("fid_embed_size {} must be a positive multiple of {divisor}", self.fid_embed_size));
        }
        let crop = self.output_resolution() / 2;
        if crop % self.fid_embed_size != 0 {
            return bad(format!(
                "half-resolution crop {crop} is not a multiple of fid_embed_size {}",
                self.fid_embed_size
            ));
        }
        if self.fid_crops < 2 || self.reference_samples < 2 {
            return bad("fid_crops and reference_samples must be >= 2".into());
        }
        if !(self.warp_temperature > 0.0) || !(self.warp_epsilon > 0.0) {
            return bad("warp_temperature and warp_epsilon must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.perceptual_weight >= 0.0) {
            return bad("learning_rate must be positive and perceptual_weight non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.output_resolution(), 64);
        assert_eq!(c.guide_resolution(), 16);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"steps": 5, "layers": [3]}"#).unwrap();
        assert_eq!(c.steps, 5);
        assert_eq!(c.layers, vec![3]);
        assert_eq!(c.code_count, 30);
        assert!(serde_json::from_str::<RunConfig>(r#"{"stepz": 5}"#).is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig {
            warp_temperature: 123.456789012345,
            reference_dir: Some("refs".into()),
            ..Default::default()
        };
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_layers() {
        let mut c = RunConfig { layers: vec![2, 6], ..Default::default() };
        assert!(c.validate().is_err());
        c.layers = vec![3, 3];
        assert!(c.validate().is_err());
        c.layers = vec![];
        assert!(c.validate().is_err());
    }
}
