//! Experiment configuration file.
//!
//! One TOML document with a section per module plus `seed` and
//! `output_root`. Any key can be overridden from the environment as
//! `TERRA_SSL_<SECTION>__<KEY>` (top-level keys as `TERRA_SSL_<KEY>`); values
//! are parsed as TOML literals and fall back to plain strings.

use crate::dataset::{NoiseSpec, NormMode};
use crate::dem_synth::SynthConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::train::{FinetuneConfig, PretrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const ENV_PREFIX: &str = "TERRA_SSL_";
pub const SNAPSHOT_NAME: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Scenes generated for the pretext (DSM→DTM) corpus.
    pub pretext_scenes: usize,
    /// Scenes generated for the labeled segmentation corpus.
    pub segmentation_scenes: usize,
    pub tile_px: usize,
    pub stride_px: usize,
    /// Train/val/test fractions, assigned per scene.
    pub split: [f64; 3],
    pub norm: NormMode,
    /// Nearest-neighbour upsampling applied to segmentation scenes.
    pub rescale_factor: usize,
    /// Label noise applied to the segmentation corpus at generation time.
    pub noise: Option<NoiseSpec>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            pretext_scenes: 16,
            segmentation_scenes: 12,
            tile_px: 64,
            stride_px: 64,
            split: [0.75, 0.125, 0.125],
            norm: NormMode::PerTileMinshift,
            rescale_factor: 1,
            noise: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub boundary_d: usize,
    /// Tiles rendered into the prediction gallery.
    pub gallery_tiles: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { boundary_d: 2, gallery_tiles: 6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub plot_width: u32,
    pub plot_height: u32,
    pub fractions: Vec<f64>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { plot_width: 800, plot_height: 500, fractions: vec![0.01, 0.1, 1.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_root: PathBuf,
    pub synth: SynthConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub losses: LossWeights,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_root: PathBuf::from("terra-ssl-out"),
            synth: SynthConfig { building_density: 150.0, ..SynthConfig::default() },
            dataset: DatasetConfig::default(),
            model: ModelConfig { base_width: 8, depth: 3, se_reduction: 4, ..ModelConfig::default() },
            losses: LossWeights::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.losses.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        let d = &self.dataset;
        if d.tile_px == 0 || d.stride_px == 0 || d.tile_px % (1 << self.model.depth) != 0 {
            return Err(Error::Config(format!(
                "dataset.tile_px = {} must be a positive multiple of 2^model.depth",
                d.tile_px
            )));
        }
        if d.tile_px > self.synth.size_px * d.rescale_factor.max(1) {
            return Err(Error::Config("dataset.tile_px exceeds the scene size".into()));
        }
        if d.rescale_factor == 0 {
            return Err(Error::Config("dataset.rescale_factor must be ≥ 1".into()));
        }
        if let Some(n) = &d.noise {
            n.validate()?;
        }
        if self.eval.boundary_d == 0 {
            return Err(Error::Config("eval.boundary_d must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Parses TOML text, applying overrides from `vars` (name, value).
    pub fn from_toml_with_env<I>(text: &str, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
            let parsed = parse_literal(&value);
            let rest = rest.to_ascii_lowercase();
            match rest.split_once("__") {
                Some((section, key)) => {
                    let entry = doc.entry(section.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
                    let table = entry
                        .as_table_mut()
                        .ok_or_else(|| Error::Config(format!("`{section}` is not a section (from {name})")))?;
                    table.insert(key.to_string(), parsed);
                }
                None => {
                    doc.insert(rest, parsed);
                }
            }
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_env(text, std::iter::empty())
    }

    /// Reads a config file (or the defaults when `path` is `None`) and applies
    /// process environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::Missing(p.to_path_buf()),
                _ => Error::io(p, e),
            })?,
            None => String::new(),
        };
        let cfg = Self::from_toml_with_env(&text, std::env::vars())?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved config into a run directory.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(SNAPSHOT_NAME);
        std::fs::write(&p, self.to_toml()).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn hash(&self) -> String {
        crate::model::config_digest(&self.to_toml())
    }
}

fn parse_literal(value: &str) -> toml::Value {
    let probe = format!("v = {value}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml("[model]\nwidthh = 4\n").unwrap_err();
        assert!(err.to_string().contains("widthh"), "{err}");
    }

    #[test]
    fn snapshot_roundtrips() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.noise = Some(NoiseSpec::shift_benchmark(3));
        cfg.dataset.norm = NormMode::GlobalAffine { offset: 0.0, scale: 25.0 };
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn env_overrides_apply() {
        let vars = vec![
            ("TERRA_SSL_FINETUNE__LR".to_string(), "0.5".to_string()),
            ("TERRA_SSL_SEED".to_string(), "9".to_string()),
            ("TERRA_SSL_OUTPUT_ROOT".to_string(), "/tmp/x y".to_string()),
            ("OTHER".to_string(), "1".to_string()),
        ];
        let cfg = ExperimentConfig::from_toml_with_env("", vars).unwrap();
        assert_eq!(cfg.finetune.lr, 0.5);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.output_root, PathBuf::from("/tmp/x y"));
    }
}
