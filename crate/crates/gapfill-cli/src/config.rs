//! Run configuration: a sectioned TOML file with flag overrides. Unknown keys
//! are rejected; all paths are resolved against the data root before any
//! command executes.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gapfill::model::ModelConfig;
use gapfill::train::TrainConfig;
use serde::Deserialize;

/// Environment variable supplying the default data root.
pub const DATA_ROOT_ENV: &str = "GAPFILL_DATA_ROOT";

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Base directory all relative paths resolve against. Falls back to the
    /// `GAPFILL_DATA_ROOT` environment variable, then the config's directory.
    pub data_root: Option<PathBuf>,
    /// Output directory of the invoked command.
    pub out_dir: Option<PathBuf>,
    pub synth: Option<SynthSection>,
    pub gaps: GapsSection,
    pub masks: MasksSection,
    pub model: ModelConfig,
    pub train: Option<TrainSection>,
    pub simulate: Option<SimulateSection>,
    pub impute: Option<ImputeSection>,
    pub evaluate: Option<EvaluateSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_samples: usize,
    pub split: String,
    pub out: PathBuf,
    pub segments: usize,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub event_probability: f64,
    pub noise_sigma: f64,
    pub brightness_jitter: f64,
    pub t_len_min: usize,
    pub t_len_max: usize,
    pub channels: usize,
    pub aux_channels: usize,
    pub height: usize,
    pub width: usize,
    pub first_day_min: u32,
    pub first_day_max: u32,
    pub day_spacing_min: u32,
    pub day_spacing_max: u32,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            n_samples: 100,
            split: "train".to_string(),
            out: PathBuf::from("dataset"),
            segments: 6,
            amplitude_min: 0.05,
            amplitude_max: 0.25,
            event_probability: 0.05,
            noise_sigma: 0.01,
            brightness_jitter: 0.03,
            t_len_min: 10,
            t_len_max: 14,
            channels: 4,
            aux_channels: 0,
            height: 32,
            width: 32,
            first_day_min: 30,
            first_day_max: 160,
            day_spacing_min: 4,
            day_spacing_max: 8,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapsSection {
    pub max_masked_frame_ratio: f64,
    pub min_masked_frames: usize,
}

impl Default for GapsSection {
    fn default() -> Self {
        GapsSection {
            max_masked_frame_ratio: 0.5,
            min_masked_frames: 1,
        }
    }
}

/// Where occlusion masks come from: a dataset whose mask payloads are used as
/// the pool, or generated blobs.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MasksSection {
    /// Manifest of a dataset to harvest real masks from; blobs when absent.
    pub pool_manifest: Option<PathBuf>,
    pub blob_count: usize,
    pub blob_coverage_min: f64,
    pub blob_coverage_max: f64,
    pub full_frame_fraction: f64,
}

impl Default for MasksSection {
    fn default() -> Self {
        MasksSection {
            pool_manifest: None,
            blob_count: 64,
            blob_coverage_min: 0.2,
            blob_coverage_max: 0.7,
            full_frame_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    #[serde(default)]
    pub params: TrainConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub input_manifest: PathBuf,
    #[serde(default = "default_simulated_split")]
    pub split: String,
}

fn default_simulated_split() -> String {
    "simulated".to_string()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputeSection {
    pub input_manifest: PathBuf,
    #[serde(default = "default_window")]
    pub window: usize,
    pub checkpoint: Option<PathBuf>,
    /// Emit per-sample attention panels next to the imputed samples.
    #[serde(default)]
    pub attention_panels: bool,
}

fn default_window() -> usize {
    10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    /// Pairing index written by the simulate command.
    pub pairing: PathBuf,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default = "default_window")]
    pub window: usize,
    pub checkpoint: Option<PathBuf>,
}

fn default_methods() -> Vec<String> {
    vec![
        "last".to_string(),
        "closest".to_string(),
        "linear".to_string(),
        "model".to_string(),
    ]
}

/// A loaded config with its resolution context.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
}

impl ResolvedConfig {
    pub fn load(
        path: &Path,
        seed_override: Option<u64>,
        out_override: Option<PathBuf>,
    ) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(seed) = seed_override {
            config.seed = seed;
        }

        let config_dir = path
            .parent()
            .map(Path::to_path_buf)
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or_else(|| PathBuf::from("."));
        let data_root = match (&config.data_root, std::env::var_os(DATA_ROOT_ENV)) {
            (Some(root), _) if root.is_absolute() => root.clone(),
            (Some(root), _) => config_dir.join(root),
            (None, Some(env_root)) => PathBuf::from(env_root),
            (None, None) => config_dir.clone(),
        };

        let out_dir = out_override
            .or_else(|| config.out_dir.clone())
            .map(|p| resolve(&data_root, &p))
            .unwrap_or_else(|| data_root.join("out"));

        Ok(ResolvedConfig {
            config,
            data_root,
            out_dir,
        })
    }

    /// Resolve a config-relative path against the data root.
    pub fn path(&self, p: &Path) -> PathBuf {
        resolve(&self.data_root, p)
    }

    /// Resolve and require the file to exist.
    pub fn existing_path(&self, p: &Path, what: &str) -> Result<PathBuf> {
        let full = self.path(p);
        if !full.exists() {
            bail!("{what} not found at {}", full.display());
        }
        Ok(full)
    }
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}
