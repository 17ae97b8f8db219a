//! The JSON run configuration. Every field is optional in the file; command
//! line flags override whatever the file sets.

use std::path::{Path, PathBuf};

use histoswin::data::{AugmentConfig, SynthKind};
use histoswin::explain::{LimeConfig, OcclusionConfig, ShapConfig, ShapMode};
use histoswin::train::{AdamConfig, TrainConfig};
use histoswin::{Error, HybridModelConfig, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of all randomness. Must be given here or with `--seed`.
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub model: HybridModelConfig,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub train: TrainSettings,
    pub explain: ExplainSettings,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `root/<class>/<images>`.
    pub root: Option<PathBuf>,
    /// Split manifest; defaults to `root/split.json` when that exists.
    pub split: Option<PathBuf>,
    /// Generate the corpus in memory instead of reading `root`.
    pub synth: Option<SynthSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n: usize,
    pub size: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            kind: SynthKind::BlobVsStripe,
            n: 200,
            size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub runs: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            dropout: t.dropout,
            runs: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSettings {
    pub occlusion: OcclusionSettings,
    pub lime: LimeSettings,
    pub shap: ShapSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionSettings {
    pub patch: usize,
    pub stride: usize,
    /// Per-channel fill in `[0, 1]` image space. When unset, the channel
    /// means of the training split are used if a dataset is configured, and
    /// the normalization mean otherwise.
    pub baseline: Option<[f32; 3]>,
}

impl Default for OcclusionSettings {
    fn default() -> Self {
        let o = OcclusionConfig::default();
        OcclusionSettings {
            patch: o.patch,
            stride: o.stride,
            baseline: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimeSettings {
    pub grid: usize,
    pub num_samples: usize,
    pub kernel_width: f64,
    pub ridge: f64,
}

impl Default for LimeSettings {
    fn default() -> Self {
        let l = LimeConfig::default();
        LimeSettings {
            grid: l.grid,
            num_samples: l.num_samples,
            kernel_width: l.kernel_width,
            ridge: l.ridge,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapSettings {
    pub components: usize,
    pub background: usize,
    /// `"enumerate"` or `{"sampled": budget}`.
    pub mode: ShapMode,
}

impl Default for ShapSettings {
    fn default() -> Self {
        let s = ShapConfig::default();
        ShapSettings {
            components: s.components,
            background: s.background,
            mode: s.mode,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required (set \"seed\" in the config or pass --seed)".into()))
    }

    pub fn output(&self) -> Result<&Path> {
        self.output
            .as_deref()
            .ok_or_else(|| Error::Config("an output directory is required (\"output\" or --out)".into()))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            adam: AdamConfig {
                lr: self.train.lr,
                ..AdamConfig::default()
            },
            dropout: self.train.dropout,
            augment: self.augment.clone(),
            seed: self.seed()?,
        })
    }

    /// `fallback` fills in an unset baseline.
    pub fn occlusion(&self, fallback: [f32; 3]) -> OcclusionConfig {
        let o = &self.explain.occlusion;
        OcclusionConfig {
            patch: o.patch,
            stride: o.stride,
            baseline: o.baseline.unwrap_or(fallback),
        }
    }

    pub fn has_data(&self) -> bool {
        self.data.root.is_some() || self.data.synth.is_some()
    }

    pub fn lime(&self) -> Result<LimeConfig> {
        let l = &self.explain.lime;
        Ok(LimeConfig {
            grid: l.grid,
            num_samples: l.num_samples,
            kernel_width: l.kernel_width,
            ridge: l.ridge,
            seed: self.seed()?,
        })
    }

    pub fn shap(&self) -> Result<ShapConfig> {
        let s = &self.explain.shap;
        Ok(ShapConfig {
            components: s.components,
            background: s.background,
            mode: s.mode,
            seed: self.seed()?,
        })
    }
}

/// Fails with an IO error naming the first path that does not exist.
pub fn require_exists<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<()> {
    for p in paths {
        if !p.exists() {
            return Err(Error::Io {
                path: p.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
            });
        }
    }
    Ok(())
}
