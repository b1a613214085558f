//! Run configuration: one JSON file naming the model, the data, every
//! protocol constant, and the output path. The effective configuration
//! (after flag overrides) is embedded in every artifact's provenance block,
//! so a run can be reproduced from its output alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use snapvit_core::curvature::LossKind;
use snapvit_core::data::{load_image_dir, read_packed, synth_shapes, LabeledImages};
use snapvit_core::pruner::{PruneBasis, SigmaInit, SnapConfig};
use snapvit_core::ssl::{CropPlan, SslHeadWeights};
use snapvit_core::vit::{ModelWeights, RetentionCaps, UnitMode, ViTConfig};
use snapvit_core::{Result, SnapError};

/// Where the model weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSource {
    /// A checkpoint file.
    Checkpoint { path: PathBuf },
    /// Deterministic random initialization, with a projection head attached
    /// so label-free scoring works out of the box.
    RandomInit {
        config: ViTConfig,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_prototypes")]
        n_prototypes: usize,
    },
}

fn default_prototypes() -> usize {
    64
}

impl ModelSource {
    pub fn load(&self) -> Result<ModelWeights> {
        match self {
            ModelSource::Checkpoint { path } => snapvit_core::artifact::read_checkpoint(path),
            ModelSource::RandomInit { config, seed, n_prototypes } => {
                let mut w = ModelWeights::random_init(config, *seed)?;
                w.ssl_head = Some(SslHeadWeights::random_init(
                    config.d_model,
                    *n_prototypes,
                    seed.wrapping_add(1),
                ));
                Ok(w)
            }
        }
    }
}

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    SyntheticShapes {
        image_size: usize,
        n_samples: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Directory of 8-bit binary PPM files; subdirectories are classes.
    ImageDir { path: PathBuf, image_size: usize },
    PackedBinary { path: PathBuf },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<LabeledImages> {
        match self {
            DatasetSpec::SyntheticShapes { image_size, n_samples, seed } => {
                Ok(synth_shapes(*n_samples, *image_size, *seed))
            }
            DatasetSpec::ImageDir { path, image_size } => load_image_dir(path, *image_size),
            DatasetSpec::PackedBinary { path } => read_packed(path),
        }
    }
}

/// Everything one run needs. Optional fields fall back to the published
/// protocol constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSource,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
    #[serde(default = "default_samples")]
    pub n_samples_grad: usize,
    #[serde(default = "default_samples")]
    pub n_samples_fitness: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_pca_k")]
    pub pca_k: usize,
    #[serde(default)]
    pub crop_plan: Option<CropPlan>,
    #[serde(default = "default_loss_kind")]
    pub loss_kind: LossKind,
    #[serde(default = "default_sigma_init")]
    pub sigma_init: SigmaInit,
    #[serde(default = "default_unit_mode")]
    pub unit_mode: UnitMode,
    #[serde(default)]
    pub caps: RetentionCaps,
    #[serde(default = "default_basis")]
    pub search_basis: PruneBasis,
    /// Neighbors for k-NN evaluation.
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
    /// Calibration samples for weight correction.
    #[serde(default = "default_samples")]
    pub n_calib: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_iterations() -> usize {
    50
}

fn default_grid() -> Vec<f64> {
    vec![0.1, 0.3, 0.5, 0.6]
}

fn default_samples() -> usize {
    256
}

fn default_batch_size() -> usize {
    16
}

fn default_pca_k() -> usize {
    16
}

fn default_loss_kind() -> LossKind {
    LossKind::Ssl
}

fn default_sigma_init() -> SigmaInit {
    SigmaInit::Identity
}

fn default_unit_mode() -> UnitMode {
    UnitMode::Full
}

fn default_basis() -> PruneBasis {
    PruneBasis::ParameterCount
}

fn default_knn_k() -> usize {
    20
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| SnapError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_value(value: &serde_json::Value) -> Result<RunConfig> {
        serde_json::from_value(value.clone())
            .map_err(|e| SnapError::Config(format!("embedded run config: {e}")))
    }

    pub fn to_value(&self) -> Result<serde_json::Value> {
        serde_json::to_value(self).map_err(|e| SnapError::Config(e.to_string()))
    }

    pub fn search_config(&self) -> SnapConfig {
        let mut sc = SnapConfig::new(self.seed);
        sc.iterations = self.iterations;
        sc.grid = self.grid.clone();
        sc.n_samples_grad = self.n_samples_grad;
        sc.n_samples_fitness = self.n_samples_fitness;
        sc.batch_size = self.batch_size;
        sc.pca_k = self.pca_k;
        sc.loss_kind = self.loss_kind;
        sc.unit_mode = self.unit_mode;
        sc.sigma_init = self.sigma_init;
        sc.caps = self.caps;
        sc.search_basis = self.search_basis;
        sc.crop_plan = self.crop_plan.clone();
        sc
    }
}

/// Parse a comma-separated sparsity list like `0.1,0.3,0.5,0.6`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| SnapError::Config(format!("bad sparsity value {s:?} in grid")))
        })
        .collect()
}
