//! JSON run configuration. Every key is optional.

use crate::error::{Error, Result};
use crate::eval::ErrorNorm;
use crate::filters::{
    FilterDims, DEFAULT_BASIS_FUNCTIONS, DEFAULT_FREQUENCY_EXTENT, DEFAULT_K_CONV, DEFAULT_OUTPUT_CHANNELS,
};
use crate::grad::{AdamParams, TrainerConfig};
use crate::mesh::TARGET_SQRT_AREA;
use crate::shells::{
    Preprocess, Schedule, ShellConfig, DEFAULT_EIGENPAIRS, DEFAULT_LAMBDA, DEFAULT_SINKHORN_ITERS, TEST_LEVEL_CAP,
};
use crate::shot::{DiameterKind, ShotConfig, DESCRIPTOR_DIM};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotDiameter {
    #[default]
    Euclidean,
    Geodesic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub lambda: f64,
    pub sinkhorn_iters: usize,
    pub k_train: Vec<usize>,
    pub k_test_max: usize,
    pub n_eigs: usize,
    pub k_conv: usize,
    pub n_filters: usize,
    pub n_basis: usize,
    #[serde(rename = "T")]
    pub frequency_extent: f64,
    /// SHOT support radius as a fraction of the diameter.
    pub shot_radius: f64,
    pub shot_diameter: ShotDiameter,
    pub sqrt_area: f64,
    pub error_norm: ErrorNorm,
    pub block_weights: [f64; 3],
    pub cost_scale: f64,
    pub detach_deformation: bool,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub pairs_per_step: usize,
    pub epochs: usize,
    pub seed: u64,
    pub checkpoint_every: Option<usize>,
    /// Seed of the filter initialization when no weights are supplied.
    pub init_seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        let adam = AdamParams::default();
        Config {
            lambda: DEFAULT_LAMBDA,
            sinkhorn_iters: DEFAULT_SINKHORN_ITERS,
            k_train: Schedule::training().levels().to_vec(),
            k_test_max: TEST_LEVEL_CAP,
            n_eigs: DEFAULT_EIGENPAIRS,
            k_conv: DEFAULT_K_CONV,
            n_filters: DEFAULT_OUTPUT_CHANNELS,
            n_basis: DEFAULT_BASIS_FUNCTIONS,
            frequency_extent: DEFAULT_FREQUENCY_EXTENT,
            shot_radius: ShotConfig::default().radius_fraction,
            shot_diameter: ShotDiameter::Euclidean,
            sqrt_area: TARGET_SQRT_AREA,
            error_norm: ErrorNorm::SqrtArea,
            block_weights: [1.0; 3],
            cost_scale: 1.0,
            detach_deformation: false,
            learning_rate: adam.learning_rate,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            pairs_per_step: 1,
            epochs: 1,
            seed: 0,
            checkpoint_every: None,
            init_seed: 0,
        }
    }
}

impl Config {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Config::from_json(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.shell().validate()?;
        self.preprocess().shot.validate()?;
        self.training_schedule()?;
        let positive = [
            ("sqrt_area", self.sqrt_area),
            ("T", self.frequency_extent),
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
        ];
        if let Some((key, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("{key} must be positive, got {v}")));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::InvalidArgument("adam betas must lie in [0, 1)".into()));
        }
        let counts = [
            ("n_eigs", self.n_eigs),
            ("k_conv", self.k_conv),
            ("n_filters", self.n_filters),
            ("n_basis", self.n_basis),
            ("pairs_per_step", self.pairs_per_step),
        ];
        if let Some((key, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{key} must be positive")));
        }
        if self.k_conv > self.n_eigs {
            return Err(Error::InvalidArgument(format!(
                "k_conv = {} exceeds n_eigs = {}",
                self.k_conv, self.n_eigs
            )));
        }
        Ok(())
    }

    pub fn preprocess(&self) -> Preprocess {
        Preprocess {
            eigenpairs: self.n_eigs,
            shot: ShotConfig {
                radius_fraction: self.shot_radius,
                diameter: match self.shot_diameter {
                    ShotDiameter::Euclidean => DiameterKind::Euclidean,
                    ShotDiameter::Geodesic => DiameterKind::Geodesic,
                },
            },
            sqrt_area: self.sqrt_area,
        }
    }

    pub fn shell(&self) -> ShellConfig {
        ShellConfig {
            lambda: self.lambda,
            sinkhorn_iters: self.sinkhorn_iters,
            block_weights: self.block_weights,
            cost_scale: self.cost_scale,
            detach_deformation: self.detach_deformation,
            fixed_deformation: false,
        }
    }

    pub fn training_schedule(&self) -> Result<Schedule> {
        Schedule::new(self.k_train.clone())
    }

    /// Training levels extended up to `min(k_test_max, basis_size)`.
    pub fn testing_schedule(&self, basis_size: usize) -> Result<Schedule> {
        self.training_schedule()?.extended(self.k_test_max.min(basis_size))
    }

    pub fn filter_dims(&self) -> FilterDims {
        let mut dims = FilterDims::new(DESCRIPTOR_DIM);
        dims.output_channels = self.n_filters;
        dims.basis_functions = self.n_basis;
        dims.extent = self.frequency_extent;
        dims.k_conv = self.k_conv;
        dims
    }

    pub fn trainer(&self, output_dir: Option<PathBuf>) -> Result<TrainerConfig> {
        Ok(TrainerConfig {
            adam: AdamParams {
                learning_rate: self.learning_rate,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            epochs: self.epochs,
            pairs_per_step: self.pairs_per_step,
            seed: self.seed,
            schedule: self.training_schedule()?,
            shell: self.shell(),
            checkpoint_every: self.checkpoint_every,
            output_dir,
        })
    }
}
