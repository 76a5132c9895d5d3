//! Flat run configuration.
//!
//! A config file is TOML with top-level `key = value` lines only. Every key is
//! optional; unknown keys are rejected. Values from `--set key=value` replace
//! file values, and `--seed` / `--out` replace both.

use std::path::{Path, PathBuf};

use relgeo::dataset::{PairingStrategy, SynthSceneConfig};
use relgeo::losses::{Combination, DEFAULT_ALPHA, DEFAULT_MARGIN, DEFAULT_S_Q, DEFAULT_S_X};
use relgeo::network::{EncoderConfig, ModelConfig};
use relgeo::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    /// Generated from the `synth_*` keys and the root seed.
    Synth,
    /// Scene file written by `relgeo synth`.
    Jsonl,
    /// Directory of `frame-NNNNNN.pose.txt` files, optionally one level of
    /// sequence subdirectories.
    #[serde(rename = "7scenes")]
    SevenScenes,
    /// `dataset_*.txt` pose list.
    Cambridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed for every random stream. Default 0.
    pub seed: u64,
    /// Output directory. Default `runs`.
    pub out: PathBuf,

    /// `synth` (default), `jsonl`, `7scenes` or `cambridge`.
    pub dataset_format: DatasetFormat,
    /// Training data path; unused for `synth`.
    pub train_path: Option<PathBuf>,
    /// Test data path. Without it the last `test_sequences` sequences of the
    /// training data are held out.
    pub test_path: Option<PathBuf>,
    /// Descriptor sidecar for `7scenes` / `cambridge` training data.
    pub train_descriptors: Option<PathBuf>,
    pub test_descriptors: Option<PathBuf>,
    /// Default 1.
    pub test_sequences: usize,

    /// Default `full`.
    pub combination: Combination,
    /// Default 1e-5.
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Default 1e-5; not applied to the loss weighting scalars.
    pub weight_decay: f64,
    /// Default 32.
    pub batch_size: usize,
    /// Default 200.
    pub max_epochs: usize,
    /// Default 10.
    pub convergence_window: usize,
    /// Default 1e-4.
    pub convergence_threshold: f64,
    /// `next` (default) or `random`.
    pub pairing: PairingStrategy,
    pub random_within_sequence: bool,
    /// Default 10.
    pub alpha: f64,
    /// Default 0.001.
    pub margin: f64,
    /// Default 0.
    pub s_x_init: f64,
    /// Default -3.
    pub s_q_init: f64,
    /// Fixed orientation weight; unset means learnable weighting.
    pub beta: Option<f64>,
    /// Default true.
    pub global_both_frames: bool,

    /// Default [128, 128]. The input width is the dataset's descriptor width.
    pub hidden_dims: Vec<usize>,
    /// Default 64.
    pub feature_dim: usize,
    /// Default 0.2.
    pub dropout_rate: f64,
    /// Default 128.
    pub head_hidden: usize,
    /// Default true.
    pub relative_head: bool,

    pub synth_num_sequences: usize,
    pub synth_frames_per_sequence: usize,
    pub synth_workspace_extent: f64,
    pub synth_descriptor_noise_sigma: f64,
    pub synth_aliasing_fraction: f64,
    pub synth_aliasing_pair_min_distance: f64,
    pub synth_descriptor_dim: usize,
    pub synth_step_fraction: f64,
    pub synth_feature_length_scale: f64,
    pub synth_route_spread: f64,

    /// Comma-separated list for `ablate`. Default `G,G+C,G+C+R,full`.
    pub combinations: String,
    /// Number of ablation seeds, counted up from `seed`. Default 5.
    pub ablation_seeds: u64,

    /// Model checkpoint for `evaluate`.
    pub checkpoint: Option<PathBuf>,
    /// Prediction file for `evaluate`, used instead of a checkpoint.
    pub predictions: Option<PathBuf>,

    /// Default 100.
    pub gradcheck_points: usize,
    /// Default 1e-6.
    pub gradcheck_step: f64,
    /// Default 1e-5.
    pub gradcheck_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let model = ModelConfig::default();
        let synth = SynthSceneConfig::default();
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            dataset_format: DatasetFormat::Synth,
            train_path: None,
            test_path: None,
            train_descriptors: None,
            test_descriptors: None,
            test_sequences: 1,
            combination: train.combination,
            learning_rate: train.learning_rate,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_epsilon: train.adam_epsilon,
            weight_decay: train.weight_decay,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            convergence_window: train.convergence_window,
            convergence_threshold: train.convergence_threshold,
            pairing: train.pairing,
            random_within_sequence: train.random_within_sequence,
            alpha: DEFAULT_ALPHA,
            margin: DEFAULT_MARGIN,
            s_x_init: DEFAULT_S_X,
            s_q_init: DEFAULT_S_Q,
            beta: None,
            global_both_frames: train.global_both_frames,
            hidden_dims: model.encoder.hidden_dims.clone(),
            feature_dim: model.encoder.feature_dim,
            dropout_rate: model.encoder.dropout_rate,
            head_hidden: model.head_hidden,
            relative_head: model.relative_head,
            synth_num_sequences: synth.num_sequences,
            synth_frames_per_sequence: synth.frames_per_sequence,
            synth_workspace_extent: synth.workspace_extent,
            synth_descriptor_noise_sigma: synth.descriptor_noise_sigma,
            synth_aliasing_fraction: synth.aliasing_fraction,
            synth_aliasing_pair_min_distance: synth.aliasing_pair_min_distance,
            synth_descriptor_dim: synth.descriptor_dim,
            synth_step_fraction: synth.step_fraction,
            synth_feature_length_scale: synth.feature_length_scale,
            synth_route_spread: synth.route_spread,
            combinations: "G,G+C,G+C+R,full".into(),
            ablation_seeds: 5,
            checkpoint: None,
            predictions: None,
            gradcheck_points: 100,
            gradcheck_step: 1e-6,
            gradcheck_tolerance: 1e-5,
        }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Parses the right-hand side of `--set key=value`. Anything that is not a
/// TOML value is taken as a bare string.
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Defaults, then the file, then each `key=value` override in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError(format!("cannot read config file {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| ConfigError(format!("invalid config file {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("override `{item}` is not of the form key=value")))?;
            table.insert(key.trim().to_string(), override_value(value.trim()));
        }
        let where_ = path.map_or("overrides".to_string(), |p| p.display().to_string());
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| ConfigError(format!("invalid configuration in {where_}: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn synth(&self) -> SynthSceneConfig {
        SynthSceneConfig {
            num_sequences: self.synth_num_sequences,
            frames_per_sequence: self.synth_frames_per_sequence,
            workspace_extent: self.synth_workspace_extent,
            descriptor_noise_sigma: self.synth_descriptor_noise_sigma,
            aliasing_fraction: self.synth_aliasing_fraction,
            aliasing_pair_min_distance: self.synth_aliasing_pair_min_distance,
            descriptor_dim: self.synth_descriptor_dim,
            step_fraction: self.synth_step_fraction,
            feature_length_scale: self.synth_feature_length_scale,
            route_spread: self.synth_route_spread,
            rng_seed: self.seed,
        }
    }

    pub fn train(&self, input_dim: usize) -> TrainConfig {
        TrainConfig {
            combination: self.combination,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            convergence_window: self.convergence_window,
            convergence_threshold: self.convergence_threshold,
            rng_seed: self.seed,
            pairing: self.pairing,
            random_within_sequence: self.random_within_sequence,
            alpha: self.alpha,
            margin: self.margin,
            s_x_init: self.s_x_init,
            s_q_init: self.s_q_init,
            beta: self.beta,
            global_both_frames: self.global_both_frames,
            model: ModelConfig {
                encoder: EncoderConfig {
                    input_dim,
                    hidden_dims: self.hidden_dims.clone(),
                    feature_dim: self.feature_dim,
                    dropout_rate: self.dropout_rate,
                },
                head_hidden: self.head_hidden,
                relative_head: self.relative_head,
            },
        }
    }

    pub fn ablation_combinations(&self) -> relgeo::Result<Vec<Combination>> {
        self.combinations.split(',').map(|c| c.trim().parse()).collect()
    }
}
