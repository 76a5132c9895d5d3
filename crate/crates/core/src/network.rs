//! Shared-weight siamese pose regressor.
//!
//! One encoder maps a scene descriptor to a feature vector `f`. The global
//! pose head turns `f` into a position and a raw quaternion; the optional
//! relative pose head does the same for the concatenation `[f, f_ref]` of
//! both twins. Both twins use the same parameter set, so a training step
//! binds each parameter to a single graph leaf and the gradients from the two
//! branches accumulate on it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::pose::{Pose, Position, Quaternion};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dims: vec![128, 128],
            feature_dim: 64,
            dropout_rate: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Width of the first fully connected layer of both pose heads.
    pub head_hidden: usize,
    pub relative_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head_hidden: 128,
            relative_head: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.input_dim == 0 || e.hidden_dims.contains(&0) || self.head_hidden == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if e.feature_dim < 8 {
            return Err(Error::InvalidConfig(format!(
                "feature_dim must be at least 8, got {}",
                e.feature_dim
            )));
        }
        if !(0.0..1.0).contains(&e.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate {} outside [0, 1)",
                e.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Fully connected layer, `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// Xavier-uniform weights, zero bias.
    pub fn xavier(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Dense {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Dense {
            weight: Tensor::new(vec![inputs, outputs], data).expect("consistent shape"),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Dense {
        Dense {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }
}

/// fc1 (ReLU, dropout) followed by a 3-wide position and a 4-wide orientation
/// output.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseHead {
    pub fc1: Dense,
    pub head_x: Dense,
    pub head_q: Dense,
}

impl PoseHead {
    fn xavier(inputs: usize, hidden: usize, rng: &mut impl Rng) -> PoseHead {
        PoseHead {
            fc1: Dense::xavier(inputs, hidden, rng),
            head_x: Dense::xavier(hidden, 3, rng),
            head_q: Dense::xavier(hidden, 4, rng),
        }
    }

    fn layers(&self) -> [(&'static str, &Dense); 3] {
        [("fc1", &self.fc1), ("head_x", &self.head_x), ("head_q", &self.head_q)]
    }

    fn layers_mut(&mut self) -> [&mut Dense; 3] {
        [&mut self.fc1, &mut self.head_x, &mut self.head_q]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiameseModel {
    config: ModelConfig,
    pub encoder: Vec<Dense>,
    pub gpru: PoseHead,
    pub rpru: Option<PoseHead>,
}

/// Forward-pass mode. Training draws inverted-dropout masks from `rng`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl SiameseModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<SiameseModel> {
        config.validate()?;
        let e = &config.encoder;
        let mut widths = vec![e.input_dim];
        widths.extend(&e.hidden_dims);
        widths.push(e.feature_dim);
        let encoder = widths
            .windows(2)
            .map(|w| Dense::xavier(w[0], w[1], rng))
            .collect();
        let gpru = PoseHead::xavier(e.feature_dim, config.head_hidden, rng);
        let rpru = config
            .relative_head
            .then(|| PoseHead::xavier(2 * e.feature_dim, config.head_hidden, rng));
        Ok(SiameseModel {
            config,
            encoder,
            gpru,
            rpru,
        })
    }

    pub fn from_seed(config: ModelConfig, seed: u64) -> Result<SiameseModel> {
        SiameseModel::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn has_relative_head(&self) -> bool {
        self.rpru.is_some()
    }

    /// Named parameters in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, d) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &d.weight));
            out.push((format!("encoder.{i}.bias"), &d.bias));
        }
        let heads = [("gpru", Some(&self.gpru)), ("rpru", self.rpru.as_ref())];
        for (prefix, head) in heads {
            if let Some(h) = head {
                for (name, d) in h.layers() {
                    out.push((format!("{prefix}.{name}.weight"), &d.weight));
                    out.push((format!("{prefix}.{name}.bias"), &d.bias));
                }
            }
        }
        out
    }

    /// Mutable parameters in the same order as [`SiameseModel::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for d in &mut self.encoder {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        for d in self.gpru.layers_mut() {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        if let Some(h) = &mut self.rpru {
            for d in h.layers_mut() {
                out.push(&mut d.weight);
                out.push(&mut d.bias);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter on `g`, as leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let mut bind = |t: &Tensor| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let mut layer = |d: &Dense| BoundDense {
            weight: bind(&d.weight),
            bias: bind(&d.bias),
        };
        let encoder = self.encoder.iter().map(&mut layer).collect();
        let mut head = |h: &PoseHead| BoundHead {
            fc1: layer(&h.fc1),
            head_x: layer(&h.head_x),
            head_q: layer(&h.head_q),
        };
        let gpru = head(&self.gpru);
        let rpru = self.rpru.as_ref().map(head);
        BoundModel {
            encoder,
            gpru,
            rpru,
            dropout_rate: self.config.encoder.dropout_rate,
            feature_dim: self.config.encoder.feature_dim,
            input_dim: self.config.encoder.input_dim,
        }
    }

    /// Feature vector of one descriptor.
    pub fn encode(&self, descriptor: &[f64], mode: Mode<'_>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(Tensor::row(descriptor));
        let mut mode = mode;
        let f = bound.encode(&mut g, x, &mut mode)?;
        Ok(g.value(f).data().to_vec())
    }

    /// Global pose of one descriptor, using only the encoder and global head.
    pub fn predict_pose(&self, descriptor: &[f64]) -> Result<Pose> {
        Ok(self.predict_poses(&[descriptor])?.remove(0))
    }

    pub fn predict_poses<D: AsRef<[f64]>>(&self, descriptors: &[D]) -> Result<Vec<Pose>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(Tensor::from_rows(descriptors)?);
        let mut mode = Mode::Eval;
        let f = bound.encode(&mut g, x, &mut mode)?;
        let (xv, qv) = bound.gpru(&mut g, f, &mut mode)?;
        let (xs, qs) = (g.value(xv), g.value(qv));
        (0..xs.rows())
            .map(|r| {
                let p = xs.row_slice(r);
                let q = qs.row_slice(r);
                Pose::new(
                    Position::new(p[0], p[1], p[2]),
                    Quaternion::new(q[0], q[1], q[2], q[3]),
                )
            })
            .collect()
    }

    /// Raw outputs of the global head for one descriptor.
    pub fn gpru_raw(&self, feature: &[f64]) -> Result<([f64; 3], [f64; 4])> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let f = g.constant(Tensor::row(feature));
        let (x, q) = bound.gpru(&mut g, f, &mut Mode::Eval)?;
        Ok((to_arr(g.value(x).data()), to_arr(g.value(q).data())))
    }

    /// Raw outputs of the relative head for one pair of features.
    pub fn rpru_raw(&self, feature: &[f64], feature_ref: &[f64]) -> Result<([f64; 3], [f64; 4])> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let f = g.constant(Tensor::row(feature));
        let fr = g.constant(Tensor::row(feature_ref));
        let (x, q) = bound
            .rpru(&mut g, f, fr, &mut Mode::Eval)?
            .ok_or_else(|| Error::MissingHead {
                combination: "relative pose regression".into(),
            })?;
        Ok((to_arr(g.value(x).data()), to_arr(g.value(q).data())))
    }
}

fn to_arr<const N: usize>(s: &[f64]) -> [f64; N] {
    let mut a = [0.0; N];
    a.copy_from_slice(s);
    a
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDense {
    pub weight: Var,
    pub bias: Var,
}

impl BoundDense {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.weight)?;
        g.add_bias(h, self.bias)
    }

    fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    pub fc1: BoundDense,
    pub head_x: BoundDense,
    pub head_q: BoundDense,
}

/// Model parameters recorded on a graph.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub encoder: Vec<BoundDense>,
    pub gpru: BoundHead,
    pub rpru: Option<BoundHead>,
    dropout_rate: f64,
    feature_dim: usize,
    input_dim: usize,
}

impl BoundModel {
    /// Graph handles in the order of [`SiameseModel::parameters`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.encoder.iter().flat_map(|d| d.vars()).collect();
        for h in std::iter::once(&self.gpru).chain(self.rpru.as_ref()) {
            for d in [h.fc1, h.head_x, h.head_q] {
                out.extend(d.vars());
            }
        }
        out
    }

    fn dropout(&self, g: &mut Graph, h: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let rate = self.dropout_rate;
        match mode {
            Mode::Train(rng) if rate > 0.0 => {
                let shape = g.value(h).shape().to_vec();
                let keep = 1.0 - rate;
                let mask: Vec<f64> = (0..g.value(h).len())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let m = g.constant(Tensor::new(shape, mask)?);
                g.mul(h, m)
            }
            _ => Ok(h),
        }
    }

    /// Encoder forward for an `n x input_dim` batch.
    pub fn encode(&self, g: &mut Graph, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let cols = g.value(x).cols();
        if cols != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                detail: format!("descriptor length {cols}, expected {}", self.input_dim),
            });
        }
        let (last, hidden) = self.encoder.split_last().expect("encoder has a layer");
        let mut h = x;
        for layer in hidden {
            h = layer.forward(g, h)?;
            h = g.relu(h)?;
            h = self.dropout(g, h, mode)?;
        }
        last.forward(g, h)
    }

    fn head(&self, g: &mut Graph, head: &BoundHead, input: Var, mode: &mut Mode<'_>) -> Result<(Var, Var)> {
        let h = head.fc1.forward(g, input)?;
        let h = g.relu(h)?;
        let h = self.dropout(g, h, mode)?;
        let x = head.head_x.forward(g, h)?;
        let q = head.head_q.forward(g, h)?;
        Ok((x, q))
    }

    fn check_feature(&self, g: &Graph, f: Var, op: &'static str) -> Result<()> {
        let cols = g.value(f).cols();
        if cols != self.feature_dim {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("feature length {cols}, expected {}", self.feature_dim),
            });
        }
        Ok(())
    }

    /// Global pose head: `(x_hat n x 3, q_hat_raw n x 4)`.
    pub fn gpru(&self, g: &mut Graph, f: Var, mode: &mut Mode<'_>) -> Result<(Var, Var)> {
        self.check_feature(g, f, "gpru")?;
        let head = self.gpru;
        self.head(g, &head, f, mode)
    }

    /// Relative pose head on `[f, f_ref]`, or `None` without that head.
    pub fn rpru(&self, g: &mut Graph, f: Var, f_ref: Var, mode: &mut Mode<'_>) -> Result<Option<(Var, Var)>> {
        let Some(head) = self.rpru else {
            return Ok(None);
        };
        self.check_feature(g, f, "rpru")?;
        self.check_feature(g, f_ref, "rpru")?;
        let input = g.concat(&[f, f_ref])?;
        self.head(g, &head, input, mode).map(Some)
    }
}

pub const CHECKPOINT_FORMAT: &str = "relgeo-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    s_x: f64,
    s_q: f64,
    seed: u64,
    parameters: BTreeMap<String, StoredTensor>,
}

/// A trained model together with its loss-balancing scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SiameseModel,
    pub s_x: f64,
    pub s_q: f64,
    /// Root seed of the run that produced the model.
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let parameters = self
            .model
            .parameters()
            .into_iter()
            .map(|(name, t)| {
                (
                    name,
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            s_x: self.s_x,
            s_q: self.s_q,
            seed: self.seed,
            parameters,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parses a checkpoint. A missing relative head is accepted: the model is
    /// then inference-only.
    pub fn from_json(text: &str) -> Result<Checkpoint> {
        let mut file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", file.version)));
        }
        file.config.relative_head = file.parameters.keys().any(|k| k.starts_with("rpru."));
        file.config.validate()?;
        let mut model = SiameseModel::from_seed(file.config.clone(), 0)?;
        let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.parameters_mut()) {
            let stored = file
                .parameters
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let t = Tensor::new(stored.shape, stored.data)?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = file.parameters.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(Checkpoint {
            model,
            s_x: file.s_x,
            s_q: file.s_q,
            seed: file.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}
