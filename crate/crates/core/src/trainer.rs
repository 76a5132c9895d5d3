//! Optimization loop, ablation runner and training reports.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::dataset::{make_pairs, triplet_negative, PairingStrategy, Scene, TrainingPairSpec};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, SceneResult};
use crate::losses::{comprehensive_loss, Combination, LossSettings, PairOutputs, Weighting};
use crate::network::{Checkpoint, Mode, ModelConfig, SiameseModel};
use crate::pose::Pose;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub combination: Combination,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub convergence_window: usize,
    pub convergence_threshold: f64,
    pub rng_seed: u64,
    pub pairing: PairingStrategy,
    /// Restrict random references to the frame's own sequence.
    pub random_within_sequence: bool,
    pub alpha: f64,
    pub margin: f64,
    pub s_x_init: f64,
    pub s_q_init: f64,
    /// Fixed `L_x + beta * L_q` weighting instead of the learnable one.
    pub beta: Option<f64>,
    pub global_both_frames: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss = LossSettings::default();
        Self {
            combination: Combination::Full,
            learning_rate: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 1e-5,
            batch_size: 32,
            max_epochs: 200,
            convergence_window: 10,
            convergence_threshold: 1e-4,
            rng_seed: 0,
            pairing: PairingStrategy::Next,
            random_within_sequence: false,
            alpha: loss.alpha,
            margin: loss.margin,
            s_x_init: crate::losses::DEFAULT_S_X,
            s_q_init: crate::losses::DEFAULT_S_Q,
            beta: None,
            global_both_frames: loss.global_both_frames,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be non-negative", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.adam_epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_epsilon must be positive and weight_decay non-negative".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.convergence_window == 0 {
            return bad("batch_size, max_epochs and convergence_window must be at least 1".into());
        }
        if !(self.alpha >= 0.0 && self.margin >= 0.0) {
            return bad("alpha and margin must be non-negative".into());
        }
        if let Some(beta) = self.beta {
            if !(beta > 0.0) {
                return bad(format!("beta {beta} must be positive"));
            }
        }
        if self.combination.uses_regression() && !self.model.relative_head {
            return Err(Error::MissingHead {
                combination: self.combination.to_string(),
            });
        }
        self.model.validate()
    }

    fn loss_settings(&self) -> LossSettings {
        LossSettings {
            alpha: self.alpha,
            margin: self.margin,
            global_both_frames: self.global_both_frames,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: &TrainConfig, sizes: &[usize]) -> AdamW {
        AdamW {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_epsilon,
            weight_decay: config.weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates slot `k` in place. `decay` selects decoupled weight decay.
    pub fn update(&mut self, k: usize, param: &mut [f64], grad: &[f64], decay: bool) {
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (m, v) = (&mut self.m[k], &mut self.v[k]);
        for i in 0..param.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let step = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            param[i] -= self.lr * step;
            if decay {
                param[i] -= self.lr * self.weight_decay * param[i];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub combination: Combination,
    pub pairing: PairingStrategy,
    pub epochs_run: usize,
    pub converged: bool,
    /// Mean batch loss of every epoch.
    pub loss_curve: Vec<f64>,
    pub final_s_x: f64,
    pub final_s_q: f64,
    pub parameter_count: usize,
    /// FNV-1a hash over the bit patterns of all final parameters.
    pub parameter_digest: String,
    /// Wall-clock duration. Left out of the JSON so reports stay reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub checkpoint: Checkpoint,
}

pub fn parameter_digest(checkpoint: &Checkpoint) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |v: f64| {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for (_, t) in checkpoint.model.parameters() {
        t.data().iter().copied().for_each(&mut eat);
    }
    eat(checkpoint.s_x);
    eat(checkpoint.s_q);
    format!("{h:016x}")
}

/// Independent generator streams derived from one root seed.
struct Streams {
    init: u64,
    pairing: u64,
    shuffle: ChaCha8Rng,
    dropout: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Streams {
        let mut root = ChaCha8Rng::seed_from_u64(seed);
        Streams {
            init: root.next_u64(),
            pairing: root.next_u64(),
            shuffle: ChaCha8Rng::seed_from_u64(root.next_u64()),
            dropout: ChaCha8Rng::seed_from_u64(root.next_u64()),
        }
    }
}

/// Moving-average stopping rule: stop when the mean of the last `window`
/// epochs improves on the mean of the `window` epochs before it by a relative
/// amount below `threshold`.
pub fn has_converged(curve: &[f64], window: usize, threshold: f64) -> bool {
    if curve.len() < 2 * window {
        return false;
    }
    let n = curve.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let last = mean(&curve[n - window..]);
    let prev = mean(&curve[n - 2 * window..n - window]);
    (prev - last) / prev.abs().max(1e-12) < threshold
}

struct Batch {
    cur: Tensor,
    refs: Tensor,
    neg: Option<Tensor>,
    cur_poses: Vec<Pose>,
    ref_poses: Vec<Pose>,
}

fn make_batch(scene: &Scene, pairs: &[&TrainingPairSpec], triplet: bool) -> Result<Batch> {
    let frames = scene.frames();
    let rows = |idx: &mut dyn Iterator<Item = usize>| -> Result<Tensor> {
        let r: Vec<&[f64]> = idx.map(|i| frames[i].descriptor.as_slice()).collect();
        Tensor::from_rows(&r)
    };
    let neg = if triplet {
        let idx = pairs
            .iter()
            .map(|p| {
                triplet_negative(scene.len(), p)
                    .ok_or_else(|| Error::InvalidConfig("triplet loss needs at least 3 frames".into()))
            })
            .collect::<Result<Vec<usize>>>()?;
        Some(rows(&mut idx.into_iter())?)
    } else {
        None
    };
    Ok(Batch {
        cur: rows(&mut pairs.iter().map(|p| p.current))?,
        refs: rows(&mut pairs.iter().map(|p| p.reference))?,
        neg,
        cur_poses: pairs.iter().map(|p| frames[p.current].pose).collect(),
        ref_poses: pairs.iter().map(|p| frames[p.reference].pose).collect(),
    })
}

/// One forward and backward pass. Returns the loss and gradients in the
/// order of the model parameters followed by `s_x`, `s_q`.
pub(crate) fn loss_and_gradients(
    model: &SiameseModel,
    s: (f64, f64),
    config: &TrainConfig,
    batch_cur: &Tensor,
    batch_ref: &Tensor,
    batch_neg: Option<&Tensor>,
    poses: (&[Pose], &[Pose]),
    dropout: Option<&mut dyn RngCore>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let s_x = g.leaf(Tensor::scalar(s.0));
    let s_q = g.leaf(Tensor::scalar(s.1));
    let mut mode = match dropout {
        Some(rng) => Mode::Train(rng),
        None => Mode::Eval,
    };
    let xc = g.constant(batch_cur.clone());
    let xr = g.constant(batch_ref.clone());
    let f_cur = bound.encode(&mut g, xc, &mut mode)?;
    let f_ref = bound.encode(&mut g, xr, &mut mode)?;
    let f_neg = match batch_neg {
        Some(t) => {
            let xn = g.constant(t.clone());
            Some(bound.encode(&mut g, xn, &mut mode)?)
        }
        None => None,
    };
    let (x_cur, q_cur) = bound.gpru(&mut g, f_cur, &mut mode)?;
    let (x_ref, q_ref) = bound.gpru(&mut g, f_ref, &mut mode)?;
    let relative = if config.combination.uses_regression() {
        bound.rpru(&mut g, f_cur, f_ref, &mut mode)?
    } else {
        None
    };
    let out = PairOutputs {
        x_cur,
        q_cur,
        x_ref,
        q_ref,
        f_cur,
        f_ref,
        relative,
        f_neg,
    };
    let weighting = match config.beta {
        Some(b) => Weighting::FixedBeta(b),
        None => Weighting::Learnable { s_x, s_q },
    };
    let terms = comprehensive_loss(
        &mut g,
        &out,
        poses.0,
        poses.1,
        config.combination,
        weighting,
        &config.loss_settings(),
    )?;
    let loss = g.value(terms.total).item();
    let grads = g.backward(terms.total)?;
    let mut vars: Vec<Var> = bound.vars();
    vars.extend([s_x, s_q]);
    let out = vars
        .into_iter()
        .map(|v| grads.get_or_zeros(v, g.value(v)))
        .collect();
    Ok((loss, out))
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFiniteValue { op } => Error::DivergedLoss {
            epoch,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// The model `train` starts from for this configuration.
pub fn initial_model(config: &TrainConfig) -> Result<SiameseModel> {
    SiameseModel::from_seed(config.model.clone(), Streams::new(config.rng_seed).init)
}

/// Trains a fresh model on `scene`.
pub fn train(scene: &Scene, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dim = scene.descriptor_dim()?;
    if dim != config.model.encoder.input_dim {
        return Err(Error::InvalidConfig(format!(
            "scene descriptors have {dim} values but the encoder expects {}",
            config.model.encoder.input_dim
        )));
    }
    let started = Instant::now();
    let mut streams = Streams::new(config.rng_seed);
    let mut model = SiameseModel::from_seed(config.model.clone(), streams.init)?;
    let (mut s_x, mut s_q) = (config.s_x_init, config.s_q_init);
    let pairs = make_pairs(scene, config.pairing, streams.pairing, config.random_within_sequence)?;
    let triplet = config.combination == Combination::Triplet;

    let mut sizes: Vec<usize> = model.parameters().iter().map(|(_, t)| t.len()).collect();
    sizes.extend([1, 1]);
    let mut adam = AdamW::new(config, &sizes);
    let learn_s = config.beta.is_none();

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = Vec::new();
    let mut converged = false;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut streams.shuffle);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch_pairs: Vec<&TrainingPairSpec> = chunk.iter().map(|&i| &pairs[i]).collect();
            let batch = make_batch(scene, &batch_pairs, triplet)?;
            let (loss, grads) = loss_and_gradients(
                &model,
                (s_x, s_q),
                config,
                &batch.cur,
                &batch.refs,
                batch.neg.as_ref(),
                (&batch.cur_poses, &batch.ref_poses),
                Some(&mut streams.dropout),
            )
            .map_err(|e| diverged(epoch, e))?;
            if !loss.is_finite() {
                return Err(Error::DivergedLoss {
                    epoch,
                    reason: format!("loss became {loss}"),
                });
            }
            total += loss * chunk.len() as f64;
            adam.begin_step();
            let n_params = sizes.len() - 2;
            for (k, (p, gr)) in model.parameters_mut().into_iter().zip(&grads).enumerate() {
                adam.update(k, p.data_mut(), gr.data(), true);
            }
            if learn_s {
                let mut sx = [s_x];
                adam.update(n_params, &mut sx, grads[n_params].data(), false);
                let mut sq = [s_q];
                adam.update(n_params + 1, &mut sq, grads[n_params + 1].data(), false);
                (s_x, s_q) = (sx[0], sq[0]);
            }
        }
        let epoch_loss = total / pairs.len() as f64;
        log::debug!("epoch {epoch}: loss {epoch_loss:.6}");
        curve.push(epoch_loss);
        if has_converged(&curve, config.convergence_window, config.convergence_threshold) {
            converged = true;
            break;
        }
    }
    let checkpoint = Checkpoint {
        model,
        s_x,
        s_q,
        seed: config.rng_seed,
    };
    let report = TrainReport {
        seed: config.rng_seed,
        combination: config.combination,
        pairing: config.pairing,
        epochs_run: curve.len(),
        converged,
        final_s_x: s_x,
        final_s_q: s_q,
        parameter_count: checkpoint.model.parameter_count(),
        parameter_digest: parameter_digest(&checkpoint),
        loss_curve: curve,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    log::info!(
        "trained {} ({} pairing, seed {}) for {} epochs in {:.1}s",
        report.combination,
        report.pairing,
        report.seed,
        report.epochs_run,
        report.wall_time_s
    );
    Ok(TrainOutcome { report, checkpoint })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub scene: String,
    pub combination: Combination,
    pub seed: u64,
    pub median_pos_m: f64,
    pub median_ort_deg: f64,
}

/// Trains and evaluates every `(combination, seed)` run. Rows are ordered by
/// combination as given, then by seed.
pub fn run_ablation(
    train_scene: &Scene,
    test_scene: &Scene,
    base: &TrainConfig,
    combinations: &[Combination],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(usize, Combination, u64)> = combinations
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| seeds.iter().map(move |&s| (i, c, s)))
        .collect();
    let mut rows = jobs
        .par_iter()
        .map(|&(i, combination, seed)| {
            let config = TrainConfig {
                combination,
                rng_seed: seed,
                ..base.clone()
            };
            let outcome = train(train_scene, &config)?;
            let result: SceneResult = evaluate(&outcome.checkpoint.model, test_scene)?;
            Ok((
                (i, seed),
                AblationRow {
                    scene: test_scene.name.clone(),
                    combination,
                    seed,
                    median_pos_m: result.median_position_error_m,
                    median_ort_deg: result.median_orientation_error_deg,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|(k, _)| *k);
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

/// Ablation table as CSV; meters to 3 decimals, degrees to 2.
pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::InvalidConfig(format!("csv: {e}"));
    w.write_record(["scene", "combination", "seed", "median_pos_m", "median_ort_deg"])
        .map_err(err)?;
    for r in rows {
        w.write_record([
            r.scene.clone(),
            r.combination.to_string(),
            r.seed.to_string(),
            format!("{:.3}", r.median_pos_m),
            format!("{:.2}", r.median_ort_deg),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Mean feature distance between the frames of each aliased pair.
pub fn aliased_feature_distance(model: &SiameseModel, scene: &Scene) -> Result<Option<f64>> {
    if scene.aliased_pairs.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for (a, b) in &scene.aliased_pairs {
        let fa = model.encode(&scene.frame(a)?.descriptor, Mode::Eval)?;
        let fb = model.encode(&scene.frame(b)?.descriptor, Mode::Eval)?;
        total += crate::dataset::descriptor_distance(&fa, &fb);
    }
    Ok(Some(total / scene.aliased_pairs.len() as f64))
}
