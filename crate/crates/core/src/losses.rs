//! Differentiable pose and metric losses.
//!
//! Every function here records onto a caller-supplied [`Graph`] and works on
//! batches: positions are `n x 3` tensors, quaternions `n x 4` in `(w, x, y, z)`
//! order, features `n x d`. Euclidean losses are reduced by the mean over the
//! batch; the metric losses use the reductions of their own definitions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::pose::{relative_pose, Pose, MIN_QUATERNION_NORM};

pub const DEFAULT_ALPHA: f64 = 10.0;
pub const DEFAULT_MARGIN: f64 = 0.001;
pub const DEFAULT_S_X: f64 = 0.0;
pub const DEFAULT_S_Q: f64 = -3.0;

/// Balancing scalars for the position and orientation terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub s_x: f64,
    pub s_q: f64,
    /// When set, the fixed `L_x + beta * L_q` form is used instead of the
    /// learnable one.
    pub beta: Option<f64>,
    /// Weight of the orientation distance inside the adaptive margin.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            s_x: DEFAULT_S_X,
            s_q: DEFAULT_S_Q,
            beta: None,
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// How the position and orientation totals are combined.
#[derive(Debug, Clone, Copy)]
pub enum Weighting {
    /// `L_x * exp(-s_x) + s_x + L_q * exp(-s_q) + s_q`, with `s_x`, `s_q`
    /// graph nodes (usually leaves).
    Learnable { s_x: Var, s_q: Var },
    /// `L_x + beta * L_q`.
    FixedBeta(f64),
}

/// Loss combinations compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Combination {
    G,
    GC,
    GCR,
    GM,
    GR,
    Full,
    Siamese,
    Triplet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricTerm {
    None,
    MetricDistance,
    Siamese,
    Triplet,
}

impl Combination {
    pub const ALL: [Combination; 8] = [
        Combination::G,
        Combination::GC,
        Combination::GCR,
        Combination::GM,
        Combination::GR,
        Combination::Full,
        Combination::Siamese,
        Combination::Triplet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Combination::G => "G",
            Combination::GC => "G+C",
            Combination::GCR => "G+C+R",
            Combination::GM => "G+M",
            Combination::GR => "G+R",
            Combination::Full => "full",
            Combination::Siamese => "siamese",
            Combination::Triplet => "triplet",
        }
    }

    pub fn uses_consistency(self) -> bool {
        matches!(
            self,
            Combination::GC
                | Combination::GCR
                | Combination::Full
                | Combination::Siamese
                | Combination::Triplet
        )
    }

    pub fn uses_regression(self) -> bool {
        matches!(
            self,
            Combination::GCR
                | Combination::GR
                | Combination::Full
                | Combination::Siamese
                | Combination::Triplet
        )
    }

    pub fn metric(self) -> MetricTerm {
        match self {
            Combination::GM | Combination::Full => MetricTerm::MetricDistance,
            Combination::Siamese => MetricTerm::Siamese,
            Combination::Triplet => MetricTerm::Triplet,
            _ => MetricTerm::None,
        }
    }
}

impl fmt::Display for Combination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl TryFrom<String> for Combination {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Combination> for String {
    fn from(c: Combination) -> String {
        c.as_str().to_string()
    }
}

impl FromStr for Combination {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Combination::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown loss combination `{s}`")))
    }
}

/// Positions and raw quaternions as constant `n x 3` / `n x 4` tensors.
pub fn pose_constants(g: &mut Graph, poses: &[Pose]) -> Result<(Var, Var)> {
    let xs: Vec<[f64; 3]> = poses.iter().map(|p| p.position.to_array()).collect();
    let qs: Vec<[f64; 4]> = poses.iter().map(|p| p.orientation.to_array()).collect();
    Ok((
        g.constant(Tensor::from_rows(&xs)?),
        g.constant(Tensor::from_rows(&qs)?),
    ))
}

/// Scales every row of `q` to unit length.
pub fn normalize_rows(g: &mut Graph, q: Var) -> Result<Var> {
    let norms = g.row_norm(q)?;
    if let Some(&norm) = g
        .value(norms)
        .data()
        .iter()
        .find(|n| !(**n > MIN_QUATERNION_NORM))
    {
        return Err(Error::ZeroNormQuaternion { norm });
    }
    g.div_rows(q, norms)
}

/// Row-wise Hamilton product `a * b` of `n x 4` quaternion batches.
pub fn quat_mul_rows(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let ac: Vec<Var> = (0..4).map(|i| g.slice(a, i, i + 1)).collect::<Result<_>>()?;
    let bc: Vec<Var> = (0..4).map(|i| g.slice(b, i, i + 1)).collect::<Result<_>>()?;
    // (sign, a index, b index) for each output component
    const TERMS: [[(f64, usize, usize); 4]; 4] = [
        [(1.0, 0, 0), (-1.0, 1, 1), (-1.0, 2, 2), (-1.0, 3, 3)],
        [(1.0, 0, 1), (1.0, 1, 0), (1.0, 2, 3), (-1.0, 3, 2)],
        [(1.0, 0, 2), (-1.0, 1, 3), (1.0, 2, 0), (1.0, 3, 1)],
        [(1.0, 0, 3), (1.0, 1, 2), (-1.0, 2, 1), (1.0, 3, 0)],
    ];
    let mut cols = Vec::with_capacity(4);
    for terms in TERMS {
        let mut acc = g.mul(ac[terms[0].1], bc[terms[0].2])?;
        for &(sign, i, j) in &terms[1..] {
            let p = g.mul(ac[i], bc[j])?;
            acc = if sign > 0.0 { g.add(acc, p)? } else { g.sub(acc, p)? };
        }
        cols.push(acc);
    }
    g.concat(&cols)
}

/// Row-wise quaternion conjugate.
pub fn quat_conjugate_rows(g: &mut Graph, q: Var) -> Result<Var> {
    let n = g.value(q).rows();
    let signs = [1.0, -1.0, -1.0, -1.0].repeat(n);
    let s = g.constant(Tensor::new(vec![n, 4], signs)?);
    g.mul(q, s)
}

/// Flips rows onto the `w >= 0` hemisphere. The sign pattern is read from the
/// forward values and treated as a constant.
pub fn canonicalize_rows(g: &mut Graph, q: Var) -> Result<Var> {
    let t = g.value(q);
    let signs: Vec<f64> = (0..t.rows())
        .map(|r| {
            let row = t.row_slice(r);
            let c = crate::pose::Quaternion::new(row[0], row[1], row[2], row[3]).canonicalize();
            if c.w == row[0] && c.x == row[1] && c.y == row[2] && c.z == row[3] {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    let n = signs.len();
    let s = g.constant(Tensor::new(vec![n, 1], signs)?);
    g.mul_rows(q, s)
}

fn mean_row_distance(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let n = g.row_norm(d)?;
    g.mean(n)
}

/// Position and orientation terms of the global pose loss.
///
/// `L_Gx = |x - x_hat|`, `L_Gq = |q - q_hat / |q_hat||`, each averaged over
/// the batch.
pub fn global_loss(
    g: &mut Graph,
    x_hat: Var,
    q_hat_raw: Var,
    gt_x: Var,
    gt_q: Var,
) -> Result<(Var, Var)> {
    let lx = mean_row_distance(g, gt_x, x_hat)?;
    let qn = normalize_rows(g, q_hat_raw)?;
    let lq = mean_row_distance(g, gt_q, qn)?;
    Ok((lx, lq))
}

/// Combines position and orientation totals into one scalar.
pub fn weighted_global(g: &mut Graph, l_x: Var, l_q: Var, weighting: Weighting) -> Result<Var> {
    match weighting {
        Weighting::FixedBeta(beta) => {
            let wq = g.scale(l_q, beta)?;
            g.add(l_x, wq)
        }
        Weighting::Learnable { s_x, s_q } => {
            let tx = homoscedastic_term(g, l_x, s_x)?;
            let tq = homoscedastic_term(g, l_q, s_q)?;
            g.add(tx, tq)
        }
    }
}

fn homoscedastic_term(g: &mut Graph, l: Var, s: Var) -> Result<Var> {
    let neg = g.neg(s)?;
    let w = g.exp(neg)?;
    let t = g.mul(l, w)?;
    g.add(t, s)
}

/// Relative pose implied by two predicted global poses, canonicalized.
pub fn predicted_relative(
    g: &mut Graph,
    x_cur: Var,
    q_cur_raw: Var,
    x_ref: Var,
    q_ref_raw: Var,
) -> Result<(Var, Var)> {
    let x_rel = g.sub(x_cur, x_ref)?;
    let qc = normalize_rows(g, q_cur_raw)?;
    let qr = normalize_rows(g, q_ref_raw)?;
    let qr_conj = quat_conjugate_rows(g, qr)?;
    let q_rel = quat_mul_rows(g, qr_conj, qc)?;
    let q_rel = canonicalize_rows(g, q_rel)?;
    Ok((x_rel, q_rel))
}

/// Consistency between the relative pose of two predicted global poses and
/// the ground-truth relative pose: `(L_Cx, L_Cq)`.
#[allow(clippy::too_many_arguments)]
pub fn rel_consistency_loss(
    g: &mut Graph,
    x_cur: Var,
    q_cur_raw: Var,
    x_ref: Var,
    q_ref_raw: Var,
    gt_rel_x: Var,
    gt_rel_q: Var,
) -> Result<(Var, Var)> {
    let (x_rel, q_rel) = predicted_relative(g, x_cur, q_cur_raw, x_ref, q_ref_raw)?;
    let lx = mean_row_distance(g, x_rel, gt_rel_x)?;
    let lq = mean_row_distance(g, q_rel, gt_rel_q)?;
    Ok((lx, lq))
}

/// Loss on the directly regressed relative pose: `(L_Rx, L_Rq)`.
pub fn rel_regression_loss(
    g: &mut Graph,
    x_rel_hat: Var,
    q_rel_raw: Var,
    gt_rel_x: Var,
    gt_rel_q: Var,
) -> Result<(Var, Var)> {
    let lx = mean_row_distance(g, gt_rel_x, x_rel_hat)?;
    let qn = normalize_rows(g, q_rel_raw)?;
    let lq = mean_row_distance(g, gt_rel_q, qn)?;
    Ok((lx, lq))
}

/// Pose-dependent margins `d_x + alpha * d_q` from ground truth, one per pair.
///
/// Quaternions are compared on the canonical hemisphere.
pub fn adaptive_margins(current: &[Pose], reference: &[Pose], alpha: f64) -> Vec<f64> {
    current
        .iter()
        .zip(reference)
        .map(|(c, r)| {
            let dx = (c.position - r.position).norm();
            let qc = c.orientation.canonicalize().to_array();
            let qr = r.orientation.canonicalize().to_array();
            let dq = qc
                .iter()
                .zip(qr)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dx + alpha * dq
        })
        .collect()
}

/// `(1 / 2N) * sum max(margin_n - |f_n - f_ref_n|, 0)^2`.
fn squared_hinge_on_distance(g: &mut Graph, f: Var, f_ref: Var, margins: &[f64]) -> Result<Var> {
    let n = g.value(f).rows();
    if margins.len() != n {
        return Err(Error::ShapeMismatch {
            op: "metric loss",
            detail: format!("{} margins for {n} pairs", margins.len()),
        });
    }
    let diff = g.sub(f, f_ref)?;
    let d = g.row_norm(diff)?;
    let m = g.constant(Tensor::new(vec![n, 1], margins.to_vec())?);
    let slack = g.sub(m, d)?;
    let hinge = g.relu(slack)?;
    let sq = g.square(hinge)?;
    let total = g.sum(sq)?;
    g.scale(total, 0.5 / n as f64)
}

/// Adaptive metric-distance loss. Gradients reach only the features.
pub fn metric_distance_loss(
    g: &mut Graph,
    f: Var,
    f_ref: Var,
    current: &[Pose],
    reference: &[Pose],
    alpha: f64,
) -> Result<Var> {
    let margins = adaptive_margins(current, reference, alpha);
    squared_hinge_on_distance(g, f, f_ref, &margins)
}

/// Contrastive loss with every pair labelled dissimilar, so only the
/// repulsive term `max(m - d, 0)^2` remains.
pub fn siamese_loss(g: &mut Graph, f: Var, f_ref: Var, margin: f64) -> Result<Var> {
    let n = g.value(f).rows();
    squared_hinge_on_distance(g, f, f_ref, &vec![margin; n])
}

/// `sum [ |a - p|^2 - |a - n|^2 + m ]_+` over the batch.
pub fn triplet_loss(g: &mut Graph, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    let dp = g.sub(anchor, positive)?;
    let dp = g.square(dp)?;
    let dp = g.sum_rows(dp)?;
    let dn = g.sub(anchor, negative)?;
    let dn = g.square(dn)?;
    let dn = g.sum_rows(dn)?;
    let t = g.sub(dp, dn)?;
    let t = g.add_scalar(t, margin)?;
    let t = g.relu(t)?;
    g.sum(t)
}

/// Network outputs for a batch of pairs, already recorded on the graph.
#[derive(Debug, Clone, Copy)]
pub struct PairOutputs {
    pub x_cur: Var,
    pub q_cur: Var,
    pub x_ref: Var,
    pub q_ref: Var,
    pub f_cur: Var,
    pub f_ref: Var,
    /// Directly regressed relative pose `(x_rel, q_rel_raw)`.
    pub relative: Option<(Var, Var)>,
    /// Features of the triplet negatives.
    pub f_neg: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub alpha: f64,
    pub margin: f64,
    /// Average the global loss over both frames of a pair rather than using
    /// the current frame only.
    pub global_both_frames: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            margin: DEFAULT_MARGIN,
            global_both_frames: true,
        }
    }
}

/// Every term of one evaluation of the comprehensive loss.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub l_x: Var,
    pub l_q: Var,
    pub global: (Var, Var),
    pub consistency: Option<(Var, Var)>,
    pub regression: Option<(Var, Var)>,
    pub metric: Option<Var>,
}

/// Weighted sum of the terms selected by `combination`.
///
/// `L_x` and `L_q` collect the global, consistency and regression terms and go
/// through `weighting`; the metric term is added unweighted.
pub fn comprehensive_loss(
    g: &mut Graph,
    out: &PairOutputs,
    current: &[Pose],
    reference: &[Pose],
    combination: Combination,
    weighting: Weighting,
    settings: &LossSettings,
) -> Result<LossTerms> {
    if current.is_empty() || current.len() != reference.len() {
        return Err(Error::ShapeMismatch {
            op: "comprehensive_loss",
            detail: format!("{} current vs {} reference poses", current.len(), reference.len()),
        });
    }
    let (cx, cq) = pose_constants(g, current)?;
    let global = {
        let (gx, gq) = global_loss(g, out.x_cur, out.q_cur, cx, cq)?;
        if settings.global_both_frames {
            let (rx, rq) = pose_constants(g, reference)?;
            let (gx2, gq2) = global_loss(g, out.x_ref, out.q_ref, rx, rq)?;
            let sx = g.add(gx, gx2)?;
            let sq = g.add(gq, gq2)?;
            (g.scale(sx, 0.5)?, g.scale(sq, 0.5)?)
        } else {
            (gx, gq)
        }
    };
    let (mut l_x, mut l_q) = global;

    let needs_rel_truth = combination.uses_consistency() || combination.uses_regression();
    let rel_truth = if needs_rel_truth {
        let rels: Vec<_> = current
            .iter()
            .zip(reference)
            .map(|(c, r)| relative_pose(c, r))
            .collect();
        let xs: Vec<[f64; 3]> = rels.iter().map(|r| r.position.to_array()).collect();
        let qs: Vec<[f64; 4]> = rels.iter().map(|r| r.orientation.to_array()).collect();
        Some((
            g.constant(Tensor::from_rows(&xs)?),
            g.constant(Tensor::from_rows(&qs)?),
        ))
    } else {
        None
    };

    let consistency = match rel_truth {
        Some((tx, tq)) if combination.uses_consistency() => {
            let (lcx, lcq) =
                rel_consistency_loss(g, out.x_cur, out.q_cur, out.x_ref, out.q_ref, tx, tq)?;
            l_x = g.add(l_x, lcx)?;
            l_q = g.add(l_q, lcq)?;
            Some((lcx, lcq))
        }
        _ => None,
    };

    let regression = match rel_truth {
        Some((tx, tq)) if combination.uses_regression() => {
            let (xr, qr) = out.relative.ok_or_else(|| Error::MissingHead {
                combination: combination.to_string(),
            })?;
            let (lrx, lrq) = rel_regression_loss(g, xr, qr, tx, tq)?;
            l_x = g.add(l_x, lrx)?;
            l_q = g.add(l_q, lrq)?;
            Some((lrx, lrq))
        }
        _ => None,
    };

    let mut total = weighted_global(g, l_x, l_q, weighting)?;

    let metric = match combination.metric() {
        MetricTerm::None => None,
        MetricTerm::MetricDistance => Some(metric_distance_loss(
            g,
            out.f_cur,
            out.f_ref,
            current,
            reference,
            settings.alpha,
        )?),
        MetricTerm::Siamese => Some(siamese_loss(g, out.f_cur, out.f_ref, settings.margin)?),
        MetricTerm::Triplet => {
            let f_neg = out.f_neg.ok_or_else(|| {
                Error::InvalidConfig("triplet loss needs negative-frame features".into())
            })?;
            Some(triplet_loss(g, out.f_cur, out.f_ref, f_neg, settings.margin)?)
        }
    };
    if let Some(m) = metric {
        total = g.add(total, m)?;
    }

    Ok(LossTerms {
        total,
        l_x,
        l_q,
        global,
        consistency,
        regression,
        metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::pose::{Position, Quaternion};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn val(g: &Graph, v: Var) -> f64 {
        g.value(v).item()
    }

    fn c(g: &mut Graph, rows: &[&[f64]]) -> Var {
        g.constant(Tensor::from_rows(rows).unwrap())
    }

    fn random_unit(rng: &mut impl Rng) -> Quaternion {
        loop {
            let q = Quaternion::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if q.norm() > 0.1 {
                return q.normalize().unwrap().canonicalize();
            }
        }
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        Pose::new(
            Position::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ),
            random_unit(rng),
        )
        .unwrap()
    }

    #[test]
    fn global_loss_examples() {
        let mut g = Graph::new();
        let q = Quaternion::new(0.5, 0.5, -0.5, 0.5);
        let x = c(&mut g, &[&[1.0, 2.0, 3.0]]);
        let qv = c(&mut g, &[&q.to_array()]);
        let (lx, lq) = global_loss(&mut g, x, qv, x, qv).unwrap();
        assert_eq!((val(&g, lx), val(&g, lq)), (0.0, 0.0));

        let origin = c(&mut g, &[&[0.0, 0.0, 0.0]]);
        let pred = c(&mut g, &[&[3.0, 4.0, 0.0]]);
        let ident = c(&mut g, &[&[1.0, 0.0, 0.0, 0.0]]);
        let scaled = c(&mut g, &[&[2.0, 0.0, 0.0, 0.0]]);
        let (lx, lq) = global_loss(&mut g, pred, scaled, origin, ident).unwrap();
        assert_eq!(val(&g, lx), 5.0);
        assert_eq!(val(&g, lq), 0.0);
    }

    #[test]
    fn global_loss_rejects_zero_quaternion() {
        let mut g = Graph::new();
        let x = c(&mut g, &[&[0.0, 0.0, 0.0]]);
        let zero = c(&mut g, &[&[0.0, 0.0, 0.0, 0.0]]);
        let ident = c(&mut g, &[&[1.0, 0.0, 0.0, 0.0]]);
        let err = global_loss(&mut g, x, zero, x, ident).unwrap_err();
        assert!(matches!(err, Error::ZeroNormQuaternion { .. }));
    }

    #[test]
    fn weighted_global_examples() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::scalar(1.0));
        let two = g.constant(Tensor::scalar(2.0));
        let half = g.constant(Tensor::scalar(0.5));
        let zero = g.constant(Tensor::scalar(0.0));
        let s_x = g.leaf(Tensor::scalar(0.0));
        let s_q = g.leaf(Tensor::scalar(0.0));
        let l = weighted_global(&mut g, one, two, Weighting::Learnable { s_x, s_q }).unwrap();
        assert_eq!(val(&g, l), 3.0);

        let l = weighted_global(&mut g, one, half, Weighting::FixedBeta(10.0)).unwrap();
        assert_eq!(val(&g, l), 6.0);

        let s_q3 = g.leaf(Tensor::scalar(-3.0));
        let l = weighted_global(&mut g, zero, zero, Weighting::Learnable { s_x, s_q: s_q3 }).unwrap();
        assert_eq!(val(&g, l), -3.0);
    }

    #[test]
    fn learnable_scalars_get_gradients() {
        let mut g = Graph::new();
        let lx = g.constant(Tensor::scalar(0.7));
        let lq = g.constant(Tensor::scalar(0.2));
        let s_x = g.leaf(Tensor::scalar(0.0));
        let s_q = g.leaf(Tensor::scalar(-3.0));
        let l = weighted_global(&mut g, lx, lq, Weighting::Learnable { s_x, s_q }).unwrap();
        let grads = g.backward(l).unwrap();
        // d/ds (L e^-s + s) = 1 - L e^-s
        assert!((grads.get(s_x).unwrap().item() - (1.0 - 0.7)).abs() < 1e-15);
        let expect = 1.0 - 0.2 * 3f64.exp();
        assert!((grads.get(s_q).unwrap().item() - expect).abs() < 1e-12);
    }

    #[test]
    fn consistency_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
        let rel = relative_pose(&a, &b);

        let mut g = Graph::new();
        let (ax, aq) = pose_constants(&mut g, &[a]).unwrap();
        let (bx, bq) = pose_constants(&mut g, &[b]).unwrap();
        let tx = c(&mut g, &[&rel.position.to_array()]);
        let tq = c(&mut g, &[&rel.orientation.to_array()]);
        let (lx, lq) = rel_consistency_loss(&mut g, ax, aq, bx, bq, tx, tq).unwrap();
        assert!(val(&g, lx) < 1e-15 && val(&g, lq) < 1e-15);

        // common shift of both predictions leaves the position term at zero
        let shift = c(&mut g, &[&[0.4, -7.0, 2.5]]);
        let ax2 = g.add(ax, shift).unwrap();
        let bx2 = g.add(bx, shift).unwrap();
        let (lx, _) = rel_consistency_loss(&mut g, ax2, aq, bx2, bq, tx, tq).unwrap();
        assert!(val(&g, lx) < 1e-14);
    }

    #[test]
    fn consistency_matches_pose_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            let (pa, pb) = (random_pose(&mut rng), random_pose(&mut rng));
            let scale_a = rng.random_range(0.2..3.0);
            let scale_b = rng.random_range(0.2..3.0);
            let raw_a: Vec<f64> = pa.orientation.to_array().iter().map(|v| v * scale_a).collect();
            let raw_b: Vec<f64> = pb.orientation.to_array().iter().map(|v| v * scale_b).collect();

            let truth = relative_pose(&a, &b);
            let pred = relative_pose(&pa, &pb);
            let expect_x = position_dist(pred.position, truth.position);
            let expect_q = quat_dist(pred.orientation, truth.orientation);

            let mut g = Graph::new();
            let ax = c(&mut g, &[&pa.position.to_array()]);
            let aq = c(&mut g, &[&raw_a]);
            let bx = c(&mut g, &[&pb.position.to_array()]);
            let bq = c(&mut g, &[&raw_b]);
            let tx = c(&mut g, &[&truth.position.to_array()]);
            let tq = c(&mut g, &[&truth.orientation.to_array()]);
            let (lx, lq) = rel_consistency_loss(&mut g, ax, aq, bx, bq, tx, tq).unwrap();
            assert!((val(&g, lx) - expect_x).abs() < 1e-12);
            assert!((val(&g, lq) - expect_q).abs() < 1e-12);
        }
    }

    fn position_dist(a: Position, b: Position) -> f64 {
        (a - b).norm()
    }

    fn quat_dist(a: Quaternion, b: Quaternion) -> f64 {
        a.to_array()
            .iter()
            .zip(b.to_array())
            .map(|(u, v)| (u - v) * (u - v))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn regression_examples() {
        let mut g = Graph::new();
        let q = [0.6, 0.0, 0.8, 0.0];
        let tx = c(&mut g, &[&[1.0, 0.0, 0.0]]);
        let tq = c(&mut g, &[&q]);
        let (lx, lq) = rel_regression_loss(&mut g, tx, tq, tx, tq).unwrap();
        assert_eq!((val(&g, lx), val(&g, lq)), (0.0, 0.0));

        let five_q = c(&mut g, &[&[3.0, 0.0, 4.0, 0.0]]);
        let zero = c(&mut g, &[&[0.0, 0.0, 0.0]]);
        let (lx, lq) = rel_regression_loss(&mut g, zero, five_q, tx, tq).unwrap();
        assert_eq!(val(&g, lx), 1.0);
        assert!(val(&g, lq) < 1e-16);
    }

    #[test]
    fn metric_distance_examples() {
        // d = 0.5, d_x = 0.3, d_q = 0.05, alpha = 10 -> 0.5 * 0.3^2 = 0.045
        let mut g = Graph::new();
        let f = c(&mut g, &[&[0.5, 0.0]]);
        let f_ref = c(&mut g, &[&[0.0, 0.0]]);
        let a = Pose::new(Position::new(0.3, 0.0, 0.0), Quaternion::IDENTITY).unwrap();
        // chordal distance 0.05 from identity: w = 1 - 0.05^2/2
        let w: f64 = 1.0 - 0.05 * 0.05 / 2.0;
        let q = Quaternion::new(w, (1.0 - w * w).sqrt(), 0.0, 0.0);
        let b = Pose::new(Position::ORIGIN, q).unwrap();
        let l = metric_distance_loss(&mut g, f, f_ref, &[a], &[b], 10.0).unwrap();
        assert!((val(&g, l) - 0.045).abs() < 1e-12, "{}", val(&g, l));

        // hinge inactive when features are already far apart
        let far = c(&mut g, &[&[5.0, 0.0]]);
        let l = metric_distance_loss(&mut g, far, f_ref, &[a], &[b], 10.0).unwrap();
        assert_eq!(val(&g, l), 0.0);

        // identical features and poses
        let l = metric_distance_loss(&mut g, f, f, &[a], &[a], 10.0).unwrap();
        assert_eq!(val(&g, l), 0.0);
    }

    #[test]
    fn metric_distance_gradient_zero_when_inactive() {
        let mut g = Graph::new();
        let f = g.leaf(Tensor::from_rows(&[[4.0, 0.0], [0.0, 0.1]]).unwrap());
        let f_ref = g.leaf(Tensor::from_rows(&[[0.0, 0.0], [0.0, 0.0]]).unwrap());
        let a = Pose::new(Position::new(1.0, 0.0, 0.0), Quaternion::IDENTITY).unwrap();
        let b = Pose::identity();
        let l = metric_distance_loss(&mut g, f, f_ref, &[a, a], &[b, b], 10.0).unwrap();
        let grads = g.backward(l).unwrap();
        let gf = grads.get(f).unwrap();
        assert_eq!(gf.row_slice(0), &[0.0, 0.0]);
        assert!(gf.row_slice(1)[1] < 0.0);
    }

    #[test]
    fn siamese_examples() {
        let mut g = Graph::new();
        let f = c(&mut g, &[&[0.0, 0.0]]);
        let l = siamese_loss(&mut g, f, f, 0.001).unwrap();
        assert!((val(&g, l) - 5e-7).abs() < 1e-20);
        let far = c(&mut g, &[&[1.0, 0.0]]);
        let l = siamese_loss(&mut g, f, far, 0.001).unwrap();
        assert_eq!(val(&g, l), 0.0);
    }

    #[test]
    fn triplet_examples() {
        let mut g = Graph::new();
        // |a-p|^2 = 0.5, |a-n|^2 = 0.2, m = 0.001 -> 0.301
        let a = c(&mut g, &[&[0.0, 0.0]]);
        let p = c(&mut g, &[&[0.5, 0.5]]);
        let n = c(&mut g, &[&[0.2f64.sqrt(), 0.0]]);
        let l = triplet_loss(&mut g, a, p, n, 0.001).unwrap();
        assert!((val(&g, l) - 0.301).abs() < 1e-12);

        // positive == negative -> N * m
        let a3 = c(&mut g, &[&[0.0, 1.0], &[1.0, 1.0], &[2.0, 0.0]]);
        let p3 = c(&mut g, &[&[0.3, 1.0], &[0.0, 0.0], &[5.0, 1.0]]);
        let l = triplet_loss(&mut g, a3, p3, p3, 0.001).unwrap();
        assert!((val(&g, l) - 0.003).abs() < 1e-15);

        // satisfied triplet
        let n_far = c(&mut g, &[&[1.0, 0.0]]);
        let l = triplet_loss(&mut g, a, a, n_far, 0.001).unwrap();
        assert_eq!(val(&g, l), 0.0);
    }

    #[test]
    fn combination_identifiers_round_trip() {
        for c in Combination::ALL {
            assert_eq!(c.as_str().parse::<Combination>().unwrap(), c);
        }
        assert!("G+X".parse::<Combination>().is_err());
    }

    struct Fixture {
        current: Vec<Pose>,
        reference: Vec<Pose>,
        tensors: Vec<Tensor>,
    }

    /// Random predictions and features for `n` pairs. Tensor order: x_cur,
    /// q_cur, x_ref, q_ref, f_cur, f_ref, x_rel, q_rel, f_neg.
    fn fixture(seed: u64, n: usize) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let current: Vec<Pose> = (0..n).map(|_| random_pose(&mut rng)).collect();
        let reference: Vec<Pose> = (0..n).map(|_| random_pose(&mut rng)).collect();
        let mut mat = |cols: usize, scale: f64| {
            Tensor::new(
                vec![n, cols],
                (0..n * cols).map(|_| rng.random_range(-scale..scale)).collect(),
            )
            .unwrap()
        };
        let tensors = vec![
            mat(3, 2.0),
            mat(4, 1.0),
            mat(3, 2.0),
            mat(4, 1.0),
            mat(6, 0.3),
            mat(6, 0.3),
            mat(3, 2.0),
            mat(4, 1.0),
            mat(6, 0.3),
        ];
        Fixture {
            current,
            reference,
            tensors,
        }
    }

    fn outputs(v: &[Var]) -> PairOutputs {
        PairOutputs {
            x_cur: v[0],
            q_cur: v[1],
            x_ref: v[2],
            q_ref: v[3],
            f_cur: v[4],
            f_ref: v[5],
            relative: Some((v[6], v[7])),
            f_neg: Some(v[8]),
        }
    }

    fn comprehensive_value(fx: &Fixture, combo: Combination, s: (f64, f64)) -> f64 {
        let mut g = Graph::new();
        let v: Vec<Var> = fx.tensors.iter().map(|t| g.constant(t.clone())).collect();
        let s_x = g.leaf(Tensor::scalar(s.0));
        let s_q = g.leaf(Tensor::scalar(s.1));
        let terms = comprehensive_loss(
            &mut g,
            &outputs(&v),
            &fx.current,
            &fx.reference,
            combo,
            Weighting::Learnable { s_x, s_q },
            &LossSettings::default(),
        )
        .unwrap();
        g.value(terms.total).item()
    }

    #[test]
    fn combination_g_reduces_to_weighted_global() {
        let fx = fixture(3, 4);
        let mut g = Graph::new();
        let v: Vec<Var> = fx.tensors.iter().map(|t| g.constant(t.clone())).collect();
        let (cx, cq) = pose_constants(&mut g, &fx.current).unwrap();
        let (rx, rq) = pose_constants(&mut g, &fx.reference).unwrap();
        let (a, b) = global_loss(&mut g, v[0], v[1], cx, cq).unwrap();
        let (c2, d) = global_loss(&mut g, v[2], v[3], rx, rq).unwrap();
        let lx = 0.5 * (val(&g, a) + val(&g, c2));
        let lq = 0.5 * (val(&g, b) + val(&g, d));
        let expect = lx * 0.3f64.exp() - 0.3 + lq * 2f64.exp() - 2.0;
        let got = comprehensive_value(&fx, Combination::G, (-0.3, -2.0));
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn full_equals_gcr_plus_metric() {
        let fx = fixture(5, 6);
        let full = comprehensive_value(&fx, Combination::Full, (0.0, -3.0));
        let gcr = comprehensive_value(&fx, Combination::GCR, (0.0, -3.0));
        let mut g = Graph::new();
        let f = g.constant(fx.tensors[4].clone());
        let fr = g.constant(fx.tensors[5].clone());
        let md = metric_distance_loss(&mut g, f, fr, &fx.current, &fx.reference, DEFAULT_ALPHA).unwrap();
        let md = val(&g, md);
        assert!(md > 0.0);
        assert!((full - (gcr + md)).abs() < 1e-12);
        assert!(full >= gcr);
    }

    #[test]
    fn full_with_zero_components() {
        // Perfect predictions and widely separated features.
        let a = Pose::new(Position::new(0.0, 0.0, 0.0), Quaternion::IDENTITY).unwrap();
        let b = Pose::new(Position::new(0.1, 0.0, 0.0), Quaternion::IDENTITY).unwrap();
        let rel = relative_pose(&a, &b);
        let mut g = Graph::new();
        let (ax, aq) = pose_constants(&mut g, &[a]).unwrap();
        let (bx, bq) = pose_constants(&mut g, &[b]).unwrap();
        let f = c(&mut g, &[&[10.0, 0.0]]);
        let fr = c(&mut g, &[&[0.0, 0.0]]);
        let rx = c(&mut g, &[&rel.position.to_array()]);
        let rq = c(&mut g, &[&rel.orientation.to_array()]);
        let s_x = g.leaf(Tensor::scalar(0.0));
        let s_q = g.leaf(Tensor::scalar(-3.0));
        let out = PairOutputs {
            x_cur: ax,
            q_cur: aq,
            x_ref: bx,
            q_ref: bq,
            f_cur: f,
            f_ref: fr,
            relative: Some((rx, rq)),
            f_neg: None,
        };
        let terms = comprehensive_loss(
            &mut g,
            &out,
            &[a],
            &[b],
            Combination::Full,
            Weighting::Learnable { s_x, s_q },
            &LossSettings::default(),
        )
        .unwrap();
        assert!((val(&g, terms.total) + 3.0).abs() < 1e-15);
    }

    #[test]
    fn missing_relative_head_is_reported() {
        let fx = fixture(9, 2);
        let mut g = Graph::new();
        let v: Vec<Var> = fx.tensors.iter().map(|t| g.constant(t.clone())).collect();
        let mut out = outputs(&v);
        out.relative = None;
        for combo in [Combination::GR, Combination::GCR, Combination::Full] {
            let err = comprehensive_loss(
                &mut g,
                &out,
                &fx.current,
                &fx.reference,
                combo,
                Weighting::FixedBeta(1.0),
                &LossSettings::default(),
            )
            .unwrap_err();
            assert!(matches!(err, Error::MissingHead { .. }));
        }
        assert!(comprehensive_loss(
            &mut g,
            &out,
            &fx.current,
            &fx.reference,
            Combination::GM,
            Weighting::FixedBeta(1.0),
            &LossSettings::default(),
        )
        .is_ok());
    }

    #[test]
    fn comprehensive_gradcheck_all_combinations() {
        let fx = fixture(21, 3);
        let mut point = fx.tensors.clone();
        point.push(Tensor::scalar(0.1));
        point.push(Tensor::scalar(-2.5));
        for combo in Combination::ALL {
            let report = gradcheck(
                |g, v| {
                    let terms = comprehensive_loss(
                        g,
                        &outputs(v),
                        &fx.current,
                        &fx.reference,
                        combo,
                        Weighting::Learnable { s_x: v[9], s_q: v[10] },
                        &LossSettings::default(),
                    )?;
                    Ok(terms.total)
                },
                &point,
                1e-6,
                1e-5,
            )
            .unwrap();
            assert!(report.passed, "{combo}: {report:?}");
        }
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative(seed in any::<u64>(), n in 1usize..5) {
            let fx = fixture(seed, n);
            let mut g = Graph::new();
            let v: Vec<Var> = fx.tensors.iter().map(|t| g.constant(t.clone())).collect();
            let (cx, cq) = pose_constants(&mut g, &fx.current).unwrap();
            let (rx, rq) = pose_constants(&mut g, &fx.reference).unwrap();
            let (a, b) = global_loss(&mut g, v[0], v[1], cx, cq).unwrap();
            let (c1, c2) = rel_consistency_loss(&mut g, v[0], v[1], v[2], v[3], rx, rq).unwrap();
            let (r1, r2) = rel_regression_loss(&mut g, v[6], v[7], rx, rq).unwrap();
            let md = metric_distance_loss(&mut g, v[4], v[5], &fx.current, &fx.reference, 10.0).unwrap();
            let si = siamese_loss(&mut g, v[4], v[5], 0.5).unwrap();
            let tr = triplet_loss(&mut g, v[4], v[5], v[8], 0.01).unwrap();
            for l in [a, b, c1, c2, r1, r2, md, si, tr] {
                prop_assert!(val(&g, l) >= 0.0);
            }
        }

        #[test]
        fn quaternion_scale_invariance(seed in any::<u64>(), lambda in 1e-3f64..1e3) {
            let fx = fixture(seed, 3);
            let eval = |scale: f64| {
                let mut g = Graph::new();
                let raw = fx.tensors[1].data().iter().map(|v| v * scale).collect();
                let q = g.constant(Tensor::new(vec![3, 4], raw).unwrap());
                let x = g.constant(fx.tensors[0].clone());
                let (cx, cq) = pose_constants(&mut g, &fx.current).unwrap();
                let (_, lq) = global_loss(&mut g, x, q, cx, cq).unwrap();
                let (_, lr) = rel_regression_loss(&mut g, x, q, cx, cq).unwrap();
                (val(&g, lq), val(&g, lr))
            };
            let (a0, b0) = eval(1.0);
            let (a1, b1) = eval(lambda);
            prop_assert!((a0 - a1).abs() <= 1e-12);
            prop_assert!((b0 - b1).abs() <= 1e-12);
        }
    }
}
