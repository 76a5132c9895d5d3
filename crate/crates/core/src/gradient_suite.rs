//! Finite-difference verification of every loss at random points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradcheck, Graph, Tensor, Var};
use crate::error::Result;
use crate::losses::{
    adaptive_margins, global_loss, metric_distance_loss, predicted_relative, rel_consistency_loss,
    rel_regression_loss, siamese_loss, triplet_loss, weighted_global, Weighting, DEFAULT_ALPHA,
};
use crate::pose::{relative_pose, Pose, Position, Quaternion};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// Losses covered by the suite, in report order.
pub const LOSS_NAMES: [&str; 7] = [
    "global",
    "weighting",
    "consistency",
    "regression",
    "metric_distance",
    "siamese",
    "triplet",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub loss: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

const ROWS: usize = 4;
const FEATURES: usize = 6;
/// Minimum distance of any hinge or sign switch from its boundary.
const CLEARANCE: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive shape")
}

/// Raw quaternion rows with norms in `[0.5, 2]`.
fn raw_quaternions(rng: &mut ChaCha8Rng, rows: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * 4);
    for _ in 0..rows {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = rng.random_range(0.5..2.0) / n;
        data.extend(q.iter().map(|v| v * scale));
    }
    Tensor::new(vec![rows, 4], data).expect("positive shape")
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    Pose::new(Position::from_array(p), Quaternion::from_array(q)).expect("nonzero quaternion")
}

fn poses(rng: &mut ChaCha8Rng) -> Vec<Pose> {
    (0..ROWS).map(|_| random_pose(rng)).collect()
}

fn pose_tensors(ps: &[Pose]) -> (Tensor, Tensor) {
    let xs: Vec<[f64; 3]> = ps.iter().map(|p| p.position.to_array()).collect();
    let qs: Vec<[f64; 4]> = ps.iter().map(|p| p.orientation.to_array()).collect();
    (
        Tensor::from_rows(&xs).expect("rows"),
        Tensor::from_rows(&qs).expect("rows"),
    )
}

fn row_distances(a: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..a.rows())
        .map(|r| {
            a.row_slice(r)
                .iter()
                .zip(b.row_slice(r))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

fn clear_of(values: &[f64]) -> bool {
    values.iter().all(|v| v.abs() > CLEARANCE)
}

fn check_one(loss: &str, rng: &mut ChaCha8Rng, step: f64, tol: f64) -> Result<f64> {
    let report = match loss {
        "global" => {
            let (gx, gq) = pose_tensors(&poses(rng));
            let point = [uniform(rng, ROWS, 3, -2.0, 2.0), raw_quaternions(rng, ROWS)];
            gradcheck(
                |g: &mut Graph, v: &[Var]| {
                    let (tx, tq) = (g.constant(gx.clone()), g.constant(gq.clone()));
                    let (lx, lq) = global_loss(g, v[0], v[1], tx, tq)?;
                    g.add(lx, lq)
                },
                &point,
                step,
                tol,
            )?
        }
        "weighting" => {
            let point = [
                Tensor::scalar(rng.random_range(0.1..5.0)),
                Tensor::scalar(rng.random_range(0.1..5.0)),
                Tensor::scalar(rng.random_range(-3.0..3.0)),
                Tensor::scalar(rng.random_range(-4.0..2.0)),
            ];
            gradcheck(
                |g: &mut Graph, v: &[Var]| weighted_global(g, v[0], v[1], Weighting::Learnable { s_x: v[2], s_q: v[3] }),
                &point,
                step,
                tol,
            )?
        }
        "consistency" => {
            let (cur, refs) = (poses(rng), poses(rng));
            let rel: Vec<Pose> = cur
                .iter()
                .zip(&refs)
                .map(|(c, r)| {
                    let rp = relative_pose(c, r);
                    Pose { position: rp.position, orientation: rp.orientation }
                })
                .collect();
            let (tx, tq) = pose_tensors(&rel);
            // The hemisphere sign of the predicted relative quaternion must not
            // flip inside the difference step.
            let point = loop {
                let p = [
                    uniform(rng, ROWS, 3, -2.0, 2.0),
                    raw_quaternions(rng, ROWS),
                    uniform(rng, ROWS, 3, -2.0, 2.0),
                    raw_quaternions(rng, ROWS),
                ];
                let mut g = Graph::new();
                let v: Vec<Var> = p.iter().map(|t| g.constant(t.clone())).collect();
                let (_, q) = predicted_relative(&mut g, v[0], v[1], v[2], v[3])?;
                let w: Vec<f64> = (0..ROWS).map(|r| g.value(q).row_slice(r)[0]).collect();
                if w.iter().all(|w| *w > 0.05) {
                    break p;
                }
            };
            gradcheck(
                |g: &mut Graph, v: &[Var]| {
                    let (cx, cq) = (g.constant(tx.clone()), g.constant(tq.clone()));
                    let (lx, lq) = rel_consistency_loss(g, v[0], v[1], v[2], v[3], cx, cq)?;
                    g.add(lx, lq)
                },
                &point,
                step,
                tol,
            )?
        }
        "regression" => {
            let (tx, tq) = pose_tensors(&poses(rng));
            let point = [uniform(rng, ROWS, 3, -2.0, 2.0), raw_quaternions(rng, ROWS)];
            gradcheck(
                |g: &mut Graph, v: &[Var]| {
                    let (cx, cq) = (g.constant(tx.clone()), g.constant(tq.clone()));
                    let (lx, lq) = rel_regression_loss(g, v[0], v[1], cx, cq)?;
                    g.add(lx, lq)
                },
                &point,
                step,
                tol,
            )?
        }
        "metric_distance" => {
            let (cur, refs) = (poses(rng), poses(rng));
            let margins = adaptive_margins(&cur, &refs, DEFAULT_ALPHA);
            let point = loop {
                let p = [uniform(rng, ROWS, FEATURES, -3.0, 3.0), uniform(rng, ROWS, FEATURES, -3.0, 3.0)];
                let slack: Vec<f64> = row_distances(&p[0], &p[1]).iter().zip(&margins).map(|(d, m)| m - d).collect();
                if clear_of(&slack) && slack.iter().any(|s| *s > 0.0) {
                    break p;
                }
            };
            gradcheck(
                |g: &mut Graph, v: &[Var]| metric_distance_loss(g, v[0], v[1], &cur, &refs, DEFAULT_ALPHA),
                &point,
                step,
                tol,
            )?
        }
        "siamese" => {
            let margin = rng.random_range(2.0..8.0);
            let point = loop {
                let p = [uniform(rng, ROWS, FEATURES, -2.0, 2.0), uniform(rng, ROWS, FEATURES, -2.0, 2.0)];
                let slack: Vec<f64> = row_distances(&p[0], &p[1]).iter().map(|d| margin - d).collect();
                if clear_of(&slack) && slack.iter().any(|s| *s > 0.0) {
                    break p;
                }
            };
            gradcheck(|g: &mut Graph, v: &[Var]| siamese_loss(g, v[0], v[1], margin), &point, step, tol)?
        }
        "triplet" => {
            let margin = rng.random_range(0.5..5.0);
            let point = loop {
                let p = [
                    uniform(rng, ROWS, FEATURES, -2.0, 2.0),
                    uniform(rng, ROWS, FEATURES, -2.0, 2.0),
                    uniform(rng, ROWS, FEATURES, -2.0, 2.0),
                ];
                let dp = row_distances(&p[0], &p[1]);
                let dn = row_distances(&p[0], &p[2]);
                let t: Vec<f64> = dp.iter().zip(&dn).map(|(a, b)| a * a - b * b + margin).collect();
                if clear_of(&t) && t.iter().any(|s| *s > 0.0) {
                    break p;
                }
            };
            gradcheck(
                |g: &mut Graph, v: &[Var]| triplet_loss(g, v[0], v[1], v[2], margin),
                &point,
                step,
                tol,
            )?
        }
        other => {
            return Err(crate::error::Error::InvalidConfig(format!("unknown loss `{other}`")));
        }
    };
    Ok(report.max_rel_error)
}

/// Checks every loss at `points` random non-degenerate points.
pub fn run_gradient_suite(points: usize, seed: u64, step: f64, tolerance: f64) -> Result<Vec<LossCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LOSS_NAMES
        .iter()
        .map(|&loss| {
            let mut worst = 0.0f64;
            for _ in 0..points {
                worst = worst.max(check_one(loss, &mut rng, step, tolerance)?);
            }
            Ok(LossCheck {
                loss: loss.to_string(),
                points,
                max_rel_error: worst,
                passed: worst <= tolerance,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_points() {
        let checks = run_gradient_suite(5, 3, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(checks.len(), LOSS_NAMES.len());
        for c in checks {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn suite_detects_a_wrong_tolerance() {
        let checks = run_gradient_suite(2, 3, 1e-2, 1e-12).unwrap();
        assert!(checks.iter().any(|c| !c.passed));
    }
}
