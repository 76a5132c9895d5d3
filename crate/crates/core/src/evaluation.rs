//! Median pose errors per scene and their average across scenes.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Scene;
use crate::error::{Error, Result};
use crate::network::SiameseModel;
use crate::pose::{angular_error_deg, position_error_m, Pose, Position, Quaternion};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameError {
    pub frame_id: String,
    pub position_error_m: f64,
    pub orientation_error_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub scene: String,
    pub median_position_error_m: f64,
    pub median_orientation_error_deg: f64,
    pub frames: Vec<FrameError>,
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

impl SceneResult {
    /// Builds a result from per-frame errors, computing both medians.
    pub fn from_frames(scene: impl Into<String>, frames: Vec<FrameError>) -> Result<SceneResult> {
        let pos: Vec<f64> = frames.iter().map(|f| f.position_error_m).collect();
        let ort: Vec<f64> = frames.iter().map(|f| f.orientation_error_deg).collect();
        Ok(SceneResult {
            scene: scene.into(),
            median_position_error_m: median(&pos).ok_or(Error::EmptyTestSplit)?,
            median_orientation_error_deg: median(&ort).ok_or(Error::EmptyTestSplit)?,
            frames,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-frame error dump with full precision.
    pub fn frames_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for f in &self.frames {
            w.serialize(f).map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// One-row summary; meters to 3 decimals, degrees to 2.
    pub fn summary_csv(&self) -> String {
        format!(
            "scene,median_pos_m,median_ort_deg\n{},{:.3},{:.2}\n",
            self.scene, self.median_position_error_m, self.median_orientation_error_deg
        )
    }
}

/// Compares predicted with ground-truth poses frame by frame.
pub fn evaluate_poses(scene: &Scene, predictions: &[Pose]) -> Result<SceneResult> {
    if scene.is_empty() {
        return Err(Error::EmptyTestSplit);
    }
    if predictions.len() != scene.len() {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            detail: format!("{} predictions for {} frames", predictions.len(), scene.len()),
        });
    }
    let frames = scene
        .frames()
        .iter()
        .zip(predictions)
        .map(|(f, p)| FrameError {
            frame_id: f.id.clone(),
            position_error_m: position_error_m(p.position, f.pose.position),
            orientation_error_deg: angular_error_deg(p.orientation, f.pose.orientation),
        })
        .collect();
    SceneResult::from_frames(scene.name.clone(), frames)
}

/// Evaluates `model` on every frame of `scene`.
pub fn evaluate(model: &SiameseModel, scene: &Scene) -> Result<SceneResult> {
    if scene.is_empty() {
        return Err(Error::EmptyTestSplit);
    }
    let descriptors: Vec<&[f64]> = scene.frames().iter().map(|f| f.descriptor.as_slice()).collect();
    let predictions = model.predict_poses(&descriptors)?;
    evaluate_poses(scene, &predictions)
}

/// Unweighted mean of per-scene medians: `(meters, degrees)`.
pub fn average_over_scenes(results: &[SceneResult]) -> Result<(f64, f64)> {
    let medians: Vec<(f64, f64)> = results
        .iter()
        .map(|r| (r.median_position_error_m, r.median_orientation_error_deg))
        .collect();
    average_medians(&medians)
}

/// Unweighted mean of `(position, orientation)` median pairs.
pub fn average_medians(medians: &[(f64, f64)]) -> Result<(f64, f64)> {
    if medians.is_empty() {
        return Err(Error::InvalidConfig("no scenes to average".into()));
    }
    let n = medians.len() as f64;
    let p = medians.iter().map(|m| m.0).sum::<f64>() / n;
    let o = medians.iter().map(|m| m.1).sum::<f64>() / n;
    Ok((p, o))
}

/// Reads predictions in the `frame_id x y z w p q r` line format.
pub fn read_predictions(path: &Path) -> Result<HashMap<String, Pose>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() || tokens[0].starts_with('#') {
            continue;
        }
        let bad = |reason: String| Error::MalformedLine {
            path: path.to_path_buf(),
            line: n + 1,
            reason,
        };
        if tokens.len() != 8 {
            return Err(bad(format!("expected `frame_id x y z w p q r`, found {} fields", tokens.len())));
        }
        let v = tokens[1..]
            .iter()
            .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(format!("bad number `{t}`"))))
            .collect::<Result<Vec<f64>>>()?;
        let pose = Pose::new(
            Position::new(v[0], v[1], v[2]),
            Quaternion::new(v[3], v[4], v[5], v[6]),
        )?;
        if out.insert(tokens[0].to_string(), pose).is_some() {
            return Err(bad(format!("duplicate frame `{}`", tokens[0])));
        }
    }
    Ok(out)
}

/// Evaluates externally produced predictions against `scene`.
pub fn evaluate_predictions(scene: &Scene, predictions: &HashMap<String, Pose>) -> Result<SceneResult> {
    for id in predictions.keys() {
        scene.frame_index(id)?;
    }
    let poses = scene
        .frames()
        .iter()
        .map(|f| {
            predictions
                .get(&f.id)
                .copied()
                .ok_or_else(|| Error::MissingPrediction(f.id.clone()))
        })
        .collect::<Result<Vec<Pose>>>()?;
    evaluate_poses(scene, &poses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Frame, Split};
    use proptest::prelude::*;

    fn result(p: f64, o: f64) -> SceneResult {
        SceneResult {
            scene: "s".into(),
            median_position_error_m: p,
            median_orientation_error_deg: o,
            frames: Vec::new(),
        }
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[1.0, 5.0, 2.0]), Some(2.0));
        assert_eq!(median(&[1.0, 2.0, 3.0, 10.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn averaging() {
        assert_eq!(average_over_scenes(&[result(0.1, 5.0)]).unwrap(), (0.1, 5.0));
        let (p, o) = average_over_scenes(&[result(0.1, 5.0), result(0.3, 7.0)]).unwrap();
        assert!((p - 0.2).abs() < 1e-15 && (o - 6.0).abs() < 1e-15);
        assert!(average_over_scenes(&[]).is_err());
    }

    fn scene(n: usize) -> Scene {
        let frames = (0..n)
            .map(|i| Frame {
                id: format!("f{i}"),
                sequence_id: "s".into(),
                descriptor: vec![0.0],
                pose: Pose::new(
                    Position::new(i as f64, 0.0, 1.0),
                    Quaternion::from_axis_angle([0.0, 1.0, 0.0], 0.1 * i as f64).unwrap(),
                )
                .unwrap(),
            })
            .collect();
        Scene::new("s", frames, Split::Test).unwrap()
    }

    #[test]
    fn ground_truth_predictions_give_zero() {
        let s = scene(5);
        let truth: Vec<Pose> = s.frames().iter().map(|f| f.pose).collect();
        let r = evaluate_poses(&s, &truth).unwrap();
        assert_eq!((r.median_position_error_m, r.median_orientation_error_deg), (0.0, 0.0));
    }

    #[test]
    fn position_error_medians() {
        let s = scene(3);
        let offsets = [1.0, 5.0, 2.0];
        let preds: Vec<Pose> = s
            .frames()
            .iter()
            .zip(offsets)
            .map(|(f, d)| Pose { position: f.pose.position + Position::new(d, 0.0, 0.0), ..f.pose })
            .collect();
        assert_eq!(evaluate_poses(&s, &preds).unwrap().median_position_error_m, 2.0);
    }

    #[test]
    fn empty_split() {
        let s = Scene::new("e", Vec::new(), Split::Test).unwrap();
        assert!(matches!(evaluate_poses(&s, &[]), Err(Error::EmptyTestSplit)));
    }

    #[test]
    fn prediction_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.txt");
        std::fs::write(&path, "f0 0 0 1 1 0 0 0\nf1 1 0 1 1 0 0 0\n").unwrap();
        let preds = read_predictions(&path).unwrap();
        let s = scene(2);
        let r = evaluate_predictions(&s, &preds).unwrap();
        assert_eq!(r.median_position_error_m, 0.0);
        assert!((r.median_orientation_error_deg - 0.1f64.to_degrees() / 2.0).abs() < 1e-9);
        assert!(matches!(evaluate_predictions(&scene(3), &preds), Err(Error::MissingPrediction(_))));
        std::fs::write(&path, "zz 0 0 1 1 0 0 0\n").unwrap();
        let preds = read_predictions(&path).unwrap();
        assert!(matches!(evaluate_predictions(&s, &preds), Err(Error::UnknownFrame(_))));
        std::fs::write(&path, "f0 0 0 1 1 0 0\n").unwrap();
        assert!(matches!(read_predictions(&path), Err(Error::MalformedLine { .. })));
    }

    #[test]
    fn csv_outputs() {
        let s = scene(2);
        let truth: Vec<Pose> = s.frames().iter().map(|f| f.pose).collect();
        let r = evaluate_poses(&s, &truth).unwrap();
        let csv = r.frames_csv().unwrap();
        assert!(csv.starts_with("frame_id,position_error_m,orientation_error_deg\n"));
        assert_eq!(r.summary_csv(), "scene,median_pos_m,median_ort_deg\ns,0.000,0.00\n");
        let back: SceneResult = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn median_is_permutation_invariant(mut v in prop::collection::vec(-1e3f64..1e3, 1..40), seed in any::<u64>()) {
            let m = median(&v);
            let k = (seed as usize) % v.len();
            v.rotate_left(k);
            v.reverse();
            prop_assert_eq!(median(&v), m);
        }
    }
}
