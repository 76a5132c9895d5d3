//! Scenes, pose-file formats, synthetic scene generation and pair building.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{relative_pose, Pose, Position, Quaternion, RelativePose};

/// Largest tolerated `max |RᵀR - I|` before a rotation block is rejected.
pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: String,
    pub sequence_id: String,
    pub descriptor: Vec<f64>,
    pub pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Ordered frames, grouped by sequence in capture order.
#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    frames: Vec<Frame>,
    pub split: Split,
    /// Frame-id pairs that share a near-duplicate descriptor despite being far
    /// apart.
    pub aliased_pairs: Vec<(String, String)>,
    index: HashMap<String, usize>,
}

impl PartialEq for Scene {
    fn eq(&self, other: &Scene) -> bool {
        self.name == other.name
            && self.frames == other.frames
            && self.split == other.split
            && self.aliased_pairs == other.aliased_pairs
    }
}

impl Scene {
    /// Builds a scene. Frames of one sequence are gathered together in order
    /// of the sequence's first appearance; order within a sequence is kept.
    pub fn new(name: impl Into<String>, frames: Vec<Frame>, split: Split) -> Result<Scene> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Vec<Frame>> = HashMap::new();
        for f in frames {
            if !groups.contains_key(&f.sequence_id) {
                order.push(f.sequence_id.clone());
            }
            groups.entry(f.sequence_id.clone()).or_default().push(f);
        }
        let frames: Vec<Frame> = order
            .iter()
            .flat_map(|s| groups.remove(s).unwrap_or_default())
            .collect();
        let mut index = HashMap::with_capacity(frames.len());
        for (i, f) in frames.iter().enumerate() {
            if index.insert(f.id.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate frame id `{}`", f.id)));
            }
        }
        Ok(Scene {
            name: name.into(),
            frames,
            split,
            aliased_pairs: Vec::new(),
            index,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_index(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownFrame(id.to_string()))
    }

    pub fn frame(&self, id: &str) -> Result<&Frame> {
        Ok(&self.frames[self.frame_index(id)?])
    }

    /// `(sequence id, index range)` for each sequence, in scene order.
    pub fn sequences(&self) -> Vec<(&str, std::ops::Range<usize>)> {
        let mut out: Vec<(&str, std::ops::Range<usize>)> = Vec::new();
        for (i, f) in self.frames.iter().enumerate() {
            match out.last_mut() {
                Some((s, r)) if *s == f.sequence_id => r.end = i + 1,
                _ => out.push((&f.sequence_id, i..i + 1)),
            }
        }
        out
    }

    /// Length of every descriptor, or an error when they disagree or are empty.
    pub fn descriptor_dim(&self) -> Result<usize> {
        let dim = self.frames.first().map_or(0, |f| f.descriptor.len());
        if dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "scene `{}` has no descriptors",
                self.name
            )));
        }
        if let Some(f) = self.frames.iter().find(|f| f.descriptor.len() != dim) {
            return Err(Error::ShapeMismatch {
                op: "descriptor",
                detail: format!("frame `{}` has {} values, expected {dim}", f.id, f.descriptor.len()),
            });
        }
        Ok(dim)
    }

    /// Splits off the last `test_sequences` sequences as a test scene.
    /// Aliased pairs are kept on the side holding both of their frames.
    pub fn split_holdout(&self, test_sequences: usize) -> Result<(Scene, Scene)> {
        let seqs = self.sequences();
        if test_sequences == 0 || test_sequences >= seqs.len() {
            return Err(Error::InvalidConfig(format!(
                "cannot hold out {test_sequences} of {} sequences",
                seqs.len()
            )));
        }
        let cut = seqs[seqs.len() - test_sequences].1.start;
        let part = |frames: &[Frame], split| -> Result<Scene> {
            let mut s = Scene::new(self.name.clone(), frames.to_vec(), split)?;
            s.aliased_pairs = self
                .aliased_pairs
                .iter()
                .filter(|(a, b)| s.index.contains_key(a) && s.index.contains_key(b))
                .cloned()
                .collect();
            Ok(s)
        };
        Ok((part(&self.frames[..cut], Split::Train)?, part(&self.frames[cut..], Split::Test)?))
    }

    /// Attaches one descriptor per frame, in scene order.
    pub fn with_descriptors(mut self, descriptors: Vec<Vec<f64>>) -> Result<Scene> {
        if descriptors.len() != self.frames.len() {
            return Err(Error::ShapeMismatch {
                op: "attach descriptors",
                detail: format!("{} descriptors for {} frames", descriptors.len(), self.frames.len()),
            });
        }
        for (f, d) in self.frames.iter_mut().zip(descriptors) {
            f.descriptor = d;
        }
        self.descriptor_dim()?;
        Ok(self)
    }

    /// Reads a sidecar descriptor file: one whitespace-separated line per
    /// frame, in scene order.
    pub fn attach_descriptor_file(self, path: &Path) -> Result<Scene> {
        let text = read(path)?;
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|t| parse_finite(t).map_err(|reason| malformed_line(path, n + 1, reason)))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        self.with_descriptors(rows)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_finite(token: &str) -> std::result::Result<f64, String> {
    match token.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(format!("non-finite value `{token}`")),
        Err(_) => Err(format!("`{token}` is not a number")),
    }
}

fn malformed_line(path: &Path, line: usize, reason: String) -> Error {
    Error::MalformedLine {
        path: path.to_path_buf(),
        line,
        reason,
    }
}

fn malformed_pose(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedPoseFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

type Mat3 = [[f64; 3]; 3];

fn orthogonality_error(r: &Mat3) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Nearest rotation via the Newton iteration for the polar factor,
/// `R <- (R + R^-T) / 2`.
pub fn nearest_rotation(m: &Mat3) -> Mat3 {
    let mut r = *m;
    for _ in 0..20 {
        let d = det3(&r);
        // Inverse transpose equals the cofactor matrix over the determinant.
        let mut next = [[0.0; 3]; 3];
        let mut change = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
                let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
                let cof = r[i1][j1] * r[i2][j2] - r[i1][j2] * r[i2][j1];
                next[i][j] = 0.5 * (r[i][j] + cof / d);
                change = change.max((next[i][j] - r[i][j]).abs());
            }
        }
        r = next;
        if change < 1e-15 {
            break;
        }
    }
    r
}

fn pose_from_matrix(path: &Path, m: &[[f64; 4]; 4]) -> Result<Pose> {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        r[i].copy_from_slice(&m[i][..3]);
    }
    let deviation = orthogonality_error(&r);
    if deviation > ORTHOGONALITY_TOLERANCE || det3(&r) <= 0.0 {
        return Err(Error::NonOrthogonalRotation {
            path: path.to_path_buf(),
            deviation,
        });
    }
    if deviation > 0.0 {
        r = nearest_rotation(&r);
    }
    Pose::new(
        Position::new(m[0][3], m[1][3], m[2][3]),
        Quaternion::from_rotation_matrix(&r),
    )
}

/// Parses one homogeneous 4x4 pose matrix file.
pub fn read_pose_matrix(path: &Path) -> Result<Pose> {
    let text = read(path)?;
    let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != 4 {
        return Err(malformed_pose(path, format!("expected 4 rows, found {}", rows.len())));
    }
    let mut m = [[0.0; 4]; 4];
    for (i, row) in rows.iter().enumerate() {
        let vals: Vec<&str> = row.split_whitespace().collect();
        if vals.len() != 4 {
            return Err(malformed_pose(
                path,
                format!("row {} has {} values, expected 4", i + 1, vals.len()),
            ));
        }
        for (j, t) in vals.iter().enumerate() {
            m[i][j] = parse_finite(t).map_err(|reason| malformed_pose(path, reason))?;
        }
    }
    let bottom = [0.0, 0.0, 0.0, 1.0];
    if m[3].iter().zip(bottom).any(|(a, b)| (a - b).abs() > 1e-6) {
        return Err(malformed_pose(path, "last row is not 0 0 0 1"));
    }
    pose_from_matrix(path, &m)
}

fn frame_number(name: &str) -> Option<u64> {
    let digits = name.strip_prefix("frame-")?.strip_suffix(".pose.txt")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn pose_files(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if let Some(n) = name.to_str().and_then(frame_number) {
            out.push((n, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn dir_name(dir: &Path) -> String {
    dir.file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("scene")
        .to_string()
}

/// Loads a 7Scenes-style directory of `frame-NNNNNN.pose.txt` files.
///
/// Pose files directly inside `directory` form one sequence named after the
/// directory. Otherwise every subdirectory holding pose files is a sequence,
/// taken in name order.
pub fn load_7scenes_poses(directory: &Path) -> Result<Scene> {
    let mut sequences: Vec<(String, Option<String>, Vec<(u64, PathBuf)>)> = Vec::new();
    let direct = pose_files(directory)?;
    if !direct.is_empty() {
        sequences.push((dir_name(directory), None, direct));
    } else {
        let mut subdirs: Vec<PathBuf> = fs::read_dir(directory)
            .map_err(|e| Error::io(directory, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        for sub in subdirs {
            let files = pose_files(&sub)?;
            if !files.is_empty() {
                let name = dir_name(&sub);
                sequences.push((name.clone(), Some(name), files));
            }
        }
    }
    if sequences.is_empty() {
        return Err(malformed_pose(directory, "no frame-NNNNNN.pose.txt files found"));
    }
    let mut frames = Vec::new();
    for (sequence, prefix, files) in sequences {
        for (n, path) in files {
            let stem = format!("frame-{n:06}");
            frames.push(Frame {
                id: match &prefix {
                    Some(p) => format!("{p}/{stem}"),
                    None => stem,
                },
                sequence_id: sequence.clone(),
                descriptor: Vec::new(),
                pose: read_pose_matrix(&path)?,
            });
        }
    }
    Scene::new(dir_name(directory), frames, Split::Train)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `scene` as 7Scenes pose files. Single-sequence scenes go straight
/// into `directory`, others into one subdirectory per sequence.
pub fn write_7scenes_poses(scene: &Scene, directory: &Path) -> Result<()> {
    let seqs = scene.sequences();
    fs::create_dir_all(directory).map_err(|e| Error::io(directory, e))?;
    for (seq, range) in &seqs {
        let dir = if seqs.len() == 1 {
            directory.to_path_buf()
        } else {
            directory.join(seq)
        };
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (k, f) in scene.frames[range.clone()].iter().enumerate() {
            let r = f.pose.orientation.to_rotation_matrix();
            let t = f.pose.position.to_array();
            let mut text = String::new();
            for i in 0..3 {
                text += &format!("{} {} {} {}\n", r[i][0], r[i][1], r[i][2], t[i]);
            }
            text += "0 0 0 1\n";
            write_file(&dir.join(format!("frame-{k:06}.pose.txt")), &text)?;
        }
    }
    Ok(())
}

const IMAGE_EXTENSIONS: [&str; 4] = [".png", ".jpg", ".jpeg", ".bmp"];

fn is_path_token(token: &str) -> bool {
    let lower = token.to_ascii_lowercase();
    token.contains('/') || IMAGE_EXTENSIONS.iter().any(|e| lower.ends_with(e))
}

/// Loads a Cambridge-style pose list: header lines, then
/// `path x y z w p q r` per frame. The sequence is the first path component.
pub fn load_cambridge_poses(file: &Path) -> Result<Scene> {
    let text = read(file)?;
    let mut frames = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let Some(first) = tokens.first() else {
            continue;
        };
        if !is_path_token(first) {
            if frames.is_empty() {
                continue;
            }
            return Err(malformed_line(file, n + 1, format!("expected an image path, found `{first}`")));
        }
        if tokens.len() != 8 {
            return Err(malformed_line(
                file,
                n + 1,
                format!("expected 7 values (x y z w p q r) after the path, found {}", tokens.len() - 1),
            ));
        }
        let v = tokens[1..]
            .iter()
            .map(|t| parse_finite(t).map_err(|reason| malformed_line(file, n + 1, reason)))
            .collect::<Result<Vec<f64>>>()?;
        let pose = Pose::new(
            Position::new(v[0], v[1], v[2]),
            Quaternion::new(v[3], v[4], v[5], v[6]),
        )?;
        let sequence = match first.split_once('/') {
            Some((s, _)) => s.to_string(),
            None => "seq".to_string(),
        };
        frames.push(Frame {
            id: first.to_string(),
            sequence_id: sequence,
            descriptor: Vec::new(),
            pose,
        });
    }
    if frames.is_empty() {
        return Err(malformed_pose(file, "no pose lines found"));
    }
    let name = file
        .parent()
        .map(dir_name)
        .unwrap_or_else(|| "scene".to_string());
    Scene::new(name, frames, Split::Train)
}

/// Writes `scene` in the Cambridge pose-list format. Frame ids without a
/// directory component are prefixed with their sequence.
pub fn write_cambridge_poses(scene: &Scene, file: &Path) -> Result<()> {
    let mut text = String::from("Visual Landmark Dataset V1\nImageFile, Camera Position [X Y Z W P Q R]\n\n");
    for f in &scene.frames {
        let path = if is_path_token(&f.id) {
            f.id.clone()
        } else {
            format!("{}/{}.png", f.sequence_id, f.id)
        };
        let p = f.pose.position;
        let q = f.pose.orientation;
        text += &format!("{path} {} {} {} {} {} {} {}\n", p.x, p.y, p.z, q.w, q.x, q.y, q.z);
    }
    write_file(file, &text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPairSpec {
    pub current: usize,
    pub reference: usize,
    pub current_frame_id: String,
    pub reference_frame_id: String,
    pub gt_rel: RelativePose,
}

impl TrainingPairSpec {
    pub fn new(scene: &Scene, current: usize, reference: usize) -> TrainingPairSpec {
        let (c, r) = (&scene.frames[current], &scene.frames[reference]);
        TrainingPairSpec {
            current,
            reference,
            current_frame_id: c.id.clone(),
            reference_frame_id: r.id.clone(),
            gt_rel: relative_pose(&c.pose, &r.pose),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairingStrategy {
    Next,
    Random,
}

impl fmt::Display for PairingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairingStrategy::Next => "next",
            PairingStrategy::Random => "random",
        })
    }
}

impl FromStr for PairingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "next" => Ok(PairingStrategy::Next),
            "random" => Ok(PairingStrategy::Random),
            _ => Err(Error::InvalidConfig(format!(
                "unknown pairing strategy `{s}` (expected next or random)"
            ))),
        }
    }
}

/// Pairs each frame with the next one in its sequence; the last frame of a
/// sequence pairs with its predecessor.
pub fn pair_next(scene: &Scene) -> Result<Vec<TrainingPairSpec>> {
    let mut pairs = Vec::with_capacity(scene.len());
    for (seq, range) in scene.sequences() {
        if range.len() < 2 {
            return Err(Error::SequenceTooShort {
                sequence: seq.to_string(),
                len: range.len(),
            });
        }
        for i in range.clone() {
            let reference = if i + 1 < range.end { i + 1 } else { i - 1 };
            pairs.push(TrainingPairSpec::new(scene, i, reference));
        }
    }
    Ok(pairs)
}

fn derangement(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Assigns references by a random fixed-point-free permutation, over the
/// whole scene or separately inside each sequence.
pub fn pair_random(scene: &Scene, rng_seed: u64, within_sequence: bool) -> Result<Vec<TrainingPairSpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let groups: Vec<(String, std::ops::Range<usize>)> = if within_sequence {
        scene
            .sequences()
            .into_iter()
            .map(|(s, r)| (s.to_string(), r))
            .collect()
    } else {
        vec![(scene.name.clone(), 0..scene.len())]
    };
    let mut pairs = Vec::with_capacity(scene.len());
    for (name, range) in groups {
        if range.len() < 2 {
            return Err(Error::SequenceTooShort {
                sequence: name,
                len: range.len(),
            });
        }
        let perm = derangement(range.len(), &mut rng);
        for (k, p) in perm.into_iter().enumerate() {
            pairs.push(TrainingPairSpec::new(scene, range.start + k, range.start + p));
        }
    }
    Ok(pairs)
}

pub fn make_pairs(
    scene: &Scene,
    strategy: PairingStrategy,
    rng_seed: u64,
    within_sequence: bool,
) -> Result<Vec<TrainingPairSpec>> {
    match strategy {
        PairingStrategy::Next => pair_next(scene),
        PairingStrategy::Random => pair_random(scene, rng_seed, within_sequence),
    }
}

/// Negative for a triplet: the first frame after the reference, in scene
/// order with wrap-around, that is neither the anchor nor the reference.
pub fn triplet_negative(scene_len: usize, pair: &TrainingPairSpec) -> Option<usize> {
    (1..scene_len)
        .map(|k| (pair.reference + k) % scene_len)
        .find(|&i| i != pair.current && i != pair.reference)
}

pub fn descriptor_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean and per-pair Euclidean distance between paired descriptors.
pub fn pair_similarity_stats(scene: &Scene, pairs: &[TrainingPairSpec]) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("pair list is empty".into()));
    }
    scene.descriptor_dim()?;
    let d: Vec<f64> = pairs
        .iter()
        .map(|p| descriptor_distance(&scene.frames[p.current].descriptor, &scene.frames[p.reference].descriptor))
        .collect();
    Ok((d.iter().sum::<f64>() / d.len() as f64, d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSceneConfig {
    pub num_sequences: usize,
    pub frames_per_sequence: usize,
    /// Side length of the cubic workspace in meters.
    pub workspace_extent: f64,
    pub descriptor_noise_sigma: f64,
    pub aliasing_fraction: f64,
    pub aliasing_pair_min_distance: f64,
    pub descriptor_dim: usize,
    /// Distance travelled per frame, as a fraction of the extent.
    pub step_fraction: f64,
    /// Length scale of the descriptor field, as a fraction of the extent.
    pub feature_length_scale: f64,
    /// Amplitude of each sequence's deviation from the shared route, as a
    /// fraction of the extent.
    pub route_spread: f64,
    pub rng_seed: u64,
}

impl Default for SynthSceneConfig {
    fn default() -> Self {
        Self {
            num_sequences: 13,
            frames_per_sequence: 40,
            workspace_extent: 2.0,
            descriptor_noise_sigma: 0.05,
            aliasing_fraction: 0.1,
            aliasing_pair_min_distance: 1.0,
            descriptor_dim: 32,
            step_fraction: 0.03,
            feature_length_scale: 0.5,
            route_spread: 0.08,
            rng_seed: 0,
        }
    }
}

impl SynthSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_sequences == 0 || self.frames_per_sequence < 2 {
            return bad("need at least one sequence of two frames".into());
        }
        if !(self.workspace_extent > 0.0 && self.workspace_extent.is_finite()) {
            return bad(format!("workspace_extent {} must be positive", self.workspace_extent));
        }
        if !(self.descriptor_noise_sigma >= 0.0 && self.descriptor_noise_sigma.is_finite()) {
            return bad(format!("descriptor_noise_sigma {} must be non-negative", self.descriptor_noise_sigma));
        }
        if !(0.0..1.0).contains(&self.aliasing_fraction) {
            return bad(format!("aliasing_fraction {} outside [0, 1)", self.aliasing_fraction));
        }
        if !(self.aliasing_pair_min_distance >= 0.0) {
            return bad("aliasing_pair_min_distance must be non-negative".into());
        }
        if self.descriptor_dim == 0 {
            return bad("descriptor_dim must be positive".into());
        }
        if !(self.step_fraction > 0.0 && self.feature_length_scale > 0.0) {
            return bad("step_fraction and feature_length_scale must be positive".into());
        }
        if !(self.route_spread >= 0.0) {
            return bad("route_spread must be non-negative".into());
        }
        Ok(())
    }
}

/// Closed route shared by every sequence of a scene.
struct Route {
    half: f64,
    coef: [f64; 6],
}

impl Route {
    fn new(cfg: &SynthSceneConfig, rng: &mut ChaCha8Rng) -> Route {
        Route {
            half: cfg.workspace_extent / 2.0,
            coef: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
        }
    }

    fn at(&self, t: f64) -> [f64; 3] {
        let (h, c) = (self.half, &self.coef);
        [
            0.7 * h * (t.cos() + 0.25 * c[0] * (2.0 * t + 3.0 * c[1]).cos()),
            0.7 * h * (t.sin() + 0.25 * c[2] * (2.0 * t + 3.0 * c[3]).sin()),
            0.25 * h * (3.0 * t + 3.0 * c[4]).sin() * (0.5 + 0.5 * c[5].abs()),
        ]
    }
}

/// Smooth bounded perturbation: two random sinusoids over the sequence.
struct Wiggle {
    terms: [(f64, f64, f64); 2],
}

impl Wiggle {
    fn new(amplitude: f64, rng: &mut ChaCha8Rng) -> Wiggle {
        Wiggle {
            terms: std::array::from_fn(|k| {
                (
                    amplitude * rng.random_range(0.3..0.7),
                    (k as f64 + 1.0) * rng.random_range(2.0..6.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            }),
        }
    }

    fn at(&self, s: f64) -> f64 {
        self.terms.iter().map(|(a, w, p)| a * (w * s + p).sin()).sum()
    }
}

fn trajectory(cfg: &SynthSceneConfig, route: &Route, rng: &mut ChaCha8Rng) -> Result<Vec<Pose>> {
    let step = cfg.step_fraction * cfg.workspace_extent;
    let spread = cfg.route_spread * cfg.workspace_extent;
    let offsets = [Wiggle::new(spread, rng), Wiggle::new(spread, rng), Wiggle::new(spread / 2.0, rng)];
    let (yaw_w, pitch_w, roll_w) = (Wiggle::new(0.3, rng), Wiggle::new(0.3, rng), Wiggle::new(0.15, rng));
    let mut t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut poses = Vec::with_capacity(cfg.frames_per_sequence);
    let n = cfg.frames_per_sequence as f64;
    for k in 0..cfg.frames_per_sequence {
        let s = k as f64 / n;
        let (a, b) = (route.at(t), route.at(t + 1e-4));
        let tangent = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let speed = tangent.iter().map(|v| v * v).sum::<f64>().sqrt() / 1e-4;
        let p = std::array::from_fn(|i| a[i] + offsets[i].at(s));
        let heading = tangent[1].atan2(tangent[0]) + yaw_w.at(s);
        let q = Quaternion::from_axis_angle([0.0, 0.0, 1.0], heading)?
            * Quaternion::from_axis_angle([0.0, 1.0, 0.0], pitch_w.at(s))?
            * Quaternion::from_axis_angle([1.0, 0.0, 0.0], roll_w.at(s))?;
        poses.push(Pose::new(Position::from_array(p), q)?);
        t += step / speed.max(1e-9);
    }
    Ok(poses)
}

/// Smooth appearance field: random Fourier features of the position and of
/// the camera's forward and up axes.
struct DescriptorField {
    weights: Vec<[f64; 9]>,
    phases: Vec<f64>,
    position_scale: f64,
}

impl DescriptorField {
    fn new(cfg: &SynthSceneConfig, rng: &mut ChaCha8Rng) -> DescriptorField {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let weights = (0..cfg.descriptor_dim)
            .map(|_| std::array::from_fn(|_| normal.sample(rng)))
            .collect();
        let phases = (0..cfg.descriptor_dim)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        DescriptorField {
            weights,
            phases,
            position_scale: 1.0 / (cfg.feature_length_scale * cfg.workspace_extent),
        }
    }

    fn eval(&self, pose: &Pose) -> Vec<f64> {
        let r = pose.orientation.to_rotation_matrix();
        let p = pose.position.to_array();
        let mut u = [0.0; 9];
        for i in 0..3 {
            u[i] = p[i] * self.position_scale;
            u[3 + i] = r[i][0];
            u[6 + i] = r[i][2];
        }
        self.weights
            .iter()
            .zip(&self.phases)
            .map(|(w, b)| (w.iter().zip(&u).map(|(a, c)| a * c).sum::<f64>() + b).cos())
            .collect()
    }
}

/// Generates a reproducible synthetic scene with optional perceptual aliasing.
///
/// For `aliasing_fraction * N` source frames a partner at least
/// `aliasing_pair_min_distance` away is chosen, and the partner's descriptor
/// is replaced by the source descriptor plus noise of a quarter of the
/// descriptor noise level.
pub fn generate_synth_scene(cfg: &SynthSceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let field = DescriptorField::new(cfg, &mut rng);
    let route = Route::new(cfg, &mut rng);
    let mut frames = Vec::new();
    for s in 0..cfg.num_sequences {
        let sequence_id = format!("seq-{:02}", s + 1);
        for (k, pose) in trajectory(cfg, &route, &mut rng)?.into_iter().enumerate() {
            let descriptor = field
                .eval(&pose)
                .into_iter()
                .map(|v| v + cfg.descriptor_noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            frames.push(Frame {
                id: format!("{sequence_id}/frame-{k:06}"),
                sequence_id: sequence_id.clone(),
                descriptor,
                pose,
            });
        }
    }
    let aliased = place_aliasing(cfg, &mut frames, &mut rng)?;
    let mut scene = Scene::new("synth", frames, Split::Train)?;
    scene.aliased_pairs = aliased;
    Ok(scene)
}

fn place_aliasing(
    cfg: &SynthSceneConfig,
    frames: &mut [Frame],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(String, String)>> {
    let count = (cfg.aliasing_fraction * frames.len() as f64).round() as usize;
    if count == 0 {
        return Ok(Vec::new());
    }
    let diagonal = cfg.workspace_extent * (1.0f64 + 1.0 + 0.25).sqrt();
    if cfg.aliasing_pair_min_distance >= diagonal {
        return Err(Error::InfeasibleAliasing {
            min_distance: cfg.aliasing_pair_min_distance,
            reason: format!("workspace diagonal is only {diagonal:.3} m"),
        });
    }
    let sigma = cfg.descriptor_noise_sigma / 4.0;
    let mut used = vec![false; frames.len()];
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.shuffle(rng);
    let mut pairs = Vec::with_capacity(count);
    for &src in &order {
        if pairs.len() == count {
            break;
        }
        if used[src] {
            continue;
        }
        let candidates: Vec<usize> = (0..frames.len())
            .filter(|&j| {
                !used[j]
                    && j != src
                    && (frames[j].pose.position - frames[src].pose.position).norm()
                        >= cfg.aliasing_pair_min_distance
            })
            .collect();
        let Some(&partner) = candidates.as_slice().choose(rng) else {
            continue;
        };
        used[src] = true;
        used[partner] = true;
        let copy: Vec<f64> = frames[src]
            .descriptor
            .iter()
            .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        frames[partner].descriptor = copy;
        pairs.push((frames[src].id.clone(), frames[partner].id.clone()));
    }
    if pairs.len() < count {
        return Err(Error::InfeasibleAliasing {
            min_distance: cfg.aliasing_pair_min_distance,
            reason: format!("placed only {} of {count} partners", pairs.len()),
        });
    }
    Ok(pairs)
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    id: String,
    sequence: String,
    position: [f64; 3],
    quaternion: [f64; 4],
    descriptor: Vec<f64>,
}

/// One JSON object per frame: `{id, sequence, position, quaternion, descriptor}`.
pub fn write_scene_jsonl(scene: &Scene, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for f in &scene.frames {
        let rec = FrameRecord {
            id: f.id.clone(),
            sequence: f.sequence_id.clone(),
            position: f.pose.position.to_array(),
            quaternion: f.pose.orientation.to_array(),
            descriptor: f.descriptor.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_scene_jsonl(path: &Path, name: &str, split: Split) -> Result<Scene> {
    let text = read(path)?;
    let mut frames = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord =
            serde_json::from_str(line).map_err(|e| malformed_line(path, n + 1, e.to_string()))?;
        frames.push(Frame {
            id: rec.id,
            sequence_id: rec.sequence,
            descriptor: rec.descriptor,
            pose: Pose::new(Position::from_array(rec.position), Quaternion::from_array(rec.quaternion))?,
        });
    }
    Scene::new(name, frames, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(id: &str, seq: &str, x: f64) -> Frame {
        Frame {
            id: id.into(),
            sequence_id: seq.into(),
            descriptor: vec![x, 0.0],
            pose: Pose::new(Position::new(x, 0.0, 0.0), Quaternion::IDENTITY).unwrap(),
        }
    }

    fn abc() -> Scene {
        Scene::new(
            "t",
            vec![frame("a", "s", 0.0), frame("b", "s", 1.0), frame("c", "s", 2.0)],
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn scene_groups_sequences() {
        let s = Scene::new(
            "t",
            vec![frame("a", "1", 0.0), frame("b", "2", 0.0), frame("c", "1", 0.0)],
            Split::Train,
        )
        .unwrap();
        let ids: Vec<&str> = s.frames().iter().map(|f| f.id.as_str()).collect();
        assert_eq!(ids, ["a", "c", "b"]);
        assert_eq!(s.sequences().len(), 2);
        assert!(Scene::new("t", vec![frame("a", "1", 0.0), frame("a", "1", 0.0)], Split::Train).is_err());
    }

    #[test]
    fn next_pairing_boundary_rule() {
        let s = abc();
        let pairs = pair_next(&s).unwrap();
        let got: Vec<(&str, &str)> = pairs
            .iter()
            .map(|p| (p.current_frame_id.as_str(), p.reference_frame_id.as_str()))
            .collect();
        assert_eq!(got, [("a", "b"), ("b", "c"), ("c", "b")]);
        assert_eq!(pairs[0].gt_rel, relative_pose(&s.frames()[0].pose, &s.frames()[1].pose));
    }

    #[test]
    fn next_pairing_rejects_singletons() {
        let s = Scene::new("t", vec![frame("a", "1", 0.0), frame("b", "2", 0.0), frame("c", "2", 0.0)], Split::Train).unwrap();
        assert!(matches!(pair_next(&s), Err(Error::SequenceTooShort { len: 1, .. })));
    }

    #[test]
    fn random_pairing_of_two_is_a_swap() {
        let s = Scene::new("t", vec![frame("a", "s", 0.0), frame("b", "s", 1.0)], Split::Train).unwrap();
        let p = pair_random(&s, 3, false).unwrap();
        assert_eq!((p[0].current, p[0].reference, p[1].current, p[1].reference), (0, 1, 1, 0));
    }

    #[test]
    fn random_pairing_is_a_seeded_derangement() {
        let frames: Vec<Frame> = (0..40).map(|i| frame(&format!("f{i}"), if i < 20 { "a" } else { "b" }, i as f64)).collect();
        let s = Scene::new("t", frames, Split::Train).unwrap();
        for within in [false, true] {
            let p = pair_random(&s, 11, within).unwrap();
            assert_eq!(p, pair_random(&s, 11, within).unwrap());
            let mut refs: Vec<usize> = p.iter().map(|x| x.reference).collect();
            assert!(p.iter().all(|x| x.current != x.reference));
            refs.sort();
            assert_eq!(refs, (0..40).collect::<Vec<_>>());
            if within {
                assert!(p.iter().all(|x| (x.current < 20) == (x.reference < 20)));
            }
        }
        assert_ne!(pair_random(&s, 1, false).unwrap(), pair_random(&s, 2, false).unwrap());
    }

    #[test]
    fn triplet_negative_skips_pair() {
        let s = abc();
        let p = TrainingPairSpec::new(&s, 0, 1);
        assert_eq!(triplet_negative(3, &p), Some(2));
        let p = TrainingPairSpec::new(&s, 2, 1);
        assert_eq!(triplet_negative(3, &p), Some(0));
        assert_eq!(triplet_negative(2, &TrainingPairSpec::new(&s, 0, 1)), None);
    }

    #[test]
    fn similarity_stats() {
        let s = abc();
        let (mean, d) = pair_similarity_stats(&s, &pair_next(&s).unwrap()).unwrap();
        assert_eq!(d, vec![1.0, 1.0, 1.0]);
        assert_eq!(mean, 1.0);
        assert!(pair_similarity_stats(&s, &[]).is_err());
    }

    #[test]
    fn holdout_split() {
        let cfg = SynthSceneConfig { num_sequences: 3, frames_per_sequence: 10, aliasing_fraction: 0.2, ..Default::default() };
        let s = generate_synth_scene(&cfg).unwrap();
        let (train, test) = s.split_holdout(1).unwrap();
        assert_eq!((train.len(), test.len()), (20, 10));
        assert_eq!(test.split, Split::Test);
        assert!(s.split_holdout(3).is_err());
        for (a, b) in &train.aliased_pairs {
            assert!(train.frame(a).is_ok() && train.frame(b).is_ok());
        }
    }

    #[test]
    fn nearest_rotation_fixes_small_noise() {
        let q = Quaternion::from_axis_angle([1.0, 2.0, 3.0], 0.7).unwrap();
        let mut r = q.to_rotation_matrix();
        r[0][1] += 4e-4;
        r[2][0] -= 3e-4;
        let fixed = nearest_rotation(&r);
        assert!(orthogonality_error(&fixed) < 1e-14);
        assert!((det3(&fixed) - 1.0).abs() < 1e-14);
        let back = Quaternion::from_rotation_matrix(&fixed);
        assert!(crate::pose::angular_error_deg(back, q) < 0.05);
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("Next".parse::<PairingStrategy>().unwrap(), PairingStrategy::Next);
        assert!("sideways".parse::<PairingStrategy>().is_err());
    }
}
