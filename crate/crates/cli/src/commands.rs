use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use relgeo::dataset::{
    generate_synth_scene, load_7scenes_poses, load_cambridge_poses, pair_next, pair_random, pair_similarity_stats,
    read_scene_jsonl, write_scene_jsonl, Scene, Split,
};
use relgeo::evaluation::{evaluate, evaluate_predictions, read_predictions, SceneResult};
use relgeo::gradient_suite::run_gradient_suite;
use relgeo::trainer::{ablation_csv, run_ablation, train};
use relgeo::{Checkpoint, Error};
use serde::Serialize;

use crate::config::{ConfigError, DatasetFormat, RunConfig};

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: e.0,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig(_) | Error::MissingHead { .. } | Error::InfeasibleAliasing { .. } => EXIT_CONFIG,
            Error::DivergedLoss { .. } | Error::NonFiniteValue { .. } => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn config_error(message: String) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

/// Creates the output directory and records the resolved configuration.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    fs::create_dir_all(&cfg.out).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("cannot create output directory {}: {e}", cfg.out.display()),
    })?;
    write(&cfg.out.join("run_config.toml"), cfg.to_toml())?;
    Ok(cfg.out.clone())
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str, cfg: &RunConfig) -> Result<&'a Path, Failure> {
    value
        .as_deref()
        .ok_or_else(|| config_error(format!("dataset_format `{}` needs `{key}`", format_name(cfg))))
}

fn format_name(cfg: &RunConfig) -> String {
    toml::Value::try_from(cfg.dataset_format)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn scene_name(path: &Path) -> String {
    path.file_stem().map_or("scene".into(), |s| s.to_string_lossy().into_owned())
}

fn load_one(cfg: &RunConfig, path: &Path, descriptors: &Option<PathBuf>, split: Split) -> Result<Scene, Failure> {
    let mut scene = match cfg.dataset_format {
        DatasetFormat::Jsonl => return Ok(read_scene_jsonl(path, &scene_name(path), split)?),
        DatasetFormat::SevenScenes => load_7scenes_poses(path)?,
        DatasetFormat::Cambridge => load_cambridge_poses(path)?,
        DatasetFormat::Synth => unreachable!("synth scenes are generated"),
    };
    let sidecar = descriptors.as_deref().ok_or_else(|| {
        config_error(format!(
            "{} has no descriptors; set `{}`",
            path.display(),
            if split == Split::Train { "train_descriptors" } else { "test_descriptors" }
        ))
    })?;
    scene.split = split;
    Ok(scene.attach_descriptor_file(sidecar)?)
}

/// The whole training scene plus the train / test split used for fitting.
fn load_data(cfg: &RunConfig) -> Result<(Scene, Scene, Scene), Failure> {
    let full = match cfg.dataset_format {
        DatasetFormat::Synth => generate_synth_scene(&cfg.synth())?,
        _ => load_one(cfg, required(&cfg.train_path, "train_path", cfg)?, &cfg.train_descriptors, Split::Train)?,
    };
    let (train_scene, test_scene) = match (&cfg.test_path, cfg.dataset_format) {
        (Some(path), format) if format != DatasetFormat::Synth => {
            let test = load_one(cfg, path, &cfg.test_descriptors, Split::Test)?;
            (full.clone(), test)
        }
        _ => full.split_holdout(cfg.test_sequences)?,
    };
    info!(
        "scene `{}`: {} training frames, {} test frames",
        full.name,
        train_scene.len(),
        test_scene.len()
    );
    Ok((full, train_scene, test_scene))
}

fn input_dim(scene: &Scene) -> Result<usize, Failure> {
    Ok(scene.descriptor_dim()?)
}

pub fn train_cmd(cfg: &RunConfig) -> Outcome {
    let (_, train_scene, test_scene) = load_data(cfg)?;
    let config = cfg.train(input_dim(&train_scene)?);
    let out = prepare_out(cfg)?;
    let outcome = train(&train_scene, &config)?;
    write(&out.join("checkpoint.json"), outcome.checkpoint.to_json()?)?;
    write(&out.join("train_report.json"), outcome.report.to_json()?)?;
    println!(
        "trained {} for {} epochs (converged: {}), final loss {:.6}",
        config.combination,
        outcome.report.epochs_run,
        outcome.report.converged,
        outcome.report.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    if !test_scene.is_empty() {
        let result = evaluate(&outcome.checkpoint.model, &test_scene)?;
        write(&out.join("test_summary.csv"), result.summary_csv())?;
        print!("{}", result.summary_csv());
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn write_result(out: &Path, result: &SceneResult) -> Outcome {
    write(&out.join("scene_result.json"), result.to_json()?)?;
    write(&out.join("frame_errors.csv"), result.frames_csv()?)?;
    write(&out.join("summary.csv"), result.summary_csv())?;
    print!("{}", result.summary_csv());
    Ok(())
}

pub fn evaluate_cmd(cfg: &RunConfig) -> Outcome {
    let (_, _, test_scene) = load_data(cfg)?;
    let result = match (&cfg.predictions, &cfg.checkpoint) {
        (Some(pred), _) => evaluate_predictions(&test_scene, &read_predictions(pred)?)?,
        (None, Some(ckpt)) => evaluate(&Checkpoint::load(ckpt)?.model, &test_scene)?,
        (None, None) => return Err(config_error("evaluate needs `checkpoint` or `predictions`".into())),
    };
    let out = prepare_out(cfg)?;
    write_result(&out, &result)
}

pub fn ablate_cmd(cfg: &RunConfig) -> Outcome {
    let (_, train_scene, test_scene) = load_data(cfg)?;
    let combinations = cfg.ablation_combinations()?;
    if cfg.ablation_seeds == 0 {
        return Err(config_error("ablation_seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..cfg.ablation_seeds).map(|i| cfg.seed + i).collect();
    let base = cfg.train(input_dim(&train_scene)?);
    let out = prepare_out(cfg)?;
    let rows = run_ablation(&train_scene, &test_scene, &base, &combinations, &seeds)?;
    let table = ablation_csv(&rows)?;
    write(&out.join("ablation.csv"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn pair_stats_cmd(cfg: &RunConfig) -> Outcome {
    let (full, _, _) = load_data(cfg)?;
    let (next, _) = pair_similarity_stats(&full, &pair_next(&full)?)?;
    let (random, _) = pair_similarity_stats(&full, &pair_random(&full, cfg.seed, cfg.random_within_sequence)?)?;
    let table = format!(
        "scene,frames,seed,next_mean_distance,random_mean_distance\n{},{},{},{:.4},{:.4}\n",
        full.name,
        full.len(),
        cfg.seed,
        next,
        random
    );
    let out = prepare_out(cfg)?;
    write(&out.join("pair_stats.csv"), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct GradcheckRecord<'a> {
    seed: u64,
    points: usize,
    step: f64,
    tolerance: f64,
    passed: bool,
    checks: &'a [relgeo::gradient_suite::LossCheck],
}

pub fn gradcheck_cmd(cfg: &RunConfig) -> Outcome {
    let checks = run_gradient_suite(cfg.gradcheck_points, cfg.seed, cfg.gradcheck_step, cfg.gradcheck_tolerance)?;
    let passed = checks.iter().all(|c| c.passed);
    let record = GradcheckRecord {
        seed: cfg.seed,
        points: cfg.gradcheck_points,
        step: cfg.gradcheck_step,
        tolerance: cfg.gradcheck_tolerance,
        passed,
        checks: &checks,
    };
    let out = prepare_out(cfg)?;
    let json = serde_json::to_string_pretty(&record).map_err(|e| Failure::from(Error::from(e)))?;
    write(&out.join("gradcheck.json"), json)?;
    for c in &checks {
        println!(
            "{:16} {:4} points  max rel err {:.3e}  {}",
            c.loss,
            c.points,
            c.max_rel_error,
            if c.passed { "pass" } else { "FAIL" }
        );
    }
    if passed {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_NUMERIC,
            message: format!("gradient check failed at tolerance {:e}", cfg.gradcheck_tolerance),
        })
    }
}

pub fn synth_cmd(cfg: &RunConfig) -> Outcome {
    let scene = generate_synth_scene(&cfg.synth())?;
    let out = prepare_out(cfg)?;
    let path = out.join("scene.jsonl");
    write_scene_jsonl(&scene, &path)?;
    println!(
        "wrote {} frames in {} sequences ({} aliased pairs) to {}",
        scene.len(),
        scene.sequences().len(),
        scene.aliased_pairs.len(),
        path.display()
    );
    Ok(())
}
