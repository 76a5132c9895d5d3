//! Loss ablation on aliased synthetic scenes.
//!
//! Usage: `cargo run --release --example synth_ablation -- [seeds] [epochs] [combinations] [pairing]`
//!
//! Scene and model settings come from environment variables (SEQS, FRAMES,
//! ALIAS, LR, HID, ...); set CURRENT_ONLY to apply the global loss to the
//! current frame only.

use std::time::Instant;

use relgeo::dataset::{generate_synth_scene, PairingStrategy, SynthSceneConfig};
use relgeo::evaluation::evaluate;
use relgeo::losses::Combination;
use relgeo::network::{EncoderConfig, ModelConfig};
use relgeo::trainer::{aliased_feature_distance, initial_model, train, TrainConfig};

fn env_f64(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> relgeo::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100);
    let combos: Vec<Combination> = match args.get(3) {
        Some(list) => list.split(',').map(|c| c.parse()).collect::<relgeo::Result<_>>()?,
        None => vec![Combination::G, Combination::GC, Combination::GCR, Combination::GM, Combination::Full],
    };
    let pairing: PairingStrategy = args.get(4).map(|s| s.parse()).transpose()?.unwrap_or(PairingStrategy::Next);

    let synth = SynthSceneConfig {
        num_sequences: env_f64("SEQS", 5.0) as usize,
        frames_per_sequence: env_f64("FRAMES", 60.0) as usize,
        workspace_extent: env_f64("EXTENT", 2.0),
        descriptor_noise_sigma: env_f64("SIGMA", 0.05),
        aliasing_fraction: env_f64("ALIAS", 0.1),
        aliasing_pair_min_distance: env_f64("MIND", 1.0),
        descriptor_dim: 32,
        step_fraction: env_f64("STEP", 0.03),
        feature_length_scale: env_f64("LS", 0.5),
        route_spread: env_f64("SPREAD", 0.08),
        rng_seed: 0,
    };
    let base = TrainConfig {
        learning_rate: env_f64("LR", 1e-3),
        max_epochs: epochs,
        convergence_threshold: env_f64("CONV", 1e-4),
        batch_size: 32,
        beta: std::env::var("BETA").ok().and_then(|v| v.parse().ok()),
        global_both_frames: std::env::var("CURRENT_ONLY").is_err(),
        pairing,
        model: ModelConfig {
            encoder: EncoderConfig {
                input_dim: 32,
                hidden_dims: vec![env_f64("HID", 64.0) as usize],
                feature_dim: env_f64("FEAT", 32.0) as usize,
                dropout_rate: env_f64("DROP", 0.2),
            },
            head_hidden: env_f64("HEAD", 64.0) as usize,
            relative_head: true,
        },
        ..Default::default()
    };
    for c in combos {
        let (mut pos, mut ort, mut before, mut after) = (0.0, 0.0, 0.0, 0.0);
        let t = Instant::now();
        let mut epochs_run = 0;
        for seed in 0..seeds {
            let scene = generate_synth_scene(&SynthSceneConfig { rng_seed: seed, ..synth.clone() })?;
            let (tr, te) = scene.split_holdout(1)?;
            let config = TrainConfig { combination: c, rng_seed: seed, ..base.clone() };
            let fresh = initial_model(&config)?;
            let out = train(&tr, &config)?;
            let r = evaluate(&out.checkpoint.model, &te)?;
            if std::env::var("VERBOSE").is_ok() {
                let rt = evaluate(&out.checkpoint.model, &tr)?;
                println!(
                    "  seed {seed}: test {:.3}/{:.1} train {:.3}/{:.1} s=({:.2},{:.2}) loss {:.3}->{:.3}",
                    r.median_position_error_m,
                    r.median_orientation_error_deg,
                    rt.median_position_error_m,
                    rt.median_orientation_error_deg,
                    out.report.final_s_x,
                    out.report.final_s_q,
                    out.report.loss_curve[0],
                    out.report.loss_curve.last().unwrap()
                );
            }
            pos += r.median_position_error_m;
            ort += r.median_orientation_error_deg;
            epochs_run += out.report.epochs_run;
            before += aliased_feature_distance(&fresh, &tr)?.unwrap_or(0.0);
            after += aliased_feature_distance(&out.checkpoint.model, &tr)?.unwrap_or(0.0);
        }
        let n = seeds as f64;
        println!(
            "{:8} pos {:.4} m  ort {:.2} deg  alias-feat {:.4} -> {:.4}  epochs {:.0}  {:.1}s",
            c.as_str(),
            pos / n,
            ort / n,
            before / n,
            after / n,
            epochs_run as f64 / n,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
