//! Command-line front end: scene synthesis, fitting, evaluation,
//! virtual-joint calibration, gradient checking and debug overlays.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad flags, missing
//! or malformed files), 2 on numerical failures.

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

use crate::camera::Camera;
use crate::energy::{Keypoint, TermWeights, total_energy};
use crate::error::{Error, Result};
use crate::field::asymmetric_field;
use crate::metrics::{CalibrationGrid, calibrate_virtual_joints, evaluate_scene, neutral_init};
use crate::model::{BodyModel, BodyParams, VirtualJointConfig, build_template_model};
use crate::optim::{FitConfig, fit_staged};
use crate::pgm::write_scaled_grid;
use crate::raster::rasterize_hard;
use crate::synth::{NoiseSpec, generate_scene, load_scene, merge_keypoints, read_json, save_scene, write_json};

/// Capsule ring resolution of the CLI's body model.
pub const DEFAULT_RESOLUTION: usize = 6;
pub const DEFAULT_IMAGE_SIZE: usize = 96;

#[derive(Parser)]
#[command(name = "bodyfit", version, about = "Articulated body fitting from keypoints and silhouettes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scene directories.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        /// Keep only the top fraction of image rows.
        #[arg(long)]
        partial: Option<f64>,
        /// JSON noise spec; defaults to the standard noise model.
        #[arg(long)]
        noise: Option<PathBuf>,
    },
    /// Fit body parameters to a scene.
    Fit {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON keypoint list merged into the observation.
        #[arg(long)]
        extrapolated: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate fitted parameters against a scene's ground truth.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate torso virtual joints over a directory of scenes.
    #[command(name = "calibrate-vj")]
    CalibrateVj {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, value_parser = ["coarse", "fine"])]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long)]
        seed: u64,
    },
    /// Write the rendered silhouette blended with the observed mask.
    Overlay {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful exits.
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) | Error::BehindCamera { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            seed,
            count,
            partial,
            noise,
        } => cmd_synth(&out, seed, count, partial, noise.as_deref()),
        Command::Fit {
            scene,
            config,
            out,
            extrapolated,
            report,
        } => cmd_fit(&scene, &config, &out, extrapolated.as_deref(), report.as_deref()),
        Command::Eval { scene, params, out } => cmd_eval(&scene, &params, &out),
        Command::CalibrateVj { scenes, grid, out } => cmd_calibrate(&scenes, &grid, &out),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Overlay { scene, params, out } => cmd_overlay(&scene, &params, &out),
    }
}

fn default_model() -> Result<BodyModel> {
    build_template_model(DEFAULT_RESOLUTION)
}

pub fn scene_dir(out: &Path, index: usize) -> PathBuf {
    out.join(format!("scene_{index:03}"))
}

fn cmd_synth(
    out: &Path,
    seed: u64,
    count: usize,
    partial: Option<f64>,
    noise_path: Option<&Path>,
) -> Result<()> {
    if count == 0 {
        return Err(Error::invalid("--count must be at least 1"));
    }
    let noise: NoiseSpec = match noise_path {
        Some(p) => read_json(p)?,
        None => NoiseSpec::default(),
    };
    let model = default_model()?;
    let camera = Camera::default_for_size(DEFAULT_IMAGE_SIZE, DEFAULT_IMAGE_SIZE);
    for i in 0..count {
        let scene = generate_scene(&model, seed + i as u64, &noise, &camera, partial)?;
        save_scene(&scene_dir(out, i), &scene)?;
    }
    Ok(())
}

fn require_file(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::invalid(format!("missing file: {}", path.display())));
    }
    Ok(())
}

fn cmd_fit(
    scene_path: &Path,
    config_path: &Path,
    out: &Path,
    extrapolated: Option<&Path>,
    report_path: Option<&Path>,
) -> Result<()> {
    require_file(config_path)?;
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| Error::io(config_path.display().to_string(), e))?;
    let config = FitConfig::from_text(&text)?;
    let mut scene = load_scene(scene_path)?;
    if config.stages.iter().any(|s| s.enable_silhouette) && scene.observation.silhouette.is_none() {
        return Err(Error::invalid(format!(
            "config enables silhouette terms but {} is missing",
            scene_path.join("mask.pgm").display()
        )));
    }
    if let Some(p) = extrapolated {
        let extra: Vec<Keypoint> = read_json(p)?;
        scene.observation.keypoints = merge_keypoints(&scene.observation.keypoints, &extra)?;
    }
    let model = default_model()?;
    let vj = VirtualJointConfig::raw_torso();
    let init = neutral_init(&scene);
    let (params, report) = fit_staged(&model, Some(&vj), &scene.observation, &config, &init)?;
    write_json(out, &params)?;
    if let Some(p) = report_path {
        write_json(p, &report)?;
    }
    Ok(())
}

fn cmd_eval(scene_path: &Path, params_path: &Path, out: &Path) -> Result<()> {
    let scene = load_scene(scene_path)?;
    let params: BodyParams = read_json(params_path)?;
    let model = default_model()?;
    let metrics = evaluate_scene(&model, &scene, &params, None)?;
    write_json(out, &metrics)
}

fn cmd_calibrate(scenes_path: &Path, grid_name: &str, out: &Path) -> Result<()> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(scenes_path)
        .map_err(|e| Error::io(scenes_path.display().to_string(), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let scenes: Vec<_> = dirs
        .iter()
        .map(|d| load_scene(d))
        .collect::<Result<_>>()?;
    let grid = match grid_name {
        "fine" => CalibrationGrid::fine(),
        _ => CalibrationGrid::coarse(),
    };
    let model = default_model()?;
    let vj = calibrate_virtual_joints(&model, &scenes, &grid)?;
    write_json(out, &vj.entries)
}

/// Central finite-difference check of the total-energy gradient at random
/// states; returns the worst relative error observed.
pub fn gradient_check(seed: u64, states: usize) -> Result<f64> {
    let model = build_template_model(3)?;
    let camera = Camera::default_for_size(48, 48);
    let weights = TermWeights {
        lambda_k: 1.0,
        lambda_m: 1e-3,
        lambda_d: 1e-2,
        w_pose: 0.3,
        w_shape: 0.3,
        gm_sigma: 100.0,
    };
    let vj = VirtualJointConfig::raw_torso();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..states {
        let scene = generate_scene(
            &model,
            rng.gen::<u64>(),
            &NoiseSpec {
                keypoint_sigma: 2.0,
                torso_bias: Vec::new(),
                dilation_radius: 2,
                dropout_prob: 0.0,
            },
            &camera,
            None,
        )?;
        let mut fit = scene.gt_params.clone();
        for t in fit.theta.iter_mut() {
            for a in 0..3 {
                t[a] += rng.gen_range(-0.1..0.1);
            }
        }
        for b in fit.beta.iter_mut() {
            *b += rng.gen_range(-0.3..0.3);
        }
        let obs = &scene.observation;
        let field = asymmetric_field(obs.silhouette.as_ref().unwrap(), 1.0, 0.1)?;
        let tau = 1.0;
        let (_, grad) = total_energy(&fit, &model, Some(&vj), obs, Some(&field), &weights, tau)?;
        let x0 = fit.to_flat();
        for pi in 0..x0.len() {
            let h = if pi >= crate::model::TRANS_OFFSET {
                1e-4
            } else {
                1e-5
            };
            let eval = |x: &[f64]| -> Result<f64> {
                let p = BodyParams::from_flat(x)?;
                Ok(total_energy(&p, &model, Some(&vj), obs, Some(&field), &weights, tau)?.0)
            };
            let mut hi = x0.clone();
            let mut lo = x0.clone();
            hi[pi] += h;
            lo[pi] -= h;
            let fd = (eval(&hi)? - eval(&lo)?) / (2.0 * h);
            let an = grad[pi];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(((an - fd) / denom).abs());
        }
    }
    Ok(worst)
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let worst = gradient_check(seed, 3)?;
    println!("gradcheck worst relative error: {worst:.3e}");
    if worst >= 1e-3 {
        return Err(Error::Numerical(format!(
            "gradient check failed: worst relative error {worst:.3e} >= 1e-3"
        )));
    }
    Ok(())
}

fn cmd_overlay(scene_path: &Path, params_path: &Path, out: &Path) -> Result<()> {
    let scene = load_scene(scene_path)?;
    let params: BodyParams = read_json(params_path)?;
    let model = default_model()?;
    let posed = model.forward(&params)?;
    let rendered = rasterize_hard(&scene.camera, &posed.vertices, &model.faces)?;
    let observed = scene.observation.silhouette.as_ref().unwrap_or(&scene.gt_silhouette);
    let blended: Vec<f64> = rendered
        .values
        .iter()
        .zip(&observed.values)
        .map(|(r, o)| 0.5 * r + 0.5 * o)
        .collect();
    write_scaled_grid(&blended, rendered.width, rendered.height, out)
}
