//! Evaluation metrics and virtual-joint calibration.
//!
//! PA-V2V aligns the estimate to the ground truth with a full similarity
//! transform before averaging vertex distances; PVE-T-SC compares T-posed
//! shapes after a rest-height scale correction, so it isolates shape from
//! pose. Calibration scores barycentric candidates per torso joint by the
//! (1 - IoU) x RMSE indicator after a keypoint-only fit.

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::energy::Observation;
use crate::error::{Error, Result};
use crate::model::{BodyModel, BodyParams, VirtualJointConfig, virtual_joints};
use crate::optim::{FitConfig, StageConfig, fit_staged};
use crate::raster::{Silhouette, rasterize_hard};
use crate::synth::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Procrustes-aligned vertex-to-vertex error, meters.
    pub pa_v2v: f64,
    /// T-pose scale-corrected per-vertex error, meters.
    pub pve_t_sc: f64,
    pub iou: f64,
    /// RMSE over observed keypoints with positive confidence, pixels.
    pub keypoint_rmse: f64,
    /// (1 - iou) * keypoint_rmse, pixels.
    pub indicator: f64,
}

/// Similarity transform (scale, rotation, translation) minimizing
/// `sum |s R x_i + t - y_i|^2` with a proper rotation.
pub fn umeyama_align(
    source: &[Point3<f64>],
    target: &[Point3<f64>],
) -> Result<(f64, Matrix3<f64>, Vector3<f64>)> {
    if source.len() != target.len() {
        return Err(Error::DimensionMismatch {
            expected: source.len().to_string(),
            got: target.len().to_string(),
        });
    }
    let n = source.len();
    if n < 3 {
        return Err(Error::invalid("umeyama alignment needs at least 3 points"));
    }
    let nf = n as f64;
    let xbar = source.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / nf;
    let ybar = target.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / nf;
    let mut sigma = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in source.iter().zip(target) {
        let dx = x.coords - xbar;
        let dy = y.coords - ybar;
        sigma += dy * dx.transpose() / nf;
        var_x += dx.norm_squared() / nf;
    }
    if var_x < 1e-18 {
        return Err(Error::DegenerateInput(
            "source points are all coincident".into(),
        ));
    }
    let svd = sigma.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Numerical("svd failed".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::Numerical("svd failed".into()))?;
    let mut s = Matrix3::identity();
    if u.determinant() * vt.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * vt;
    let d = svd.singular_values;
    let scale = (d[0] + d[1] + s[(2, 2)] * d[2]) / var_x;
    let translation = ybar - rotation * xbar * scale;
    Ok((scale, rotation, translation))
}

/// Mean per-vertex distance after similarity alignment of the estimate to
/// the ground truth.
pub fn pa_v2v(est_vertices: &[Point3<f64>], gt_vertices: &[Point3<f64>]) -> Result<f64> {
    let (scale, rotation, translation) = umeyama_align(est_vertices, gt_vertices)?;
    let sum: f64 = est_vertices
        .iter()
        .zip(gt_vertices)
        .map(|(x, y)| (rotation * x.coords * scale + translation - y.coords).norm())
        .sum();
    Ok(sum / est_vertices.len() as f64)
}

/// T-pose per-vertex error after scale-correcting the estimate so its rest
/// height (vertical extent) matches the ground truth.
pub fn pve_t_sc(model: &BodyModel, est_beta: &[f64], gt_beta: &[f64]) -> Result<f64> {
    let est = model.tpose_vertices(est_beta)?;
    let gt = model.tpose_vertices(gt_beta)?;
    let height = |verts: &[Point3<f64>]| {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in verts {
            lo = lo.min(v.y);
            hi = hi.max(v.y);
        }
        hi - lo
    };
    let h_est = height(&est);
    if h_est <= 0.0 {
        return Err(Error::DegenerateInput("estimated T-pose has no height".into()));
    }
    let scale = height(&gt) / h_est;
    let sum: f64 = est
        .iter()
        .zip(&gt)
        .map(|(e, g)| (e.coords * scale - g.coords).norm())
        .sum();
    Ok(sum / est.len() as f64)
}

/// Pixel IoU of two hard silhouettes; 1 when both are empty.
pub fn iou(a: &Silhouette, b: &Silhouette) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", a.width, a.height),
            got: format!("{}x{}", b.width, b.height),
        });
    }
    if !a.is_binary() || !b.is_binary() {
        return Err(Error::invalid("iou requires hard silhouettes"));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.values.iter().zip(&b.values) {
        let (fa, fb) = (*x != 0.0, *y != 0.0);
        inter += (fa && fb) as usize;
        union += (fa || fb) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

pub fn indicator(keypoint_rmse: f64, iou: f64) -> f64 {
    (1.0 - iou) * keypoint_rmse
}

/// RMSE in pixels over keypoints with positive confidence, comparing the
/// observation against the posed model (virtual joints when configured).
pub fn keypoint_rmse(
    model: &BodyModel,
    params: &BodyParams,
    vjconfig: Option<&VirtualJointConfig>,
    obs: &Observation,
) -> Result<f64> {
    let posed = model.forward(params)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for kp in &obs.keypoints {
        if kp.confidence == 0.0 {
            continue;
        }
        let point = match vjconfig.and_then(|cfg| {
            cfg.entries
                .iter()
                .position(|e| e.target_keypoint_id == kp.id)
                .map(|i| (cfg, i))
        }) {
            Some((cfg, i)) => virtual_joints(&posed.joints, cfg)?[i],
            None => {
                if kp.id >= posed.joints.len() {
                    return Err(Error::invalid(format!("keypoint id {} unmapped", kp.id)));
                }
                posed.joints[kp.id]
            }
        };
        let proj = obs.camera.project_point(&point, kp.id)?;
        sum += (kp.x - proj.x).powi(2) + (kp.y - proj.y).powi(2);
        count += 1;
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok((sum / count as f64).sqrt())
}

/// Full metric report of fitted params against a scene's ground truth.
pub fn evaluate_scene(
    model: &BodyModel,
    scene: &Scene,
    params: &BodyParams,
    vjconfig: Option<&VirtualJointConfig>,
) -> Result<MetricReport> {
    let est = model.forward(params)?;
    let gt = model.forward(&scene.gt_params)?;
    let pa = pa_v2v(&est.vertices, &gt.vertices)?;
    let pve = pve_t_sc(model, &params.beta, &scene.gt_params.beta)?;
    let est_sil = rasterize_hard(&scene.camera, &est.vertices, &model.faces)?;
    let overlap = iou(&est_sil, &scene.gt_silhouette)?;
    let rmse = keypoint_rmse(model, params, vjconfig, &scene.observation)?;
    Ok(MetricReport {
        pa_v2v: pa,
        pve_t_sc: pve,
        iou: overlap,
        keypoint_rmse: rmse,
        indicator: indicator(rmse, overlap),
    })
}

/// Fraction of rendered-body pixels lying outside a reference silhouette.
pub fn outside_fraction(rendered: &Silhouette, reference: &Silhouette) -> Result<f64> {
    if rendered.width != reference.width || rendered.height != reference.height {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", reference.width, reference.height),
            got: format!("{}x{}", rendered.width, rendered.height),
        });
    }
    let mut body = 0usize;
    let mut outside = 0usize;
    for (r, g) in rendered.values.iter().zip(&reference.values) {
        if *r != 0.0 {
            body += 1;
            outside += (*g == 0.0) as usize;
        }
    }
    if body == 0 {
        return Ok(0.0);
    }
    Ok(outside as f64 / body as f64)
}

/// Barycentric search grid over the two free coordinates (a, c); the
/// joint's own weight is `1 - a - c`. The raw encoding is (0, 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationGrid {
    pub offsets: Vec<(f64, f64)>,
    /// Grid spacing, halved at each refinement level.
    pub step: f64,
    pub refine_levels: usize,
    /// L-BFGS iterations of the per-candidate keypoint-only fit.
    pub fit_iterations: usize,
}

impl CalibrationGrid {
    fn regular(step: f64) -> Self {
        let mut offsets = Vec::new();
        let n = ((1.5 - -0.5) / step).round() as i64;
        for i in 0..=n {
            for j in 0..=n {
                offsets.push((-0.5 + step * i as f64, -0.5 + step * j as f64));
            }
        }
        CalibrationGrid {
            offsets,
            step,
            refine_levels: 2,
            fit_iterations: 15,
        }
    }

    pub fn coarse() -> Self {
        Self::regular(0.25)
    }

    pub fn fine() -> Self {
        Self::regular(0.125)
    }
}

/// Neutral fitting start: rest pose facing the camera, with depth guessed
/// from the observed silhouette height when one is available.
pub fn neutral_init(scene: &Scene) -> BodyParams {
    let mut init = BodyParams::rest();
    init.trans_rot = Vector3::new(std::f64::consts::PI, 0.0, 0.0);
    init.trans_t = Vector3::new(0.0, 0.0, 0.5 * (2.0 + 5.0));
    // Recover rough depth from the observed silhouette height when present.
    if let Some(sil) = &scene.observation.silhouette {
        let (mut lo, mut hi) = (usize::MAX, 0usize);
        for y in 0..sil.height {
            for x in 0..sil.width {
                if sil.values[y * sil.width + x] != 0.0 {
                    lo = lo.min(y);
                    hi = hi.max(y);
                }
            }
        }
        if hi > lo {
            let pixel_height = (hi - lo + 1) as f64;
            // Template rest height is roughly 1.7 m.
            let depth = scene.camera.fy * 1.7 / pixel_height;
            init.trans_t.z = depth.clamp(1.0, 8.0);
        }
    }
    init
}

fn candidate_score(
    model: &BodyModel,
    scenes: &[Scene],
    vjconfig: &VirtualJointConfig,
    fit_iterations: usize,
) -> Result<f64> {
    let config = FitConfig {
        stages: vec![StageConfig {
            iterations: fit_iterations,
            enable_virtual_joints: true,
            ..StageConfig::default()
        }],
        ..FitConfig::default()
    };
    let mut total = 0.0;
    for scene in scenes {
        let init = neutral_init(scene);
        let (params, _) = fit_staged(model, Some(vjconfig), &scene.observation, &config, &init)?;
        let posed = model.forward(&params)?;
        let est_sil = rasterize_hard(&scene.camera, &posed.vertices, &model.faces)?;
        let reference = scene
            .observation
            .silhouette
            .as_ref()
            .unwrap_or(&scene.gt_silhouette);
        let overlap = iou(&est_sil, reference)?;
        let rmse = keypoint_rmse(model, &params, Some(vjconfig), &scene.observation)?;
        total += indicator(rmse, overlap);
    }
    Ok(total / scenes.len() as f64)
}

/// Calibrates each torso virtual joint independently by grid search over
/// barycentric candidates, scored by the mean fit indicator across scenes,
/// with 2 half-step refinement passes around the winner. Ties break toward
/// the lowest candidate index.
pub fn calibrate_virtual_joints(
    model: &BodyModel,
    scenes: &[Scene],
    grid: &CalibrationGrid,
) -> Result<VirtualJointConfig> {
    if scenes.is_empty() {
        return Err(Error::invalid("calibration needs at least one scene"));
    }
    if grid.offsets.is_empty() {
        return Err(Error::invalid("calibration grid is empty"));
    }
    let mut result = VirtualJointConfig::raw_torso();
    for entry_idx in 0..result.entries.len() {
        let score_of = |cfg: &mut VirtualJointConfig, a: f64, c: f64| -> Result<f64> {
            cfg.entries[entry_idx].b = [a, 1.0 - a - c, c];
            candidate_score(model, scenes, cfg, grid.fit_iterations)
        };
        let mut probe = result.clone();
        let mut best = grid.offsets[0];
        let mut best_score = score_of(&mut probe, best.0, best.1)?;
        for &(a, c) in grid.offsets.iter().skip(1) {
            let s = score_of(&mut probe, a, c)?;
            if s < best_score {
                best_score = s;
                best = (a, c);
            }
        }
        let mut step = grid.step;
        for _ in 0..grid.refine_levels {
            step *= 0.5;
            for di in -1..=1i64 {
                for dj in -1..=1i64 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (a, c) = (best.0 + step * di as f64, best.1 + step * dj as f64);
                    let s = score_of(&mut probe, a, c)?;
                    if s < best_score {
                        best_score = s;
                        best = (a, c);
                    }
                }
            }
        }
        result.entries[entry_idx].b = [best.0, 1.0 - best.0 - best.1, best.1];
    }
    Ok(result)
}

/// Mean calibration indicator of a fixed virtual-joint table over scenes,
/// using the same keypoint-only fit as the calibration search.
pub fn calibration_indicator(
    model: &BodyModel,
    scenes: &[Scene],
    vjconfig: &VirtualJointConfig,
    fit_iterations: usize,
) -> Result<f64> {
    candidate_score(model, scenes, vjconfig, fit_iterations)
}

/// Rough camera for tests and defaults.
pub fn default_camera() -> Camera {
    Camera::default_for_size(96, 96)
}
