//! Synthetic scene generation: sampled ground-truth bodies, noisy and
//! biased keypoints, clothing-like silhouette dilation, partial crops,
//! plus the scale-and-translation alignment used for partial fitting.
//!
//! Everything downstream of a seed is deterministic, so a scene can be
//! persisted as (seed, noise spec) and regenerated bitwise.

use nalgebra::{Point2, Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::camera::Camera;
use crate::energy::{Keypoint, Observation, ValidRegion};
use crate::error::{Error, Result};
use crate::model::{
    BodyModel, BodyParams, JOINT_COUNT, SHAPE_COUNT, VirtualJointConfig, VirtualJointEntry,
    virtual_joints,
};
use crate::pgm::{read_hard_silhouette, write_silhouette};
use crate::raster::{Silhouette, SilhouetteKind, rasterize_hard};

/// Planted keypoint bias: a barycentric displacement of a torso keypoint
/// inside its virtual-joint triangle plane. `da` shifts weight toward the
/// first triangle vertex and `dc` toward the third; the joint's own weight
/// absorbs the remainder so the combination stays barycentric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorsoBias {
    pub keypoint_id: usize,
    pub da: f64,
    pub dc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub keypoint_sigma: f64,
    pub torso_bias: Vec<TorsoBias>,
    pub dilation_radius: usize,
    pub dropout_prob: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            keypoint_sigma: 2.0,
            torso_bias: Vec::new(),
            dilation_radius: 2,
            dropout_prob: 0.05,
        }
    }
}

impl NoiseSpec {
    pub fn zero() -> Self {
        NoiseSpec {
            keypoint_sigma: 0.0,
            torso_bias: Vec::new(),
            dilation_radius: 0,
            dropout_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.keypoint_sigma < 0.0 {
            return Err(Error::invalid("keypoint_sigma must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::invalid("dropout_prob must be in [0,1]"));
        }
        Ok(())
    }

    /// Ground-truth virtual-joint table realizing the planted biases on top
    /// of the raw torso encoding.
    pub fn gt_virtual_joints(&self) -> Result<VirtualJointConfig> {
        let mut cfg = VirtualJointConfig::raw_torso();
        for bias in &self.torso_bias {
            let entry: &mut VirtualJointEntry = cfg
                .entries
                .iter_mut()
                .find(|e| e.target_keypoint_id == bias.keypoint_id)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "torso bias keypoint {} has no virtual-joint entry",
                        bias.keypoint_id
                    ))
                })?;
            entry.b = [bias.da, 1.0 - bias.da - bias.dc, bias.dc];
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub gt_params: BodyParams,
    pub camera: Camera,
    pub observation: Observation,
    pub gt_silhouette: Silhouette,
    pub seed: u64,
    pub noise: NoiseSpec,
    /// First cropped pixel row when the scene is partial.
    pub truncation: Option<usize>,
}

/// Morphological dilation of a binary silhouette by a disk.
pub fn dilate(sil: &Silhouette, radius: usize) -> Silhouette {
    if radius == 0 {
        return sil.clone();
    }
    let r = radius as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                offsets.push((dx, dy));
            }
        }
    }
    let (w, h) = (sil.width as isize, sil.height as isize);
    let mut out = vec![0.0; sil.values.len()];
    for y in 0..h {
        for x in 0..w {
            if sil.values[(y * w + x) as usize] == 0.0 {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && nx < w && ny >= 0 && ny < h {
                    out[(ny * w + nx) as usize] = 1.0;
                }
            }
        }
    }
    Silhouette {
        values: out,
        width: sil.width,
        height: sil.height,
        kind: SilhouetteKind::Hard,
    }
}

/// Limb bones (child joint ids) whose depth slant must stay away from the
/// image plane. A bone lying in the image plane leaves its child joint with a
/// second-order depth gauge that no monocular observation can resolve, so the
/// sampler articulates limbs out of plane and rejects flat configurations.
const SLANTED_BONES: [usize; 8] = {
    use crate::model::joint_id::*;
    [
        L_ELBOW, L_WRIST, R_ELBOW, R_WRIST, L_KNEE, L_ANKLE, R_KNEE, R_ANKLE,
    ]
};

const MIN_BONE_SLANT: f64 = 0.3;

fn sample_params(model: &BodyModel, rng: &mut ChaCha8Rng) -> BodyParams {
    for _attempt in 0..200 {
        let p = sample_params_once(model, rng);
        let Ok(posed) = model.forward(&p) else {
            continue;
        };
        let flat = SLANTED_BONES.iter().any(|&j| {
            let d = (posed.joints[j] - posed.joints[model.parent[j]]).normalize();
            d.z.abs() < MIN_BONE_SLANT
        });
        if !flat {
            return p;
        }
    }
    sample_params_once(model, rng)
}

fn sample_params_once(model: &BodyModel, rng: &mut ChaCha8Rng) -> BodyParams {
    use crate::model::joint_id::*;
    let mut p = BodyParams::rest();
    for (i, b) in p.beta.iter_mut().enumerate() {
        let n: f64 = rng.sample(StandardNormal);
        // Girth stays in a narrower band: large negative values collapse limb
        // radii to sub-pixel widths and the silhouette stops constraining them.
        let lim = if i == 3 { 1.0 } else { 2.0 };
        *b = n.clamp(-lim, lim);
    }
    for (j, theta) in p.theta.iter_mut().enumerate() {
        for axis in 0..3 {
            let [lo, hi] = model.joint_limits[j][axis];
            theta[axis] = rng.gen_range(0.7 * lo..=0.7 * hi);
        }
    }
    // Articulate the limbs out of the image plane: bend shoulders/hips toward
    // or away from the camera and keep elbows/knees meaningfully flexed.
    let mut bend = |amount: f64| -> f64 {
        let s = if rng.gen_range(0.0..1.0) < 0.5 { 1.0 } else { -1.0 };
        s * rng.gen_range(amount..amount + 0.4)
    };
    p.theta[L_SHOULDER].y = (p.theta[L_SHOULDER].y + bend(0.5)).clamp(-2.0, 2.0);
    p.theta[R_SHOULDER].y = (p.theta[R_SHOULDER].y + bend(0.5)).clamp(-2.0, 2.0);
    p.theta[L_HIP].x = (p.theta[L_HIP].x + bend(0.5)).clamp(-2.0, 2.0);
    p.theta[R_HIP].x = (p.theta[R_HIP].x + bend(0.5)).clamp(-2.0, 2.0);
    p.theta[L_ELBOW].y = rng.gen_range(0.6..1.6);
    p.theta[R_ELBOW].y = -rng.gen_range(0.6..1.6);
    p.theta[L_KNEE].x = rng.gen_range(0.6..1.6);
    p.theta[R_KNEE].x = rng.gen_range(0.6..1.6);
    // Flip to face the camera (the model is y-up, the image is y-down),
    // then wobble the global orientation a little.
    let wobble = Rotation3::new(Vector3::new(
        rng.gen_range(-0.15..0.15),
        rng.gen_range(-0.15..0.15),
        rng.gen_range(-0.15..0.15),
    ));
    let base = Rotation3::new(Vector3::new(std::f64::consts::PI, 0.0, 0.0));
    p.trans_rot = (wobble * base).scaled_axis();
    p.trans_t = Vector3::new(
        rng.gen_range(-0.15..0.15),
        rng.gen_range(-0.15..0.15),
        rng.gen_range(1.6..2.2),
    );
    p
}

/// Generates a fully seed-deterministic synthetic scene.
pub fn generate_scene(
    model: &BodyModel,
    seed: u64,
    noise: &NoiseSpec,
    camera: &Camera,
    partial_fraction: Option<f64>,
) -> Result<Scene> {
    noise.validate()?;
    if let Some(f) = partial_fraction {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::invalid(format!(
                "partial_fraction {f} outside (0, 1]"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt_params = sample_params(model, &mut rng);
    let posed = model.forward(&gt_params)?;
    let gt_sil = rasterize_hard(camera, &posed.vertices, &model.faces)?;
    let mut observed = dilate(&gt_sil, noise.dilation_radius);

    let gt_vj = noise.gt_virtual_joints()?;
    let vj_points = virtual_joints(&posed.joints, &gt_vj)?;
    let mut keypoints = Vec::with_capacity(JOINT_COUNT);
    for id in 0..JOINT_COUNT {
        let body_point = match gt_vj
            .entries
            .iter()
            .position(|e| e.target_keypoint_id == id && e.b != [0.0, 1.0, 0.0])
        {
            Some(i) => vj_points[i],
            None => posed.joints[id],
        };
        let proj = camera.project_point(&body_point, id)?;
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        let dropped = rng.gen_range(0.0..1.0) < noise.dropout_prob;
        keypoints.push(Keypoint {
            id,
            x: proj.x + noise.keypoint_sigma * nx,
            y: proj.y + noise.keypoint_sigma * ny,
            confidence: if dropped { 0.0 } else { 1.0 },
        });
    }

    let mut valid_region = ValidRegion::full(camera.width, camera.height);
    let mut truncation = None;
    if let Some(f) = partial_fraction {
        let crop_row = ((camera.height as f64) * f).round() as usize;
        let crop_row = crop_row.clamp(1, camera.height);
        if crop_row < camera.height {
            valid_region.y1 = crop_row;
            truncation = Some(crop_row);
            for k in keypoints.iter_mut() {
                if k.y >= crop_row as f64 {
                    k.confidence = 0.0;
                }
            }
            for y in crop_row..camera.height {
                for x in 0..camera.width {
                    observed.values[y * camera.width + x] = 0.0;
                }
            }
        }
    }

    Ok(Scene {
        gt_params,
        camera: *camera,
        observation: Observation {
            keypoints,
            silhouette: Some(observed),
            camera: *camera,
            valid_region,
        },
        gt_silhouette: gt_sil,
        seed,
        noise: noise.clone(),
        truncation,
    })
}

/// Least-squares isotropic scale and translation mapping `observed` onto
/// `reference` (no rotation).
pub fn similarity_align(
    reference: &[Point2<f64>],
    observed: &[Point2<f64>],
) -> Result<(f64, Vector2<f64>)> {
    if reference.len() != observed.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len().to_string(),
            got: observed.len().to_string(),
        });
    }
    if reference.len() < 2 {
        return Err(Error::invalid("similarity alignment needs at least 2 pairs"));
    }
    let n = reference.len() as f64;
    let rbar = reference.iter().fold(Vector2::zeros(), |a, p| a + p.coords) / n;
    let obar = observed.iter().fold(Vector2::zeros(), |a, p| a + p.coords) / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (r, o) in reference.iter().zip(observed) {
        let dr = r.coords - rbar;
        let dobs = o.coords - obar;
        cov += dr.dot(&dobs);
        var += dobs.norm_squared();
    }
    if var < 1e-24 {
        return Err(Error::DegenerateInput(
            "observed keypoints are all coincident".into(),
        ));
    }
    let scale = cov / var;
    Ok((scale, rbar - obar * scale))
}

/// Disjoint union of visible and extrapolated keypoints, ordered by id.
pub fn merge_keypoints(visible: &[Keypoint], extrapolated: &[Keypoint]) -> Result<Vec<Keypoint>> {
    let mut out: Vec<Keypoint> = Vec::new();
    for k in visible {
        if k.confidence > 0.0 {
            out.push(*k);
        }
    }
    for k in extrapolated {
        if out.iter().any(|v| v.id == k.id) {
            return Err(Error::invalid(format!(
                "extrapolated keypoint id {} collides with a visible keypoint",
                k.id
            )));
        }
        out.push(*k);
    }
    out.sort_by_key(|k| k.id);
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneHeader {
    seed: u64,
    params: BodyParams,
    camera: Camera,
    noise: NoiseSpec,
    valid_region: ValidRegion,
    truncation: Option<usize>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Json {
            path: path.display().to_string(),
            source: e,
        })?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text.as_bytes()).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })
}

/// Persists a scene as a directory: `scene.json`, `keypoints.json`,
/// `mask.pgm` (observed) and `gt_mask.pgm`.
pub fn save_scene(dir: &Path, scene: &Scene) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let header = SceneHeader {
        seed: scene.seed,
        params: scene.gt_params.clone(),
        camera: scene.camera,
        noise: scene.noise.clone(),
        valid_region: scene.observation.valid_region,
        truncation: scene.truncation,
    };
    write_json(&dir.join("scene.json"), &header)?;
    write_json(&dir.join("keypoints.json"), &scene.observation.keypoints)?;
    if let Some(sil) = &scene.observation.silhouette {
        write_silhouette(sil, &dir.join("mask.pgm"))?;
    }
    write_silhouette(&scene.gt_silhouette, &dir.join("gt_mask.pgm"))?;
    Ok(())
}

/// Loads a scene directory. A missing `mask.pgm` yields an observation
/// without a silhouette; the other three files are required.
pub fn load_scene(dir: &Path) -> Result<Scene> {
    let header: SceneHeader = read_json(&dir.join("scene.json"))?;
    if header.params.beta.len() != SHAPE_COUNT {
        return Err(Error::invalid("scene params have the wrong shape count"));
    }
    let keypoints: Vec<Keypoint> = read_json(&dir.join("keypoints.json"))?;
    let mask_path = dir.join("mask.pgm");
    let silhouette = if mask_path.exists() {
        Some(read_hard_silhouette(&mask_path)?)
    } else {
        None
    };
    let gt_silhouette = read_hard_silhouette(&dir.join("gt_mask.pgm"))?;
    Ok(Scene {
        gt_params: header.params,
        camera: header.camera,
        observation: Observation {
            keypoints,
            silhouette,
            camera: header.camera,
            valid_region: header.valid_region,
        },
        gt_silhouette,
        seed: header.seed,
        noise: header.noise,
        truncation: header.truncation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_template_model;
    use approx::assert_relative_eq;

    fn setup() -> (BodyModel, Camera) {
        (
            build_template_model(3).unwrap(),
            Camera::default_for_size(64, 64),
        )
    }

    #[test]
    fn noiseless_scene_matches_ground_truth_exactly() {
        let (model, camera) = setup();
        let scene = generate_scene(&model, 11, &NoiseSpec::zero(), &camera, None).unwrap();
        let posed = model.forward(&scene.gt_params).unwrap();
        let proj = camera.project(&posed.joints).unwrap();
        for k in &scene.observation.keypoints {
            assert_eq!(k.x, proj[k.id].x);
            assert_eq!(k.y, proj[k.id].y);
            assert_eq!(k.confidence, 1.0);
        }
        assert_eq!(
            scene.observation.silhouette.as_ref().unwrap().values,
            scene.gt_silhouette.values
        );
    }

    #[test]
    fn dilation_strictly_grows_foreground() {
        let (model, camera) = setup();
        let noise = NoiseSpec {
            dilation_radius: 3,
            ..NoiseSpec::zero()
        };
        let scene = generate_scene(&model, 13, &noise, &camera, None).unwrap();
        let obs = scene.observation.silhouette.as_ref().unwrap();
        let gt = &scene.gt_silhouette;
        for (o, g) in obs.values.iter().zip(&gt.values) {
            assert!(o >= g);
        }
        assert!(obs.foreground_count() > gt.foreground_count());
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let (model, camera) = setup();
        let noise = NoiseSpec::default();
        let a = generate_scene(&model, 21, &noise, &camera, Some(0.5)).unwrap();
        let b = generate_scene(&model, 21, &noise, &camera, Some(0.5)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&model, 22, &noise, &camera, Some(0.5)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn partial_scene_crops_rows_and_keypoints() {
        let (model, camera) = setup();
        let scene = generate_scene(&model, 5, &NoiseSpec::zero(), &camera, Some(0.5)).unwrap();
        let crop = scene.truncation.unwrap();
        assert_eq!(crop, 32);
        assert_eq!(scene.observation.valid_region.y1, crop);
        let obs = scene.observation.silhouette.as_ref().unwrap();
        for y in crop..camera.height {
            for x in 0..camera.width {
                assert_eq!(obs.values[y * camera.width + x], 0.0);
            }
        }
        for k in &scene.observation.keypoints {
            if k.y >= crop as f64 {
                assert_eq!(k.confidence, 0.0);
            }
        }
        assert!(matches!(
            generate_scene(&model, 5, &NoiseSpec::zero(), &camera, Some(0.0)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn torso_bias_moves_only_biased_keypoints() {
        let (model, camera) = setup();
        let noise = NoiseSpec {
            torso_bias: vec![TorsoBias {
                keypoint_id: crate::model::joint_id::L_HIP,
                da: 0.25,
                dc: -0.25,
            }],
            ..NoiseSpec::zero()
        };
        let plain = generate_scene(&model, 31, &NoiseSpec::zero(), &camera, None).unwrap();
        let biased = generate_scene(&model, 31, &noise, &camera, None).unwrap();
        for (a, b) in plain
            .observation
            .keypoints
            .iter()
            .zip(&biased.observation.keypoints)
        {
            if a.id == crate::model::joint_id::L_HIP {
                assert!((a.x - b.x).abs() + (a.y - b.y).abs() > 0.1);
            } else {
                assert_eq!((a.x, a.y), (b.x, b.y));
            }
        }
    }

    #[test]
    fn similarity_align_examples() {
        let p = |x: f64, y: f64| Point2::new(x, y);
        let (s, t) = similarity_align(&[p(0.0, 0.0), p(1.0, 0.0)], &[p(0.0, 0.0), p(1.0, 0.0)])
            .unwrap();
        assert_eq!((s, t.x, t.y), (1.0, 0.0, 0.0));

        let (s, t) = similarity_align(&[p(0.0, 0.0), p(1.0, 0.0)], &[p(2.0, 2.0), p(4.0, 2.0)])
            .unwrap();
        assert_relative_eq!(s, 0.5, epsilon = 1e-12);
        assert_relative_eq!(t.x, -1.0, epsilon = 1e-12);
        assert_relative_eq!(t.y, -1.0, epsilon = 1e-12);

        // Construct and recover: reference = 3*observed + (5,5).
        let obs = [p(0.3, -1.2), p(2.0, 0.7), p(-0.5, 0.1)];
        let refp: Vec<_> = obs
            .iter()
            .map(|q| p(3.0 * q.x + 5.0, 3.0 * q.y + 5.0))
            .collect();
        let (s, t) = similarity_align(&refp, &obs).unwrap();
        assert_relative_eq!(s, 3.0, epsilon = 1e-12);
        assert_relative_eq!(t.x, 5.0, epsilon = 1e-12);
        assert_relative_eq!(t.y, 5.0, epsilon = 1e-12);

        assert!(similarity_align(&[p(0.0, 0.0), p(1.0, 1.0)], &[p(2.0, 2.0), p(2.0, 2.0)]).is_err());
        assert!(similarity_align(&[p(0.0, 0.0)], &[p(1.0, 1.0)]).is_err());
    }

    #[test]
    fn similarity_align_matches_grid_search() {
        let p = |x: f64, y: f64| Point2::new(x, y);
        let refp = [p(1.0, 2.0), p(5.0, -1.0), p(-2.0, 3.0), p(0.0, 0.0)];
        let obs = [p(2.0, 1.0), p(4.5, -0.5), p(-1.0, 2.5), p(0.3, 0.2)];
        let (s, t) = similarity_align(&refp, &obs).unwrap();
        let residual = |s: f64, t: Vector2<f64>| {
            refp.iter()
                .zip(&obs)
                .map(|(r, o)| (o.coords * s + t - r.coords).norm_squared())
                .sum::<f64>()
        };
        let best = residual(s, t);
        let mut scale = 0.1;
        while scale <= 10.0 {
            // Optimal translation for a fixed scale is the centroid gap.
            let rbar = refp.iter().fold(Vector2::zeros(), |a, q| a + q.coords) / 4.0;
            let obar = obs.iter().fold(Vector2::zeros(), |a, q| a + q.coords) / 4.0;
            assert!(best <= residual(scale, rbar - obar * scale) + 1e-9);
            scale += 0.05;
        }
    }

    #[test]
    fn merge_keypoints_examples() {
        let kp = |id, c| Keypoint {
            id,
            x: id as f64,
            y: 0.0,
            confidence: c,
        };
        let visible: Vec<_> = (0..9).map(|i| kp(i, 1.0)).collect();
        let extrapolated: Vec<_> = (9..16).rev().map(|i| kp(i, 0.8)).collect();
        let merged = merge_keypoints(&visible, &extrapolated).unwrap();
        assert_eq!(merged.len(), 16);
        for (i, k) in merged.iter().enumerate() {
            assert_eq!(k.id, i);
        }
        assert_eq!(merge_keypoints(&visible, &[]).unwrap(), visible);
        assert!(merge_keypoints(&visible, &[kp(3, 0.5)]).is_err());
        // A zero-confidence visible keypoint does not block its id.
        let mut dead = visible.clone();
        dead[3].confidence = 0.0;
        let merged = merge_keypoints(&dead, &[kp(3, 0.5)]).unwrap();
        assert_eq!(merged.len(), 9);
        assert_eq!(merged[3].confidence, 0.5);
    }

    #[test]
    fn scene_directory_round_trip() {
        let (model, camera) = setup();
        let scene = generate_scene(&model, 77, &NoiseSpec::default(), &camera, Some(0.6)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(dir.path(), &scene).unwrap();
        let loaded = load_scene(dir.path()).unwrap();
        assert_eq!(scene, loaded);

        std::fs::remove_file(dir.path().join("mask.pgm")).unwrap();
        let no_mask = load_scene(dir.path()).unwrap();
        assert!(no_mask.observation.silhouette.is_none());
    }
}
