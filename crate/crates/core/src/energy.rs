//! Fitting energy terms and their analytic gradients.
//!
//! The data energy combines robustly weighted keypoint reprojection
//! (regular or virtual joints), an L1 silhouette overlay and the
//! asymmetric distance-field boundary term; the prior is a quadratic
//! pull to the rest pose plus squared-hinge joint limits and a shape
//! regularizer. Every term returns its value together with the gradient
//! over the flat parameter vector.

use nalgebra::{Point2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::field::{AdfField, adf_energy};
use crate::model::{
    BodyModel, BodyParams, PARAM_COUNT, Posed, ROOT_SENTINEL, VirtualJointConfig,
};
use crate::raster::{Silhouette, boundary_field, soft_coverage_2d, soft_coverage_grad_2d};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub lambda_k: f64,
    pub lambda_m: f64,
    pub lambda_d: f64,
    pub w_pose: f64,
    pub w_shape: f64,
    pub gm_sigma: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        TermWeights {
            lambda_k: 1.0,
            lambda_m: 0.0,
            lambda_d: 0.0,
            w_pose: 1.0,
            w_shape: 1.0,
            gm_sigma: 100.0,
        }
    }
}

impl TermWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_k,
            self.lambda_m,
            self.lambda_d,
            self.w_pose,
            self.w_shape,
        ];
        if all.iter().any(|&w| w < 0.0) {
            return Err(Error::invalid("term weights must be nonnegative"));
        }
        if !(self.gm_sigma > 0.0) {
            return Err(Error::invalid("gm_sigma must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    #[serde(rename = "c")]
    pub confidence: f64,
}

/// Pixel rectangle with exclusive upper bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidRegion {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl ValidRegion {
    pub fn full(width: usize, height: usize) -> Self {
        ValidRegion {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn area(&self) -> usize {
        self.x1.saturating_sub(self.x0) * self.y1.saturating_sub(self.y0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub keypoints: Vec<Keypoint>,
    pub silhouette: Option<Silhouette>,
    pub camera: Camera,
    pub valid_region: ValidRegion,
}

impl Observation {
    pub fn validate(&self) -> Result<()> {
        for k in &self.keypoints {
            if !(0.0..=1.0).contains(&k.confidence) {
                return Err(Error::invalid(format!(
                    "keypoint {} confidence {} outside [0,1]",
                    k.id, k.confidence
                )));
            }
        }
        if let Some(s) = &self.silhouette {
            if s.width != self.camera.width || s.height != self.camera.height {
                return Err(Error::DimensionMismatch {
                    expected: format!("{}x{}", self.camera.width, self.camera.height),
                    got: format!("{}x{}", s.width, s.height),
                });
            }
        }
        Ok(())
    }
}

/// Geman-McClure penalty `sigma^2 e^2 / (sigma^2 + e^2)` and its
/// derivative in the residual.
pub fn geman_mcclure(residual: f64, sigma: f64) -> (f64, f64) {
    let s2 = sigma * sigma;
    let e2 = residual * residual;
    let denom = s2 + e2;
    (s2 * e2 / denom, 2.0 * s2 * s2 * residual / (denom * denom))
}

/// Robust penalty as a smooth function of the squared residual norm,
/// avoiding the norm's kink at zero: value and d/d(s = |r|^2).
#[inline]
fn gm_of_squared(s: f64, sigma: f64) -> (f64, f64) {
    let s2 = sigma * sigma;
    let denom = s2 + s;
    (s2 * s / denom, s2 * s2 / (denom * denom))
}

/// Posed joints resolved per keypoint id: either the regular joint or the
/// virtual-joint combination when an entry exists for the id.
fn resolve_joint(
    id: usize,
    posed: &Posed,
    vj: Option<&VirtualJointConfig>,
) -> Result<(Vector3<f64>, Vec<(usize, f64)>)> {
    if let Some(cfg) = vj {
        if let Some(e) = cfg.entries.iter().find(|e| e.target_keypoint_id == id) {
            let mut pos = Vector3::zeros();
            let mut mix = Vec::with_capacity(3);
            for (w, &j) in e.b.iter().zip(&e.joint_triangle) {
                pos += posed.joints[j].coords * *w;
                mix.push((j, *w));
            }
            return Ok((pos, mix));
        }
    }
    if id >= posed.joints.len() {
        return Err(Error::invalid(format!(
            "keypoint id {id} maps to no joint or virtual-joint entry"
        )));
    }
    Ok((posed.joints[id].coords, vec![(id, 1.0)]))
}

/// Keypoint reprojection energy with confidence-weighted Geman-McClure
/// penalties. Returns the unweighted sum; the caller applies `lambda_k`.
pub fn keypoint_energy(
    params: &BodyParams,
    model: &BodyModel,
    vjconfig: Option<&VirtualJointConfig>,
    obs: &Observation,
    weights: &TermWeights,
) -> Result<(f64, Vec<f64>)> {
    let posed = model.forward(params)?;
    let jac = model.joint_jacobian(params, &posed);
    keypoint_energy_posed(params, model, vjconfig, obs, weights, &posed, &jac)
}

fn keypoint_energy_posed(
    _params: &BodyParams,
    _model: &BodyModel,
    vjconfig: Option<&VirtualJointConfig>,
    obs: &Observation,
    weights: &TermWeights,
    posed: &Posed,
    joint_jac: &[Vec<Vector3<f64>>],
) -> Result<(f64, Vec<f64>)> {
    if let Some(cfg) = vjconfig {
        cfg.validate(posed.joints.len())?;
    }
    let mut energy = 0.0;
    let mut grad = vec![0.0; PARAM_COUNT];
    for kp in &obs.keypoints {
        // Resolve the mapping even at zero confidence so unmapped ids are
        // always rejected, then skip the no-op.
        let (pos, mix) = resolve_joint(kp.id, posed, vjconfig)?;
        if kp.confidence == 0.0 {
            continue;
        }
        let p3 = nalgebra::Point3::from(pos);
        let proj = obs.camera.project_point(&p3, kp.id)?;
        let r = Vector2::new(kp.x - proj.x, kp.y - proj.y);
        let (val, dval_ds) = gm_of_squared(r.norm_squared(), weights.gm_sigma);
        energy += kp.confidence * val;
        let pj = obs.camera.projection_jacobian(&p3);
        // dE/dp = c * rho'(s) * 2 r^T * (-dproj/dJ * dJ/dp).
        let coeff = kp.confidence * dval_ds * 2.0;
        let upstream3 = pj.transpose() * r; // d(r . proj)/dJ
        for (j, w) in &mix {
            for (pi, g) in grad.iter_mut().enumerate() {
                *g -= coeff * *w * upstream3.dot(&joint_jac[*j][pi]);
            }
        }
    }
    Ok((energy, grad))
}

/// Shared soft-silhouette render state for the mask and ADF terms.
struct RenderState {
    projected: Vec<Point2<f64>>,
    soft: Silhouette,
}

fn render_soft(model: &BodyModel, posed: &Posed, camera: &Camera, tau: f64) -> Result<RenderState> {
    let projected = camera.project(&posed.vertices)?;
    let soft = soft_coverage_2d(&projected, &model.faces, camera.width, camera.height, tau)?;
    Ok(RenderState { projected, soft })
}

/// Pulls a per-pixel silhouette cotangent all the way back to the flat
/// parameter vector (rasterizer, projection, kinematics).
fn silhouette_pullback(
    params: &BodyParams,
    model: &BodyModel,
    posed: &Posed,
    camera: &Camera,
    state: &RenderState,
    tau: f64,
    upstream: &[f64],
) -> Vec<f64> {
    let grads2 = soft_coverage_grad_2d(&state.projected, &model.faces, &state.soft, tau, upstream);
    let upstream3: Vec<Vector3<f64>> = posed
        .vertices
        .iter()
        .zip(&grads2)
        .map(|(v, g)| camera.projection_jacobian(v).transpose() * g)
        .collect();
    model.vertex_grad_pullback(params, posed, &upstream3)
}

/// L1 silhouette overlay `sum |S - S_hat|` over the valid region.
pub fn mask_energy(
    params: &BodyParams,
    model: &BodyModel,
    obs: &Observation,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    let target = obs
        .silhouette
        .as_ref()
        .ok_or_else(|| Error::invalid("mask energy requires an observed silhouette"))?;
    let posed = model.forward(params)?;
    let state = render_soft(model, &posed, &obs.camera, tau)?;
    let (value, upstream) = mask_residual(target, &state.soft, &obs.valid_region);
    let grad = silhouette_pullback(params, model, &posed, &obs.camera, &state, tau, &upstream);
    Ok((value, grad))
}

fn mask_residual(
    target: &Silhouette,
    soft: &Silhouette,
    region: &ValidRegion,
) -> (f64, Vec<f64>) {
    let w = soft.width;
    let mut value = 0.0;
    let mut upstream = vec![0.0; soft.values.len()];
    for y in region.y0..region.y1.min(soft.height) {
        for x in region.x0..region.x1.min(w) {
            let idx = y * w + x;
            let diff = target.values[idx] - soft.values[idx];
            value += diff.abs();
            upstream[idx] = -diff.signum();
        }
    }
    (value, upstream)
}

/// Boundary-times-field energy restricted to the valid region.
pub fn adf_term(
    params: &BodyParams,
    model: &BodyModel,
    obs: &Observation,
    field: &AdfField,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if field.width != obs.camera.width || field.height != obs.camera.height {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", obs.camera.width, obs.camera.height),
            got: format!("{}x{}", field.width, field.height),
        });
    }
    let posed = model.forward(params)?;
    let state = render_soft(model, &posed, &obs.camera, tau)?;
    let (value, upstream) = adf_residual(&state.soft, field, &obs.valid_region)?;
    let grad = silhouette_pullback(params, model, &posed, &obs.camera, &state, tau, &upstream);
    Ok((value, grad))
}

fn adf_residual(
    soft: &Silhouette,
    field: &AdfField,
    region: &ValidRegion,
) -> Result<(f64, Vec<f64>)> {
    let bfield = boundary_field(soft);
    let (_, field_grad) = adf_energy(&bfield.magnitude, field)?;
    let w = soft.width;
    let mut value = 0.0;
    let mut b_upstream = vec![0.0; soft.values.len()];
    for y in region.y0..region.y1.min(soft.height) {
        for x in region.x0..region.x1.min(w) {
            let idx = y * w + x;
            value += bfield.magnitude[idx] * field.values[idx];
            b_upstream[idx] = field_grad[idx];
        }
    }
    Ok((value, bfield.pullback(&b_upstream)))
}

/// Quadratic pull-to-rest pose prior with squared-hinge joint limits and a
/// shape regularizer. Stands in for learned pose priors.
pub fn prior_energy(
    params: &BodyParams,
    model: &BodyModel,
    weights: &TermWeights,
) -> (f64, Vec<f64>) {
    let mut energy = 0.0;
    let mut grad = vec![0.0; PARAM_COUNT];
    for (j, theta) in params.theta.iter().enumerate() {
        if model.parent[j] == ROOT_SENTINEL {
            continue;
        }
        for axis in 0..3 {
            let t = theta[axis];
            energy += weights.w_pose * t * t;
            grad[3 * j + axis] += 2.0 * weights.w_pose * t;
            let [lo, hi] = model.joint_limits[j][axis];
            let violation = if t > hi {
                t - hi
            } else if t < lo {
                t - lo
            } else {
                0.0
            };
            energy += weights.w_pose * violation * violation;
            grad[3 * j + axis] += 2.0 * weights.w_pose * violation;
        }
    }
    for (b, &coef) in params.beta.iter().enumerate() {
        energy += weights.w_shape * coef * coef;
        grad[crate::model::BETA_OFFSET + b] += 2.0 * weights.w_shape * coef;
    }
    (energy, grad)
}

/// Weighted total energy: data terms plus prior, with one shared forward
/// pass and one shared soft render for the two silhouette terms.
pub fn total_energy(
    params: &BodyParams,
    model: &BodyModel,
    vjconfig: Option<&VirtualJointConfig>,
    obs: &Observation,
    field: Option<&AdfField>,
    weights: &TermWeights,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    weights.validate()?;
    let posed = model.forward(params)?;
    let mut energy = 0.0;
    let mut grad = vec![0.0; PARAM_COUNT];

    if weights.lambda_k > 0.0 && !obs.keypoints.is_empty() {
        let jac = model.joint_jacobian(params, &posed);
        let (e, g) = keypoint_energy_posed(params, model, vjconfig, obs, weights, &posed, &jac)?;
        energy += weights.lambda_k * e;
        for (gi, t) in grad.iter_mut().zip(&g) {
            *gi += weights.lambda_k * t;
        }
    }

    let want_sil = (weights.lambda_m > 0.0 || weights.lambda_d > 0.0) && obs.silhouette.is_some();
    if want_sil {
        let target = obs.silhouette.as_ref().unwrap();
        let state = render_soft(model, &posed, &obs.camera, tau)?;
        let mut upstream = vec![0.0; state.soft.values.len()];
        if weights.lambda_m > 0.0 {
            let (e, up) = mask_residual(target, &state.soft, &obs.valid_region);
            energy += weights.lambda_m * e;
            for (u, v) in upstream.iter_mut().zip(&up) {
                *u += weights.lambda_m * v;
            }
        }
        if weights.lambda_d > 0.0 {
            let f = field.ok_or_else(|| {
                Error::invalid("lambda_d > 0 requires a precomputed distance field")
            })?;
            let (e, up) = adf_residual(&state.soft, f, &obs.valid_region)?;
            energy += weights.lambda_d * e;
            for (u, v) in upstream.iter_mut().zip(&up) {
                *u += weights.lambda_d * v;
            }
        }
        let g = silhouette_pullback(params, model, &posed, &obs.camera, &state, tau, &upstream);
        for (gi, t) in grad.iter_mut().zip(&g) {
            *gi += t;
        }
    }

    let (e, g) = prior_energy(params, model, weights);
    energy += e;
    for (gi, t) in grad.iter_mut().zip(&g) {
        *gi += t;
    }
    Ok((energy, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BodyParams, build_template_model, joint_id};
    use crate::raster::rasterize_hard;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_setup() -> (crate::model::BodyModel, Camera) {
        let model = build_template_model(3).unwrap();
        let camera = Camera::default_for_size(48, 48);
        (model, camera)
    }

    fn posed_in_front(rng: &mut ChaCha8Rng, scale: f64) -> BodyParams {
        let mut p = BodyParams::rest();
        for t in p.theta.iter_mut() {
            *t = Vector3::new(
                rng.gen_range(-scale..scale),
                rng.gen_range(-scale..scale),
                rng.gen_range(-scale..scale),
            );
        }
        for b in p.beta.iter_mut() {
            *b = rng.gen_range(-0.8..0.8);
        }
        p.trans_rot = Vector3::new(std::f64::consts::PI, 0.0, 0.0)
            + Vector3::new(
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
            );
        p.trans_t = Vector3::new(
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.1..0.1),
            rng.gen_range(2.5..3.5),
        );
        p
    }

    fn observation_from(
        model: &crate::model::BodyModel,
        camera: &Camera,
        params: &BodyParams,
    ) -> Observation {
        let posed = model.forward(params).unwrap();
        let projected = camera.project(&posed.joints).unwrap();
        let keypoints = projected
            .iter()
            .enumerate()
            .map(|(id, p)| Keypoint {
                id,
                x: p.x,
                y: p.y,
                confidence: 1.0,
            })
            .collect();
        let sil = rasterize_hard(camera, &posed.vertices, &model.faces).unwrap();
        Observation {
            keypoints,
            silhouette: Some(sil),
            camera: *camera,
            valid_region: ValidRegion::full(camera.width, camera.height),
        }
    }

    #[test]
    fn geman_mcclure_examples() {
        assert_eq!(geman_mcclure(0.0, 2.0).0, 0.0);
        let (v, _) = geman_mcclure(1e6, 1.0);
        assert_relative_eq!(v, 1.0, epsilon = 1e-6);
        assert_relative_eq!(geman_mcclure(1.0, 1.0).0, 0.5, epsilon = 1e-12);
        // Even function, odd derivative.
        let (vp, dp) = geman_mcclure(0.7, 2.0);
        let (vn, dn) = geman_mcclure(-0.7, 2.0);
        assert_eq!(vp, vn);
        assert_eq!(dp, -dn);
        // Derivative matches finite differences.
        let h = 1e-6;
        let fd = (geman_mcclure(0.7 + h, 2.0).0 - geman_mcclure(0.7 - h, 2.0).0) / (2.0 * h);
        assert_relative_eq!(dp, fd, epsilon = 1e-8);
    }

    #[test]
    fn keypoint_energy_zero_at_ground_truth() {
        let (model, camera) = small_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = posed_in_front(&mut rng, 0.3);
        let obs = observation_from(&model, &camera, &params);
        let (e, g) = keypoint_energy(&params, &model, None, &obs, &TermWeights::default()).unwrap();
        assert!(e < 1e-18);
        assert!(g.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-9);
    }

    #[test]
    fn zero_confidence_contributes_nothing() {
        let (model, camera) = small_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = posed_in_front(&mut rng, 0.3);
        let mut obs = observation_from(&model, &camera, &params);
        for k in obs.keypoints.iter_mut() {
            k.confidence = 0.0;
            k.x += 100.0; // perturbing a dead keypoint must be a no-op
        }
        let (e, g) = keypoint_energy(&params, &model, None, &obs, &TermWeights::default()).unwrap();
        assert_eq!(e, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_offset_keypoint_value() {
        let (model, camera) = small_setup();
        let params = {
            let mut p = BodyParams::rest();
            p.trans_rot = Vector3::new(std::f64::consts::PI, 0.0, 0.0);
            p.trans_t = Vector3::new(0.0, 0.0, 3.0);
            p
        };
        let posed = model.forward(&params).unwrap();
        let proj = camera.project(&posed.joints).unwrap();
        let obs = Observation {
            keypoints: vec![Keypoint {
                id: 0,
                x: proj[0].x + 1.0,
                y: proj[0].y,
                confidence: 1.0,
            }],
            silhouette: None,
            camera,
            valid_region: ValidRegion::full(camera.width, camera.height),
        };
        let (e, _) = keypoint_energy(&params, &model, None, &obs, &TermWeights::default()).unwrap();
        let expect = 100.0f64.powi(2) / (100.0f64.powi(2) + 1.0);
        assert_relative_eq!(e, expect, epsilon = 1e-12);
    }

    #[test]
    fn unmapped_keypoint_id_rejected() {
        let (model, camera) = small_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = posed_in_front(&mut rng, 0.2);
        let mut obs = observation_from(&model, &camera, &params);
        obs.keypoints[0].id = 99;
        assert!(matches!(
            keypoint_energy(&params, &model, None, &obs, &TermWeights::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn prior_energy_examples() {
        let (model, _) = small_setup();
        let w = TermWeights::default();
        let rest = BodyParams::rest();
        assert_eq!(prior_energy(&rest, &model, &w).0, 0.0);

        let mut shaped = BodyParams::rest();
        shaped.beta[0] = 1.0;
        assert_relative_eq!(prior_energy(&shaped, &model, &w).0, 1.0, epsilon = 1e-12);

        // Left elbow hinge is one-sided on y in [0, 2.5]: 0.2 rad past the
        // limit adds 0.04 on top of the quadratic term.
        let mut bent = BodyParams::rest();
        bent.theta[joint_id::L_ELBOW] = Vector3::new(0.0, 2.7, 0.0);
        let expect = 2.7f64 * 2.7 + 0.2f64 * 0.2;
        assert_relative_eq!(prior_energy(&bent, &model, &w).0, expect, epsilon = 1e-12);
    }

    #[test]
    fn mask_energy_edge_cases() {
        let (model, camera) = small_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = posed_in_front(&mut rng, 0.2);
        let mut obs = observation_from(&model, &camera, &params);

        // Missing silhouette.
        let mut no_sil = obs.clone();
        no_sil.silhouette = None;
        assert!(mask_energy(&params, &model, &no_sil, 1.0).is_err());

        // Zero-area valid region.
        obs.valid_region = ValidRegion {
            x0: 5,
            y0: 5,
            x1: 5,
            y1: 5,
        };
        let (e, g) = mask_energy(&params, &model, &obs, 1.0).unwrap();
        assert_eq!(e, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mask_self_consistency_with_small_tau() {
        let model = build_template_model(3).unwrap();
        let camera = Camera::default_for_size(96, 96);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = posed_in_front(&mut rng, 0.2);
        let obs = observation_from(&model, &camera, &params);
        let (e, _) = mask_energy(&params, &model, &obs, 0.3).unwrap();
        assert!(
            e < 0.02 * obs.valid_region.area() as f64,
            "self-rendered mask energy too large: {e}"
        );
    }

    #[test]
    fn restricting_region_never_increases_silhouette_energies() {
        let (model, camera) = small_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = posed_in_front(&mut rng, 0.25);
        let fit = posed_in_front(&mut rng, 0.25);
        let obs = observation_from(&model, &camera, &gt);
        let field =
            crate::field::asymmetric_field(obs.silhouette.as_ref().unwrap(), 1.0, 0.1).unwrap();
        let (full_mask, _) = mask_energy(&fit, &model, &obs, 1.0).unwrap();
        let (full_adf, _) = adf_term(&fit, &model, &obs, &field, 1.0).unwrap();
        let mut cropped = obs.clone();
        cropped.valid_region = ValidRegion {
            x0: 0,
            y0: 0,
            x1: 48,
            y1: 24,
        };
        let (half_mask, _) = mask_energy(&fit, &model, &cropped, 1.0).unwrap();
        let (half_adf, _) = adf_term(&fit, &model, &cropped, &field, 1.0).unwrap();
        assert!(half_mask <= full_mask);
        assert!(half_adf <= full_adf);
    }

    #[test]
    fn adf_inner_term_vanishes_with_zero_inner_weight() {
        // A body strictly inside the observed silhouette sees zero energy
        // when only the inner field is active but weighted to zero.
        let (model, camera) = small_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = posed_in_front(&mut rng, 0.15);
        let obs = observation_from(&model, &camera, &params);
        // Dilate the observed mask so the body sits strictly inside.
        let dilated = crate::synth::dilate(obs.silhouette.as_ref().unwrap(), 3);
        let mut obs2 = obs.clone();
        obs2.silhouette = Some(dilated.clone());
        let field = crate::field::asymmetric_field(&dilated, 1.0, 0.0).unwrap();
        // Inner field is exactly zero everywhere inside the mask.
        for (v, s) in field.values.iter().zip(&dilated.values) {
            if *s == 1.0 {
                assert_eq!(*v, 0.0);
            }
        }
        let (_, g) = adf_term(&params, &model, &obs2, &field, 1.0).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn decomposition_matches_component_terms() {
        let (model, camera) = small_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt = posed_in_front(&mut rng, 0.25);
        let fit = posed_in_front(&mut rng, 0.25);
        let obs = observation_from(&model, &camera, &gt);

        let zero = TermWeights {
            lambda_k: 0.0,
            lambda_m: 0.0,
            lambda_d: 0.0,
            w_pose: 0.0,
            w_shape: 0.0,
            gm_sigma: 100.0,
        };
        let (e, g) = total_energy(&fit, &model, None, &obs, None, &zero, 1.0).unwrap();
        assert_eq!(e, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));

        let only_k = TermWeights {
            lambda_k: 1.0,
            ..zero
        };
        let (tot, _) = total_energy(&fit, &model, None, &obs, None, &only_k, 1.0).unwrap();
        let (kp, _) = keypoint_energy(&fit, &model, None, &obs, &only_k).unwrap();
        assert_relative_eq!(tot, kp, epsilon = 1e-12);
    }

    fn check_grad(
        label: &str,
        x0: &[f64],
        analytic: &[f64],
        mut f: impl FnMut(&[f64]) -> f64,
    ) {
        for pi in 0..x0.len() {
            let h = if pi >= crate::model::TRANS_OFFSET {
                1e-4
            } else {
                1e-5
            };
            let mut hi = x0.to_vec();
            let mut lo = x0.to_vec();
            hi[pi] += h;
            lo[pi] -= h;
            let fd = (f(&hi) - f(&lo)) / (2.0 * h);
            let an = analytic[pi];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((an - fd) / denom).abs() < 1e-3,
                "{label}: param {pi} analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn total_energy_gradient_matches_finite_differences() {
        let (model, camera) = small_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let weights = TermWeights {
            lambda_k: 1.0,
            lambda_m: 1e-3,
            lambda_d: 1e-2,
            w_pose: 0.3,
            w_shape: 0.3,
            gm_sigma: 100.0,
        };
        for trial in 0..2 {
            let gt = posed_in_front(&mut rng, 0.3);
            let fit = posed_in_front(&mut rng, 0.3);
            let mut obs = observation_from(&model, &camera, &gt);
            for k in obs.keypoints.iter_mut() {
                k.x += rng.gen_range(-2.0..2.0);
                k.y += rng.gen_range(-2.0..2.0);
            }
            let field =
                crate::field::asymmetric_field(obs.silhouette.as_ref().unwrap(), 1.0, 0.1)
                    .unwrap();
            let vj = VirtualJointConfig::raw_torso();
            let (_, g) =
                total_energy(&fit, &model, Some(&vj), &obs, Some(&field), &weights, 1.0).unwrap();
            let x0 = fit.to_flat();
            check_grad(&format!("total trial {trial}"), &x0, &g, |x| {
                let p = BodyParams::from_flat(x).unwrap();
                total_energy(&p, &model, Some(&vj), &obs, Some(&field), &weights, 1.0)
                    .unwrap()
                    .0
            });
        }
    }
}
