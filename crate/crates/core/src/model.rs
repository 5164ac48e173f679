//! Procedural articulated blendshape body.
//!
//! A 16-joint capsule body with four analytic blendshapes stands in for a
//! licensed statistical body model. The forward function composes shape
//! blending, axis-angle forward kinematics, linear blend skinning and a
//! global rigid transform, and exposes analytic jacobians with respect to
//! every parameter.

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};

pub const JOINT_COUNT: usize = 16;
pub const SHAPE_COUNT: usize = 4;
pub const ROOT_SENTINEL: usize = usize::MAX;

/// Flat parameter vector layout: 48 joint rotations, 4 shape coefficients,
/// 3 global rotation, 3 global translation.
pub const PARAM_COUNT: usize = 3 * JOINT_COUNT + SHAPE_COUNT + 6;
pub const BETA_OFFSET: usize = 3 * JOINT_COUNT;
pub const ROT_OFFSET: usize = BETA_OFFSET + SHAPE_COUNT;
pub const TRANS_OFFSET: usize = ROT_OFFSET + 3;

/// Joint indices of the built-in skeleton.
pub mod joint_id {
    pub const PELVIS: usize = 0;
    pub const CHEST: usize = 1;
    pub const NECK: usize = 2;
    pub const HEAD: usize = 3;
    pub const L_SHOULDER: usize = 4;
    pub const L_ELBOW: usize = 5;
    pub const L_WRIST: usize = 6;
    pub const R_SHOULDER: usize = 7;
    pub const R_ELBOW: usize = 8;
    pub const R_WRIST: usize = 9;
    pub const L_HIP: usize = 10;
    pub const L_KNEE: usize = 11;
    pub const L_ANKLE: usize = 12;
    pub const R_HIP: usize = 13;
    pub const R_KNEE: usize = 14;
    pub const R_ANKLE: usize = 15;
}

/// Skinning weight row: sparse `(joint, weight)` entries summing to one.
pub type SkinRow = Vec<(usize, f64)>;

#[derive(Debug, Clone)]
pub struct BodyModel {
    pub template_vertices: Vec<Point3<f64>>,
    pub faces: Vec<[usize; 3]>,
    /// Parent joint index per joint; the root carries [`ROOT_SENTINEL`].
    pub parent: Vec<usize>,
    pub rest_joints: Vec<Point3<f64>>,
    /// Per-shape per-vertex displacement directions (meters per unit beta).
    pub blend_dirs: Vec<Vec<Vector3<f64>>>,
    /// Per-shape per-joint displacement, the ring centroid of `blend_dirs`.
    pub joint_blend_dirs: Vec<Vec<Vector3<f64>>>,
    pub skin_weights: Vec<SkinRow>,
    /// Joint regressor: each joint is the centroid of its vertex ring.
    pub joint_rings: Vec<Vec<usize>>,
    /// Per-joint per-axis rotation limits `[lo, hi]` (radians).
    pub joint_limits: Vec<[[f64; 2]; 3]>,
    /// `subtree[k][j]` is true when `j` lies in the kinematic subtree of `k`.
    subtree: Vec<[bool; JOINT_COUNT]>,
    /// Topological order (parents before children).
    topo: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyParams {
    pub theta: Vec<Vector3<f64>>,
    pub beta: Vec<f64>,
    pub trans_rot: Vector3<f64>,
    pub trans_t: Vector3<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BodyParamsRepr {
    theta: Vec<[f64; 3]>,
    beta: Vec<f64>,
    trans_rot: [f64; 3],
    trans_t: [f64; 3],
}

impl Serialize for BodyParams {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        BodyParamsRepr {
            theta: self.theta.iter().map(|v| [v.x, v.y, v.z]).collect(),
            beta: self.beta.clone(),
            trans_rot: [self.trans_rot.x, self.trans_rot.y, self.trans_rot.z],
            trans_t: [self.trans_t.x, self.trans_t.y, self.trans_t.z],
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for BodyParams {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let r = BodyParamsRepr::deserialize(de)?;
        Ok(BodyParams {
            theta: r.theta.iter().map(|v| Vector3::new(v[0], v[1], v[2])).collect(),
            beta: r.beta,
            trans_rot: Vector3::new(r.trans_rot[0], r.trans_rot[1], r.trans_rot[2]),
            trans_t: Vector3::new(r.trans_t[0], r.trans_t[1], r.trans_t[2]),
        })
    }
}

impl BodyParams {
    pub fn rest() -> Self {
        BodyParams {
            theta: vec![Vector3::zeros(); JOINT_COUNT],
            beta: vec![0.0; SHAPE_COUNT],
            trans_rot: Vector3::zeros(),
            trans_t: Vector3::zeros(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(PARAM_COUNT);
        for t in &self.theta {
            x.extend_from_slice(&[t.x, t.y, t.z]);
        }
        x.extend_from_slice(&self.beta);
        x.extend_from_slice(&[self.trans_rot.x, self.trans_rot.y, self.trans_rot.z]);
        x.extend_from_slice(&[self.trans_t.x, self.trans_t.y, self.trans_t.z]);
        x
    }

    pub fn from_flat(x: &[f64]) -> Result<Self> {
        if x.len() != PARAM_COUNT {
            return Err(Error::DimensionMismatch {
                expected: format!("{PARAM_COUNT} parameters"),
                got: format!("{}", x.len()),
            });
        }
        let theta = (0..JOINT_COUNT)
            .map(|j| Vector3::new(x[3 * j], x[3 * j + 1], x[3 * j + 2]))
            .collect();
        Ok(BodyParams {
            theta,
            beta: x[BETA_OFFSET..ROT_OFFSET].to_vec(),
            trans_rot: Vector3::new(x[ROT_OFFSET], x[ROT_OFFSET + 1], x[ROT_OFFSET + 2]),
            trans_t: Vector3::new(x[TRANS_OFFSET], x[TRANS_OFFSET + 1], x[TRANS_OFFSET + 2]),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Virtual joint table: each entry re-expresses a keypoint's body location
/// as a barycentric combination of a joint triangle. Weights may be negative
/// to extrapolate outside the triangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualJointConfig {
    pub entries: Vec<VirtualJointEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualJointEntry {
    pub target_keypoint_id: usize,
    pub joint_triangle: [usize; 3],
    pub b: [f64; 3],
}

impl VirtualJointConfig {
    /// Torso virtual joints at their raw encodings: hips parameterized on
    /// (pelvis, hip, other hip), shoulders on (chest, shoulder, other
    /// shoulder). The raw encoding puts all weight on the joint itself.
    pub fn raw_torso() -> Self {
        use joint_id::*;
        let entry = |kp, tri| VirtualJointEntry {
            target_keypoint_id: kp,
            joint_triangle: tri,
            b: [0.0, 1.0, 0.0],
        };
        VirtualJointConfig {
            entries: vec![
                entry(L_SHOULDER, [CHEST, L_SHOULDER, R_SHOULDER]),
                entry(R_SHOULDER, [CHEST, R_SHOULDER, L_SHOULDER]),
                entry(L_HIP, [PELVIS, L_HIP, R_HIP]),
                entry(R_HIP, [PELVIS, R_HIP, L_HIP]),
            ],
        }
    }

    pub fn validate(&self, joint_count: usize) -> Result<()> {
        for e in &self.entries {
            if e.joint_triangle.iter().any(|&j| j >= joint_count) {
                return Err(Error::invalid(format!(
                    "virtual joint triangle {:?} indexes past joint count {joint_count}",
                    e.joint_triangle
                )));
            }
            let s: f64 = e.b.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "barycentric weights {:?} sum to {s}, expected 1",
                    e.b
                )));
            }
        }
        Ok(())
    }
}

/// Evaluates every virtual-joint entry against posed joint positions.
pub fn virtual_joints(
    joints: &[Point3<f64>],
    config: &VirtualJointConfig,
) -> Result<Vec<Point3<f64>>> {
    config.validate(joints.len())?;
    Ok(config
        .entries
        .iter()
        .map(|e| {
            let [a, b, c] = e.joint_triangle;
            Point3::from(
                joints[a].coords * e.b[0] + joints[b].coords * e.b[1] + joints[c].coords * e.b[2],
            )
        })
        .collect())
}

/// Rodrigues rotation with a Taylor branch below 1e-8 radians.
pub fn rotation_from_axis_angle(w: &Vector3<f64>) -> Matrix3<f64> {
    let th2 = w.norm_squared();
    let k = skew(w);
    if th2 < 1e-16 {
        Matrix3::identity() + k + (k * k) * 0.5
    } else {
        let th = th2.sqrt();
        let k = k / th;
        Matrix3::identity() + k * th.sin() + (k * k) * (1.0 - th.cos())
    }
}

/// Derivative of the rotation matrix with respect to axis-angle component
/// `i` (Gallego & Yezzi closed form), with the exact limit at zero angle.
pub fn rotation_derivative(w: &Vector3<f64>, r: &Matrix3<f64>, i: usize) -> Matrix3<f64> {
    let th2 = w.norm_squared();
    let mut e = Vector3::zeros();
    e[i] = 1.0;
    if th2 < 1e-16 {
        return skew(&e);
    }
    let v = w.cross(&((Matrix3::identity() - r) * e));
    (skew(w) * w[i] + skew(&v)) * (1.0 / th2) * r
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Full forward-kinematics state, keeping intermediates for gradients.
#[derive(Debug, Clone)]
pub struct Posed {
    pub vertices: Vec<Point3<f64>>,
    pub joints: Vec<Point3<f64>>,
    /// Per-joint world rotation before the global transform.
    world_rot: Vec<Matrix3<f64>>,
    /// Per-joint world position before the global transform.
    world_pos: Vec<Vector3<f64>>,
    /// Skinned vertices before the global transform.
    local_vertices: Vec<Vector3<f64>>,
    shaped_vertices: Vec<Vector3<f64>>,
    shaped_joints: Vec<Vector3<f64>>,
    t_rot: Matrix3<f64>,
}

impl BodyModel {
    pub fn joint_count(&self) -> usize {
        self.rest_joints.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.template_vertices.len()
    }

    fn check_params(&self, params: &BodyParams) -> Result<()> {
        if params.theta.len() != self.joint_count() || params.beta.len() != SHAPE_COUNT {
            return Err(Error::DimensionMismatch {
                expected: format!("{} joints, {SHAPE_COUNT} shapes", self.joint_count()),
                got: format!("{} joints, {} shapes", params.theta.len(), params.beta.len()),
            });
        }
        if !params.is_finite() {
            return Err(Error::invalid("non-finite body parameters"));
        }
        Ok(())
    }

    /// The body function: shape blending, forward kinematics, linear blend
    /// skinning and the global rigid transform, in that order.
    pub fn forward(&self, params: &BodyParams) -> Result<Posed> {
        self.check_params(params)?;
        let nj = self.joint_count();
        let nv = self.vertex_count();

        let mut shaped_vertices: Vec<Vector3<f64>> =
            self.template_vertices.iter().map(|p| p.coords).collect();
        let mut shaped_joints: Vec<Vector3<f64>> =
            self.rest_joints.iter().map(|p| p.coords).collect();
        for (b, &coef) in params.beta.iter().enumerate() {
            if coef != 0.0 {
                for (v, d) in shaped_vertices.iter_mut().zip(&self.blend_dirs[b]) {
                    *v += d * coef;
                }
                for (j, d) in shaped_joints.iter_mut().zip(&self.joint_blend_dirs[b]) {
                    *j += d * coef;
                }
            }
        }

        let mut world_rot = vec![Matrix3::identity(); nj];
        let mut world_pos = vec![Vector3::zeros(); nj];
        for &j in &self.topo {
            let local = rotation_from_axis_angle(&params.theta[j]);
            if self.parent[j] == ROOT_SENTINEL {
                world_rot[j] = local;
                world_pos[j] = shaped_joints[j];
            } else {
                let p = self.parent[j];
                world_rot[j] = world_rot[p] * local;
                world_pos[j] = world_pos[p] + world_rot[p] * (shaped_joints[j] - shaped_joints[p]);
            }
        }

        let mut local_vertices = vec![Vector3::zeros(); nv];
        for v in 0..nv {
            let mut acc = Vector3::zeros();
            for &(a, w) in &self.skin_weights[v] {
                acc += (world_pos[a] + world_rot[a] * (shaped_vertices[v] - shaped_joints[a])) * w;
            }
            local_vertices[v] = acc;
        }

        let t_rot = rotation_from_axis_angle(&params.trans_rot);
        let vertices = local_vertices
            .iter()
            .map(|x| Point3::from(t_rot * x + params.trans_t))
            .collect();
        let joints = world_pos
            .iter()
            .map(|p| Point3::from(t_rot * p + params.trans_t))
            .collect();

        Ok(Posed {
            vertices,
            joints,
            world_rot,
            world_pos,
            local_vertices,
            shaped_vertices,
            shaped_joints,
            t_rot,
        })
    }

    /// T-posed mesh for a given shape (zero pose, identity transform).
    pub fn tpose_vertices(&self, beta: &[f64]) -> Result<Vec<Point3<f64>>> {
        let mut params = BodyParams::rest();
        params.beta = beta.to_vec();
        Ok(self.forward(&params)?.vertices)
    }

    /// Per-joint derivative of the local skinning translation chain with
    /// respect to one shape coefficient.
    fn joint_beta_derivs(&self, posed: &Posed, b: usize) -> Vec<Vector3<f64>> {
        let nj = self.joint_count();
        let jd = &self.joint_blend_dirs[b];
        let mut d = vec![Vector3::zeros(); nj];
        for &j in &self.topo {
            if self.parent[j] == ROOT_SENTINEL {
                d[j] = jd[j];
            } else {
                let p = self.parent[j];
                d[j] = d[p] + posed.world_rot[p] * (jd[j] - jd[p]);
            }
        }
        d
    }

    /// `B_k,i = W_par(k) dR_k/dθ_i R_k^T W_par(k)^T`, the generator of the
    /// world motion induced by joint `k`'s rotation component `i`.
    fn theta_generators(&self, params: &BodyParams, posed: &Posed) -> Vec<[Matrix3<f64>; 3]> {
        let nj = self.joint_count();
        let mut out = Vec::with_capacity(nj);
        for k in 0..nj {
            let local = rotation_from_axis_angle(&params.theta[k]);
            let w_par = if self.parent[k] == ROOT_SENTINEL {
                Matrix3::identity()
            } else {
                posed.world_rot[self.parent[k]]
            };
            let mut gens = [Matrix3::zeros(); 3];
            for (i, gen) in gens.iter_mut().enumerate() {
                let dr = rotation_derivative(&params.theta[k], &local, i);
                *gen = w_par * dr * local.transpose() * w_par.transpose();
            }
            out.push(gens);
        }
        out
    }

    /// Jacobian of every posed joint with respect to the flat parameter
    /// vector: `out[j][p]` is the 3D derivative of joint `j`.
    pub fn joint_jacobian(&self, params: &BodyParams, posed: &Posed) -> Vec<Vec<Vector3<f64>>> {
        let nj = self.joint_count();
        let gens = self.theta_generators(params, posed);
        let mut out = vec![vec![Vector3::zeros(); PARAM_COUNT]; nj];

        for j in 0..nj {
            for k in 0..nj {
                if !self.subtree[k][j] || k == j {
                    continue;
                }
                let rel = posed.world_pos[j] - posed.world_pos[k];
                for i in 0..3 {
                    out[j][3 * k + i] = posed.t_rot * (gens[k][i] * rel);
                }
            }
        }
        for b in 0..SHAPE_COUNT {
            let d = self.joint_beta_derivs(posed, b);
            for j in 0..nj {
                out[j][BETA_OFFSET + b] = posed.t_rot * d[j];
            }
        }
        let t_rot = posed.t_rot;
        for i in 0..3 {
            let dr = rotation_derivative(&params.trans_rot, &t_rot, i);
            for j in 0..nj {
                out[j][ROT_OFFSET + i] = dr * posed.world_pos[j];
            }
            for j in 0..nj {
                let mut e = Vector3::zeros();
                e[i] = 1.0;
                out[j][TRANS_OFFSET + i] = e;
            }
        }
        out
    }

    /// Pulls a per-vertex cotangent `upstream[v] = dE/d(vertex v)` back to
    /// the flat parameter vector without materializing the full vertex
    /// jacobian. Subtree sums make the pose part O(V + J^2).
    pub fn vertex_grad_pullback(
        &self,
        params: &BodyParams,
        posed: &Posed,
        upstream: &[Vector3<f64>],
    ) -> Vec<f64> {
        assert_eq!(upstream.len(), self.vertex_count());
        let nj = self.joint_count();
        let mut grad = vec![0.0; PARAM_COUNT];

        // Global translation and rotation.
        let total: Vector3<f64> = upstream.iter().sum();
        for i in 0..3 {
            grad[TRANS_OFFSET + i] = total[i];
        }
        let mut outer = Matrix3::zeros();
        for (u, x) in upstream.iter().zip(&posed.local_vertices) {
            outer += u * x.transpose();
        }
        for i in 0..3 {
            let dr = rotation_derivative(&params.trans_rot, &posed.t_rot, i);
            grad[ROT_OFFSET + i] = dr.component_mul(&outer).sum();
        }

        // Shape coefficients.
        for b in 0..SHAPE_COUNT {
            let jd = self.joint_beta_derivs(posed, b);
            let mut acc = 0.0;
            for v in 0..self.vertex_count() {
                let mut dx = Vector3::zeros();
                for &(a, w) in &self.skin_weights[v] {
                    dx += (jd[a]
                        + posed.world_rot[a]
                            * (self.blend_dirs[b][v] - self.joint_blend_dirs[b][a]))
                        * w;
                }
                acc += upstream[v].dot(&(posed.t_rot * dx));
            }
            grad[BETA_OFFSET + b] = acc;
        }

        // Joint rotations via per-joint moments aggregated over subtrees.
        let mut z = vec![Matrix3::zeros(); nj];
        let mut u_sum = vec![Vector3::zeros(); nj];
        for v in 0..self.vertex_count() {
            let u = upstream[v];
            for &(a, w) in &self.skin_weights[v] {
                let x = posed.world_pos[a]
                    + posed.world_rot[a] * (posed.shaped_vertices[v] - posed.shaped_joints[a]);
                z[a] += (u * x.transpose()) * w;
                u_sum[a] += u * w;
            }
        }
        // Accumulate children into parents (reverse topological order).
        let mut z_sub = z;
        let mut u_sub = u_sum;
        for &j in self.topo.iter().rev() {
            if self.parent[j] != ROOT_SENTINEL {
                let p = self.parent[j];
                let zj = z_sub[j];
                let uj = u_sub[j];
                z_sub[p] += zj;
                u_sub[p] += uj;
            }
        }
        let gens = self.theta_generators(params, posed);
        for k in 0..nj {
            let m = z_sub[k] - u_sub[k] * posed.world_pos[k].transpose();
            for i in 0..3 {
                grad[3 * k + i] = (posed.t_rot * gens[k][i]).component_mul(&m).sum();
            }
        }
        grad
    }

    /// Writes the posed mesh as Wavefront OBJ text.
    pub fn write_obj<W: Write>(&self, vertices: &[Point3<f64>], mut w: W) -> std::io::Result<()> {
        for v in vertices {
            writeln!(w, "v {:.8e} {:.8e} {:.8e}", v.x, v.y, v.z)?;
        }
        for f in &self.faces {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let nj = self.joint_count();
        for (v, row) in self.skin_weights.iter().enumerate() {
            let mut s = 0.0;
            for &(j, w) in row {
                if j >= nj || w < 0.0 {
                    return Err(Error::invalid(format!("bad skin weight ({j}, {w}) at vertex {v}")));
                }
                s += w;
            }
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("skin row {v} sums to {s}")));
            }
        }
        let roots = self.parent.iter().filter(|&&p| p == ROOT_SENTINEL).count();
        if roots != 1 {
            return Err(Error::invalid(format!("{roots} roots, expected exactly 1")));
        }
        if self.topo.len() != nj {
            return Err(Error::invalid("parent array contains a cycle"));
        }
        let nv = self.vertex_count();
        let mut referenced = vec![false; nv];
        for f in &self.faces {
            for &i in f {
                if i >= nv {
                    return Err(Error::invalid(format!("face references vertex {i} of {nv}")));
                }
                referenced[i] = true;
            }
        }
        if referenced.iter().any(|r| !r) {
            return Err(Error::invalid("unreferenced vertex in template mesh"));
        }
        for j in 0..nj {
            let ring = &self.joint_rings[j];
            if ring.is_empty() {
                return Err(Error::invalid(format!("joint {j} has an empty regressor ring")));
            }
            let mut c = Vector3::zeros();
            for &v in ring {
                c += self.template_vertices[v].coords;
            }
            c /= ring.len() as f64;
            if (c - self.rest_joints[j].coords).norm() > 1e-6 {
                return Err(Error::invalid(format!(
                    "joint {j} is {} m from its ring centroid",
                    (c - self.rest_joints[j].coords).norm()
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Template construction

struct BoneSpec {
    joint: usize,
    radius: f64,
}

fn skeleton() -> (Vec<usize>, Vec<Point3<f64>>) {
    use joint_id::*;
    let mut parent = vec![ROOT_SENTINEL; JOINT_COUNT];
    let mut rest = vec![Point3::origin(); JOINT_COUNT];
    rest[PELVIS] = Point3::new(0.0, 0.0, 0.0);
    let mut set = |j: usize, p: usize, pos: [f64; 3]| {
        parent[j] = p;
        rest[j] = Point3::new(pos[0], pos[1], pos[2]);
    };
    set(CHEST, PELVIS, [0.0, 0.25, 0.0]);
    set(NECK, CHEST, [0.0, 0.50, 0.0]);
    set(HEAD, NECK, [0.0, 0.65, 0.0]);
    set(L_SHOULDER, CHEST, [0.20, 0.47, 0.0]);
    set(L_ELBOW, L_SHOULDER, [0.46, 0.47, 0.0]);
    set(L_WRIST, L_ELBOW, [0.70, 0.47, 0.0]);
    set(R_SHOULDER, CHEST, [-0.20, 0.47, 0.0]);
    set(R_ELBOW, R_SHOULDER, [-0.46, 0.47, 0.0]);
    set(R_WRIST, R_ELBOW, [-0.70, 0.47, 0.0]);
    set(L_HIP, PELVIS, [0.10, -0.05, 0.0]);
    set(L_KNEE, L_HIP, [0.10, -0.50, 0.0]);
    set(L_ANKLE, L_KNEE, [0.10, -0.95, 0.0]);
    set(R_HIP, PELVIS, [-0.10, -0.05, 0.0]);
    set(R_KNEE, R_HIP, [-0.10, -0.50, 0.0]);
    set(R_ANKLE, R_KNEE, [-0.10, -0.95, 0.0]);
    (parent, rest)
}

/// Elliptical cross-section half-axis scales. Anisotropic sections make
/// rotation about the bone axis visible in the silhouette, which a body of
/// revolution would leave entirely unconstrained.
const SECTION_U: f64 = 1.25;
const SECTION_W: f64 = 0.8;

fn bone_radius(joint: usize) -> f64 {
    use joint_id::*;
    match joint {
        CHEST => 0.12,
        NECK => 0.10,
        HEAD => 0.08,
        L_SHOULDER | R_SHOULDER => 0.05,
        L_ELBOW | R_ELBOW => 0.045,
        L_WRIST | R_WRIST => 0.04,
        L_HIP | R_HIP => 0.06,
        L_KNEE | R_KNEE => 0.06,
        L_ANKLE | R_ANKLE => 0.05,
        _ => 0.05,
    }
}

fn is_limb_joint(j: usize) -> bool {
    use joint_id::*;
    matches!(
        j,
        L_ELBOW | L_WRIST | R_ELBOW | R_WRIST | L_KNEE | L_ANKLE | R_KNEE | R_ANKLE
    )
}

/// Root joint of the limb a bone belongs to (shoulder or hip).
fn limb_root(j: usize) -> usize {
    use joint_id::*;
    match j {
        L_ELBOW | L_WRIST => L_SHOULDER,
        R_ELBOW | R_WRIST => R_SHOULDER,
        L_KNEE | L_ANKLE => L_HIP,
        R_KNEE | R_ANKLE => R_HIP,
        _ => unreachable!("not a limb joint"),
    }
}

fn default_joint_limits() -> Vec<[[f64; 2]; 3]> {
    use joint_id::*;
    let generic = [[-2.0, 2.0]; 3];
    let tight = [-0.3, 0.3];
    let mut limits = vec![generic; JOINT_COUNT];
    limits[PELVIS] = [tight; 3];
    // One-sided hinges: elbows flex about y, knees about x.
    limits[L_ELBOW] = [tight, [0.0, 2.5], tight];
    limits[R_ELBOW] = [tight, [-2.5, 0.0], tight];
    limits[L_KNEE] = [[0.0, 2.5], tight, tight];
    limits[R_KNEE] = [[0.0, 2.5], tight, tight];
    limits
}

const SEGMENTS: usize = 6;

/// Builds the deterministic capsule-mesh body. `resolution` is the number
/// of cross-section rings along each bone.
pub fn build_template_model(resolution: usize) -> Result<BodyModel> {
    if resolution < 3 {
        return Err(Error::invalid(format!(
            "resolution must be at least 3 rings per bone, got {resolution}"
        )));
    }
    let (parent, rest) = skeleton();
    let bones: Vec<BoneSpec> = (0..JOINT_COUNT)
        .filter(|&j| parent[j] != ROOT_SENTINEL)
        .map(|j| BoneSpec {
            joint: j,
            radius: bone_radius(j),
        })
        .collect();

    let mut vertices: Vec<Point3<f64>> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let mut skin: Vec<SkinRow> = Vec::new();
    let mut joint_rings: Vec<Vec<usize>> = vec![Vec::new(); JOINT_COUNT];
    // Per-vertex bone assignment for the blendshape fields.
    let mut vert_bone: Vec<usize> = Vec::new();

    for (bi, bone) in bones.iter().enumerate() {
        let p = rest[parent[bone.joint]];
        let j = rest[bone.joint];
        let axis = (j - p).normalize();
        // Deterministic orthonormal frame around the bone axis.
        let pick = if axis.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        let u = axis.cross(&pick).normalize();
        let w = axis.cross(&u);

        let base = vertices.len();
        for ring in 0..resolution {
            let t = ring as f64 / (resolution - 1) as f64;
            let center = p + (j - p) * t;
            for s in 0..SEGMENTS {
                let phi = 2.0 * std::f64::consts::PI * s as f64 / SEGMENTS as f64;
                let pos = center
                    + (u * (phi.cos() * SECTION_U) + w * (phi.sin() * SECTION_W)) * bone.radius;
                vertices.push(pos);
                skin.push(vec![(parent[bone.joint], 1.0)]);
                vert_bone.push(bi);
            }
        }
        let apex_lo = vertices.len();
        vertices.push(p - axis * (bone.radius * 0.4));
        skin.push(vec![(parent[bone.joint], 1.0)]);
        vert_bone.push(bi);
        let apex_hi = vertices.len();
        vertices.push(j + axis * (bone.radius * 0.4));
        skin.push(vec![(parent[bone.joint], 1.0)]);
        vert_bone.push(bi);

        let ring_start = |r: usize| base + r * SEGMENTS;
        for r in 0..resolution - 1 {
            for s in 0..SEGMENTS {
                let s1 = (s + 1) % SEGMENTS;
                let a = ring_start(r) + s;
                let b = ring_start(r) + s1;
                let c = ring_start(r + 1) + s;
                let d = ring_start(r + 1) + s1;
                faces.push([a, b, d]);
                faces.push([a, d, c]);
            }
        }
        for s in 0..SEGMENTS {
            let s1 = (s + 1) % SEGMENTS;
            faces.push([apex_lo, ring_start(0) + s1, ring_start(0) + s]);
            faces.push([apex_hi, ring_start(resolution - 1) + s, ring_start(resolution - 1) + s1]);
        }

        // Regressor ring: the bone's end ring sits exactly at its joint.
        joint_rings[bone.joint] = (0..SEGMENTS)
            .map(|s| ring_start(resolution - 1) + s)
            .collect();
        if parent[bone.joint] == joint_id::PELVIS && bone.joint == joint_id::CHEST {
            joint_rings[joint_id::PELVIS] = (0..SEGMENTS).map(|s| ring_start(0) + s).collect();
        }
    }

    // Blendshape displacement fields.
    let nv = vertices.len();
    let mut blend_dirs: Vec<Vec<Vector3<f64>>> = vec![vec![Vector3::zeros(); nv]; SHAPE_COUNT];
    for v in 0..nv {
        let pos = vertices[v].coords;
        let bone = &bones[vert_bone[v]];
        // Shape 0: global scale about the pelvis.
        blend_dirs[0][v] = pos * 0.1;
        if is_limb_joint(bone.joint) {
            // Shape 1: limb length, scaling each limb about its root joint.
            let root = rest[limb_root(bone.joint)].coords;
            blend_dirs[1][v] = (pos - root) * 0.1;
            // Shape 3: limb girth, radial growth away from the bone axis.
            let p = rest[parent[bone.joint]].coords;
            let axis = (rest[bone.joint].coords - p).normalize();
            let radial = (pos - p) - axis * (pos - p).dot(&axis);
            blend_dirs[3][v] = radial * 0.3;
        } else {
            // Shape 2: torso width in the horizontal plane.
            blend_dirs[2][v] = Vector3::new(pos.x * 0.15, 0.0, pos.z * 0.15);
        }
    }
    let mut joint_blend_dirs: Vec<Vec<Vector3<f64>>> =
        vec![vec![Vector3::zeros(); JOINT_COUNT]; SHAPE_COUNT];
    for b in 0..SHAPE_COUNT {
        for j in 0..JOINT_COUNT {
            let ring = &joint_rings[j];
            let mut c = Vector3::zeros();
            for &v in ring {
                c += blend_dirs[b][v];
            }
            joint_blend_dirs[b][j] = c / ring.len() as f64;
        }
    }

    let topo = topological_order(&parent)?;
    let mut subtree = vec![[false; JOINT_COUNT]; JOINT_COUNT];
    for j in 0..JOINT_COUNT {
        let mut a = j;
        loop {
            subtree[a][j] = true;
            if parent[a] == ROOT_SENTINEL {
                break;
            }
            a = parent[a];
        }
    }

    let model = BodyModel {
        template_vertices: vertices,
        faces,
        parent,
        rest_joints: rest,
        blend_dirs,
        joint_blend_dirs,
        skin_weights: skin,
        joint_rings,
        joint_limits: default_joint_limits(),
        subtree,
        topo,
    };
    model.validate()?;
    Ok(model)
}

fn topological_order(parent: &[usize]) -> Result<Vec<usize>> {
    let n = parent.len();
    let mut order = Vec::with_capacity(n);
    let mut placed = vec![false; n];
    for _ in 0..n {
        let before = order.len();
        for j in 0..n {
            if !placed[j] && (parent[j] == ROOT_SENTINEL || placed[parent[j]]) {
                placed[j] = true;
                order.push(j);
            }
        }
        if order.len() == n {
            return Ok(order);
        }
        if order.len() == before {
            return Err(Error::invalid("kinematic tree contains a cycle"));
        }
    }
    Ok(order)
}
