//! Silhouette rasterization and boundary extraction.
//!
//! The soft rasterizer computes per-pixel coverage as the maximum of
//! `sigma(d/tau)` over triangles, with `d` the signed 2D Euclidean distance
//! to the projected triangle boundary (positive inside). The max keeps the
//! 0.5 level set on the union outline, so the soft silhouette is an
//! unbiased relaxation of the hard one. The sigmoid tail is
//! smoothly truncated below `d/tau = -10` so far-away triangles can be
//! culled by bounding box without introducing derivative discontinuities.

use nalgebra::{Point2, Point3, Vector2};

use crate::camera::Camera;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SilhouetteKind {
    Soft,
    Hard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Silhouette {
    /// Row-major occupancy grid in `[0, 1]`.
    pub values: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub kind: SilhouetteKind,
}

impl Silhouette {
    pub fn zeros(width: usize, height: usize, kind: SilhouetteKind) -> Self {
        Silhouette {
            values: vec![0.0; width * height],
            width,
            height,
            kind,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn foreground_count(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.5).count()
    }
}

/// Sigmoid argument below which coverage is exactly zero.
const TRUNC_ZERO: f64 = -14.0;
/// Sigmoid argument above which the plain logistic is used.
const TRUNC_FULL: f64 = -10.0;
/// Smoothly truncated logistic and its derivative.
#[inline]
fn coverage(x: f64) -> (f64, f64) {
    if x <= TRUNC_ZERO {
        return (0.0, 0.0);
    }
    let s = 1.0 / (1.0 + (-x).exp());
    let ds = s * (1.0 - s);
    if x >= TRUNC_FULL {
        (s, ds)
    } else {
        let t = (x - TRUNC_ZERO) / (TRUNC_FULL - TRUNC_ZERO);
        let w = t * t * (3.0 - 2.0 * t);
        let dw = 6.0 * t * (1.0 - t) / (TRUNC_FULL - TRUNC_ZERO);
        (s * w, ds * w + s * dw)
    }
}

/// Signed distance from `p` to the boundary of triangle `(a, b, c)`,
/// positive inside, plus its gradient with respect to the three vertices.
fn signed_distance(
    p: Vector2<f64>,
    tri: [Vector2<f64>; 3],
) -> (f64, [Vector2<f64>; 3]) {
    let area2 = cross2(tri[1] - tri[0], tri[2] - tri[0]);
    let orient = if area2 >= 0.0 { 1.0 } else { -1.0 };
    let mut inside = true;
    for e in 0..3 {
        let a = tri[e];
        let b = tri[(e + 1) % 3];
        if cross2(b - a, p - a) * orient < 0.0 {
            inside = false;
            break;
        }
    }
    let sign = if inside { 1.0 } else { -1.0 };

    let mut best = f64::INFINITY;
    let mut best_edge = 0;
    let mut best_t = 0.0;
    for e in 0..3 {
        let a = tri[e];
        let b = tri[(e + 1) % 3];
        let ab = b - a;
        let len2 = ab.norm_squared();
        let t = if len2 > 0.0 {
            ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let d = (p - (a + ab * t)).norm();
        if d < best {
            best = d;
            best_edge = e;
            best_t = t;
        }
    }

    let mut grads = [Vector2::zeros(); 3];
    if best > 1e-12 {
        let a = tri[best_edge];
        let b = tri[(best_edge + 1) % 3];
        let q = a + (b - a) * best_t;
        let n = (p - q) / best;
        grads[best_edge] = -n * (sign * (1.0 - best_t));
        grads[(best_edge + 1) % 3] = -n * (sign * best_t);
    }
    (sign * best, grads)
}

/// Outline edges of a projected mesh: edges with no twin face, or whose two
/// faces project with opposite (or degenerate) orientation, which is
/// exactly where a closed mesh's 2D projection folds. A lone triangle
/// reduces to its three edges.
fn outline_edges(verts: &[Point2<f64>], faces: &[[usize; 3]]) -> Vec<(usize, usize)> {
    use std::collections::HashMap;
    let orient: Vec<f64> = faces
        .iter()
        .map(|f| {
            let tri = [verts[f[0]].coords, verts[f[1]].coords, verts[f[2]].coords];
            let a = cross2(tri[1] - tri[0], tri[2] - tri[0]);
            if a.abs() < 1e-12 { 0.0 } else { a.signum() }
        })
        .collect();
    // (orientation product, face count, any nondegenerate face) per edge;
    // edges bordered only by degenerate faces carry no outline.
    let mut adjacent: HashMap<(usize, usize), (f64, u8, bool)> = HashMap::new();
    for (fi, f) in faces.iter().enumerate() {
        for e in 0..3 {
            let (u, v) = (f[e], f[(e + 1) % 3]);
            let key = (u.min(v), u.max(v));
            let slot = adjacent.entry(key).or_insert((1.0, 0, false));
            slot.0 *= orient[fi];
            slot.1 += 1;
            slot.2 |= orient[fi] != 0.0;
        }
    }
    let mut edges: Vec<(usize, usize)> = adjacent
        .into_iter()
        .filter(|&(_, (prod, count, live))| live && (count != 2 || prod <= 0.0))
        .map(|(key, _)| key)
        .collect();
    edges.sort_unstable();
    // Occluded folds (both sides of the edge covered by other faces, as
    // when an arm crosses the torso) are interior contours: a filled
    // silhouette does not see them.
    let covered = |p: Vector2<f64>| -> bool {
        faces.iter().enumerate().any(|(fi, f)| {
            if orient[fi] == 0.0 {
                return false;
            }
            let tri = [verts[f[0]].coords, verts[f[1]].coords, verts[f[2]].coords];
            let (x0, x1, y0, y1) = triangle_bbox(&tri);
            if p.x < x0 || p.x > x1 || p.y < y0 || p.y > y1 {
                return false;
            }
            (0..3).all(|e| {
                let a = tri[e];
                let b = tri[(e + 1) % 3];
                cross2(b - a, p - a) * orient[fi] >= 0.0
            })
        })
    };
    edges.retain(|&(u, v)| {
        let a = verts[u].coords;
        let b = verts[v].coords;
        let ab = b - a;
        let len = ab.norm();
        if len < 1e-9 {
            return true;
        }
        let m = (a + b) * 0.5;
        let n = Vector2::new(-ab.y, ab.x) * (0.5 / len);
        !(covered(m + n) && covered(m - n))
    });
    edges
}

/// Per-pixel minimum distance to the outline, with the argmin edge and its
/// projection parameter recorded for the backward pass. Pixels farther than
/// `margin` from every outline edge keep `d = inf` and `edge = usize::MAX`.
struct OutlineDistance {
    d: Vec<f64>,
    edge: Vec<usize>,
    t: Vec<f64>,
    edges: Vec<(usize, usize)>,
}

fn outline_distance(
    verts: &[Point2<f64>],
    faces: &[[usize; 3]],
    width: usize,
    height: usize,
    margin: f64,
) -> OutlineDistance {
    let edges = outline_edges(verts, faces);
    let mut d = vec![f64::INFINITY; width * height];
    let mut edge = vec![usize::MAX; width * height];
    let mut t = vec![0.0; width * height];
    for (ei, &(u, v)) in edges.iter().enumerate() {
        let a = verts[u].coords;
        let b = verts[v].coords;
        let ab = b - a;
        let len2 = ab.norm_squared();
        let (x0, x1) = (a.x.min(b.x), a.x.max(b.x));
        let (y0, y1) = (a.y.min(b.y), a.y.max(b.y));
        for y in pixel_range(y0, y1, margin, height) {
            for x in pixel_range(x0, x1, margin, width) {
                let p = Vector2::new(x as f64, y as f64);
                let s = if len2 > 0.0 {
                    ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let dist = (p - (a + ab * s)).norm();
                let idx = y * width + x;
                if dist < d[idx] {
                    d[idx] = dist;
                    edge[idx] = ei;
                    t[idx] = s;
                }
            }
        }
    }
    OutlineDistance { d, edge, t, edges }
}

#[inline]
fn cross2(a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

fn pixel_range(lo: f64, hi: f64, margin: f64, limit: usize) -> std::ops::Range<usize> {
    let start = (lo - margin).ceil().max(0.0) as usize;
    let end = ((hi + margin).floor() as isize + 1).clamp(0, limit as isize) as usize;
    start.min(limit)..end
}

fn triangle_bbox(tri: &[Vector2<f64>; 3]) -> (f64, f64, f64, f64) {
    let xs = [tri[0].x, tri[1].x, tri[2].x];
    let ys = [tri[0].y, tri[1].y, tri[2].y];
    let min = |v: &[f64; 3]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64; 3]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (min(&xs), max(&xs), min(&ys), max(&ys))
}

fn degenerate(tri: &[Vector2<f64>; 3]) -> bool {
    cross2(tri[1] - tri[0], tri[2] - tri[0]).abs() < 1e-12
}

/// Soft coverage over projected 2D vertices.
pub fn soft_coverage_2d(
    verts: &[Point2<f64>],
    faces: &[[usize; 3]],
    width: usize,
    height: usize,
    tau: f64,
) -> Result<Silhouette> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    let margin = -TRUNC_ZERO * tau;
    // Coverage is the sigmoid of the signed distance to the union outline:
    // magnitude from the nearest outline edge, sign from hard coverage.
    // The 0.5 level set sits exactly on the outline, interior pixels
    // saturate to one, and the value varies continuously with the vertices
    // because outline-edge reclassification only happens where a face
    // projects to zero area.
    let od = outline_distance(verts, faces, width, height, margin);
    let hard = hard_coverage_2d(verts, faces, width, height);
    let values = od
        .d
        .iter()
        .zip(&hard.values)
        .map(|(&d, &inside)| {
            if d.is_finite() {
                let sign = if inside > 0.0 { 1.0 } else { -1.0 };
                coverage(sign * d / tau).0
            } else {
                inside
            }
        })
        .collect();
    Ok(Silhouette {
        values,
        width,
        height,
        kind: SilhouetteKind::Soft,
    })
}

/// Backward pass of [`soft_coverage_2d`]: pulls a per-pixel cotangent
/// `dE/dS` back to the projected vertex positions.
pub fn soft_coverage_grad_2d(
    verts: &[Point2<f64>],
    faces: &[[usize; 3]],
    sil: &Silhouette,
    tau: f64,
    upstream: &[f64],
) -> Vec<Vector2<f64>> {
    assert_eq!(upstream.len(), sil.values.len());
    let margin = -TRUNC_ZERO * tau;
    let (width, height) = (sil.width, sil.height);
    let mut grads = vec![Vector2::zeros(); verts.len()];
    // Each pixel's gradient flows through the endpoints of its nearest
    // outline edge; the hard-coverage sign is locally constant.
    let od = outline_distance(verts, faces, width, height, margin);
    let hard = hard_coverage_2d(verts, faces, width, height);
    for y in 0..height {
        for x in 0..width {
            let idx = y * width + x;
            let u = upstream[idx];
            let d = od.d[idx];
            if u == 0.0 || !d.is_finite() || d <= 1e-12 {
                continue;
            }
            let sign = if hard.values[idx] > 0.0 { 1.0 } else { -1.0 };
            let (_, dc) = coverage(sign * d / tau);
            if dc == 0.0 {
                continue;
            }
            let (a_i, b_i) = od.edges[od.edge[idx]];
            let (a, b) = (verts[a_i].coords, verts[b_i].coords);
            let t = od.t[idx];
            let p = Vector2::new(x as f64, y as f64);
            let q = a + (b - a) * t;
            let n = (p - q) / d;
            let scale = u * dc * sign / tau;
            grads[a_i] += -n * ((1.0 - t) * scale);
            grads[b_i] += -n * (t * scale);
        }
    }
    grads
}

/// Differentiable soft silhouette of a projected mesh.
pub fn rasterize_soft(
    camera: &Camera,
    vertices: &[Point3<f64>],
    faces: &[[usize; 3]],
    tau: f64,
) -> Result<Silhouette> {
    let projected = camera.project(vertices)?;
    soft_coverage_2d(&projected, faces, camera.width, camera.height, tau)
}

/// Binary coverage at pixel centers with a top-left fill rule on edge ties.
pub fn rasterize_hard(
    camera: &Camera,
    vertices: &[Point3<f64>],
    faces: &[[usize; 3]],
) -> Result<Silhouette> {
    let projected = camera.project(vertices)?;
    Ok(hard_coverage_2d(
        &projected,
        faces,
        camera.width,
        camera.height,
    ))
}

pub fn hard_coverage_2d(
    verts: &[Point2<f64>],
    faces: &[[usize; 3]],
    width: usize,
    height: usize,
) -> Silhouette {
    let mut out = Silhouette::zeros(width, height, SilhouetteKind::Hard);
    for f in faces {
        let mut tri = [verts[f[0]].coords, verts[f[1]].coords, verts[f[2]].coords];
        if degenerate(&tri) {
            continue;
        }
        // Canonical orientation: positive doubled area.
        if cross2(tri[1] - tri[0], tri[2] - tri[0]) < 0.0 {
            tri.swap(1, 2);
        }
        let (x0, x1, y0, y1) = triangle_bbox(&tri);
        for y in pixel_range(y0, y1, 0.0, height) {
            for x in pixel_range(x0, x1, 0.0, width) {
                let p = Vector2::new(x as f64, y as f64);
                let mut inside = true;
                for e in 0..3 {
                    let a = tri[e];
                    let b = tri[(e + 1) % 3];
                    let w = cross2(b - a, p - a);
                    let edge = b - a;
                    // Top-left rule in y-down pixel coordinates.
                    let top_left = edge.y < 0.0 || (edge.y == 0.0 && edge.x > 0.0);
                    if w < 0.0 || (w == 0.0 && !top_left) {
                        inside = false;
                        break;
                    }
                }
                if inside {
                    out.values[y * width + x] = 1.0;
                }
            }
        }
    }
    out
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[derive(Debug, Clone)]
pub struct BoundaryField {
    pub magnitude: Vec<f64>,
    gx: Vec<f64>,
    gy: Vec<f64>,
    width: usize,
    height: usize,
}

/// Sobel gradient magnitude of a silhouette, zero-padded at the borders.
pub fn boundary(sil: &Silhouette) -> Vec<f64> {
    boundary_field(sil).magnitude
}

pub fn boundary_field(sil: &Silhouette) -> BoundaryField {
    let (w, h) = (sil.width, sil.height);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let sample = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            sil.values[y as usize * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let mut sx = 0.0;
            let mut sy = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    let v = sample(x as isize + dx as isize - 1, y as isize + dy as isize - 1);
                    sx += SOBEL_X[dy][dx] * v;
                    sy += SOBEL_Y[dy][dx] * v;
                }
            }
            gx[y * w + x] = sx;
            gy[y * w + x] = sy;
        }
    }
    let magnitude = gx
        .iter()
        .zip(&gy)
        .map(|(&a, &b)| (a * a + b * b).sqrt())
        .collect();
    BoundaryField {
        magnitude,
        gx,
        gy,
        width: w,
        height: h,
    }
}

impl BoundaryField {
    /// Pulls a cotangent `dE/dB` back to the silhouette values through the
    /// norm and the Sobel correlation.
    pub fn pullback(&self, upstream: &[f64]) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                let u = upstream[idx];
                if u == 0.0 || self.magnitude[idx] == 0.0 {
                    continue;
                }
                let cx = u * self.gx[idx] / self.magnitude[idx];
                let cy = u * self.gy[idx] / self.magnitude[idx];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let qx = x as isize + dx as isize - 1;
                        let qy = y as isize + dy as isize - 1;
                        if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                            continue;
                        }
                        out[qy as usize * w + qx as usize] +=
                            cx * SOBEL_X[dy][dx] + cy * SOBEL_Y[dy][dx];
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_face_list_is_all_zero() {
        let sil = soft_coverage_2d(&[], &[], 8, 8, 1.0).unwrap();
        assert!(sil.values.iter().all(|&v| v == 0.0));
        let hard = hard_coverage_2d(&[], &[], 8, 8);
        assert!(hard.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deep_interior_pixel_saturates() {
        let verts = vec![
            Point2::new(-100.0, -100.0),
            Point2::new(300.0, -100.0),
            Point2::new(100.0, 300.0),
        ];
        let sil = soft_coverage_2d(&verts, &[[0, 1, 2]], 200, 200, 1.0).unwrap();
        assert!(sil.at(100, 50) >= 1.0 - 1e-6);
    }

    #[test]
    fn pixel_on_edge_is_half() {
        // Edge passes exactly through pixel (10, 10).
        let verts = vec![
            Point2::new(0.0, 10.0),
            Point2::new(20.0, 10.0),
            Point2::new(10.0, 30.0),
        ];
        let sil = soft_coverage_2d(&verts, &[[0, 1, 2]], 32, 32, 1.0).unwrap();
        assert!((sil.at(10, 10) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hard_square_covers_sixteen_pixels() {
        let verts = vec![
            Point2::new(2.0, 2.0),
            Point2::new(6.0, 2.0),
            Point2::new(6.0, 6.0),
            Point2::new(2.0, 6.0),
        ];
        let sil = hard_coverage_2d(&verts, &[[0, 1, 2], [0, 2, 3]], 10, 10);
        assert_eq!(sil.foreground_count(), 16);
        for y in 2..6 {
            for x in 2..6 {
                assert_eq!(sil.at(x, y), 1.0, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn shared_diagonal_is_not_double_counted_or_missed() {
        // Cover the square with both diagonal splits; union must be identical.
        let verts = vec![
            Point2::new(2.0, 2.0),
            Point2::new(6.0, 2.0),
            Point2::new(6.0, 6.0),
            Point2::new(2.0, 6.0),
        ];
        let a = hard_coverage_2d(&verts, &[[0, 1, 2], [0, 2, 3]], 10, 10);
        let b = hard_coverage_2d(&verts, &[[0, 1, 3], [1, 2, 3]], 10, 10);
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn soft_thresholded_matches_hard_away_from_edges() {
        let verts = vec![
            Point2::new(5.3, 4.2),
            Point2::new(24.8, 6.1),
            Point2::new(14.9, 27.4),
        ];
        let faces = [[0usize, 1, 2]];
        let soft = soft_coverage_2d(&verts, &faces, 32, 32, 0.05).unwrap();
        let hard = hard_coverage_2d(&verts, &faces, 32, 32);
        for y in 0..32 {
            for x in 0..32 {
                let p = Vector2::new(x as f64, y as f64);
                let (d, _) =
                    signed_distance(p, [verts[0].coords, verts[1].coords, verts[2].coords]);
                if d.abs() < 0.3 {
                    continue;
                }
                let thresholded = if soft.at(x, y) > 0.5 { 1.0 } else { 0.0 };
                assert_eq!(thresholded, hard.at(x, y), "pixel ({x},{y}), d = {d}");
            }
        }
    }

    #[test]
    fn soft_to_hard_consistency_as_tau_shrinks() {
        let verts = vec![
            Point2::new(6.0, 5.0),
            Point2::new(25.0, 7.0),
            Point2::new(15.0, 26.0),
        ];
        let faces = [[0usize, 1, 2]];
        let hard = hard_coverage_2d(&verts, &faces, 32, 32);
        let mut prev = f64::INFINITY;
        for tau in [1.0, 0.1, 0.01] {
            let soft = soft_coverage_2d(&verts, &faces, 32, 32, tau).unwrap();
            let diff: f64 = soft
                .values
                .iter()
                .zip(&hard.values)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / (32.0 * 32.0);
            assert!(diff < prev, "mean |soft-hard| not decreasing at tau={tau}");
            prev = diff;
        }
    }

    #[test]
    fn coverage_never_exceeds_one_and_degenerate_is_skipped() {
        let verts = vec![
            Point2::new(4.0, 4.0),
            Point2::new(20.0, 4.0),
            Point2::new(12.0, 20.0),
            Point2::new(5.0, 5.0),
            Point2::new(15.0, 15.0),
            Point2::new(10.0, 10.0), // collinear with the two above
        ];
        let sil =
            soft_coverage_2d(&verts, &[[0, 1, 2], [0, 2, 1], [3, 4, 5]], 32, 32, 1.0).unwrap();
        assert!(sil.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let single = soft_coverage_2d(&verts, &[[0, 1, 2]], 32, 32, 1.0).unwrap();
        // Union coverage is monotone nondecreasing in per-triangle coverage.
        for (a, b) in sil.values.iter().zip(&single.values) {
            assert!(a >= b);
        }
    }

    #[test]
    fn boundary_of_constant_is_zero_and_inversion_invariant() {
        let mut sil = Silhouette::zeros(16, 16, SilhouetteKind::Hard);
        assert!(boundary(&sil).iter().all(|&v| v == 0.0));
        for y in 4..10 {
            for x in 5..11 {
                sil.values[y * 16 + x] = 1.0;
            }
        }
        let b = boundary(&sil);
        let inverted = Silhouette {
            values: sil.values.iter().map(|v| 1.0 - v).collect(),
            ..sil.clone()
        };
        let bi = boundary(&inverted);
        for (a, b2) in b.iter().zip(&bi) {
            // Inversion flips padded borders; compare interior only.
            let _ = (a, b2);
        }
        for y in 1..15 {
            for x in 1..15 {
                assert!((b[y * 16 + x] - bi[y * 16 + x]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vertical_step_has_sobel_magnitude_four() {
        let mut sil = Silhouette::zeros(16, 16, SilhouetteKind::Hard);
        for y in 0..16 {
            for x in 8..16 {
                sil.values[y * 16 + x] = 1.0;
            }
        }
        let b = boundary(&sil);
        assert!((b[5 * 16 + 7] - 4.0).abs() < 1e-12);
        assert!((b[5 * 16 + 8] - 4.0).abs() < 1e-12);
        assert_eq!(b[5 * 16 + 5], 0.0);
    }

    #[test]
    fn soft_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..4 {
            let verts: Vec<Point2<f64>> = (0..6)
                .map(|_| Point2::new(rng.gen_range(4.0..28.0), rng.gen_range(4.0..28.0)))
                .collect();
            let faces = [[0usize, 1, 2], [3, 4, 5]];
            let sil = soft_coverage_2d(&verts, &faces, 32, 32, 1.0).unwrap();
            let upstream: Vec<f64> = (0..32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let grads = soft_coverage_grad_2d(&verts, &faces, &sil, 1.0, &upstream);
            let energy = |vs: &[Point2<f64>]| -> f64 {
                let s = soft_coverage_2d(vs, &faces, 32, 32, 1.0).unwrap();
                s.values.iter().zip(&upstream).map(|(a, b)| a * b).sum()
            };
            let h = 1e-3;
            for vi in 0..verts.len() {
                for axis in 0..2 {
                    let mut hi = verts.clone();
                    let mut lo = verts.clone();
                    hi[vi][axis] += h;
                    lo[vi][axis] -= h;
                    let fd = (energy(&hi) - energy(&lo)) / (2.0 * h);
                    let an = grads[vi][axis];
                    let denom = an.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        ((an - fd) / denom).abs() < 1e-3,
                        "vertex {vi} axis {axis}: analytic {an} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn boundary_pullback_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut sil = Silhouette::zeros(12, 12, SilhouetteKind::Soft);
        for v in sil.values.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let upstream: Vec<f64> = (0..144).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let field = boundary_field(&sil);
        let grad = field.pullback(&upstream);
        let energy = |s: &Silhouette| -> f64 {
            boundary(s).iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..144 {
            let mut hi = sil.clone();
            let mut lo = sil.clone();
            hi.values[i] += h;
            lo.values[i] -= h;
            let fd = (energy(&hi) - energy(&lo)) / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                ((grad[i] - fd) / denom).abs() < 1e-3,
                "pixel {i}: {} vs {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn behind_camera_vertex_is_an_error() {
        let cam = Camera::new(50.0, 50.0, 16.0, 16.0, 32, 32).unwrap();
        let verts = vec![
            Point3::new(0.0, 0.0, 1.0),
            Point3::new(0.1, 0.0, 1.0),
            Point3::new(0.0, 0.1, -1.0),
        ];
        assert!(rasterize_soft(&cam, &verts, &[[0, 1, 2]], 1.0).is_err());
        assert!(rasterize_hard(&cam, &verts, &[[0, 1, 2]]).is_err());
    }
}
