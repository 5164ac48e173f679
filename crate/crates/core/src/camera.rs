//! Pinhole camera model and perspective projection.
//!
//! Integer pixel coordinates address pixel centers. Projected points may
//! fall outside the image rectangle; only points with positive depth are
//! projectable.

use nalgebra::{Matrix2x3, Point2, Point3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive (fx = {fx}, fy = {fy})"
            )));
        }
        if width < 1 || height < 1 {
            return Err(Error::invalid(format!(
                "image size must be at least 1x1 ({width}x{height})"
            )));
        }
        Ok(Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Fixed-camera fallback when no calibration is available: focal length
    /// `max(width, height)`, principal point at the image center.
    pub fn default_for_size(width: usize, height: usize) -> Self {
        let f = width.max(height) as f64;
        Camera {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn project_point(&self, p: &Point3<f64>, index: usize) -> Result<Point2<f64>> {
        if !(p.z > 0.0) {
            return Err(Error::BehindCamera { index, z: p.z });
        }
        Ok(Point2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    pub fn project(&self, points: &[Point3<f64>]) -> Result<Vec<Point2<f64>>> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| self.project_point(p, i))
            .collect()
    }

    /// Jacobian of the projected pixel coordinates with respect to the 3D
    /// point in camera frame.
    pub fn projection_jacobian(&self, p: &Point3<f64>) -> Matrix2x3<f64> {
        let inv_z = 1.0 / p.z;
        Matrix2x3::new(
            self.fx * inv_z,
            0.0,
            -self.fx * p.x * inv_z * inv_z,
            0.0,
            self.fy * inv_z,
            -self.fy * p.y * inv_z * inv_z,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> Camera {
        Camera::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let p = cam().project_point(&Point3::new(0.0, 0.0, 1.0), 0).unwrap();
        assert_eq!(p, Point2::new(50.0, 50.0));
    }

    #[test]
    fn pinhole_formula() {
        let c = cam();
        let p = c.project_point(&Point3::new(0.5, 0.0, 1.0), 0).unwrap();
        assert_eq!(p, Point2::new(100.0, 50.0));
        let q = c.project_point(&Point3::new(1.0, 1.0, 2.0), 0).unwrap();
        assert_eq!(q, Point2::new(100.0, 100.0));
    }

    #[test]
    fn behind_camera_reports_index() {
        let pts = vec![Point3::new(0.0, 0.0, 1.0), Point3::new(0.0, 0.0, -1.0)];
        match cam().project(&pts) {
            Err(Error::BehindCamera { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected behind-camera error, got {other:?}"),
        }
    }

    #[test]
    fn scale_invariance() {
        let c = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = Point3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.5..5.0),
            );
            let lambda = rng.gen_range(0.1..10.0);
            let a = c.project_point(&p, 0).unwrap();
            let b = c.project_point(&(p * lambda), 0).unwrap();
            assert_relative_eq!(a.x, b.x, epsilon = 1e-9);
            assert_relative_eq!(a.y, b.y, epsilon = 1e-9);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let c = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let p = Point3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.5..5.0),
            );
            let jac = c.projection_jacobian(&p);
            let h = 1e-6;
            for axis in 0..3 {
                let mut hi = p;
                let mut lo = p;
                hi[axis] += h;
                lo[axis] -= h;
                let fhi = c.project_point(&hi, 0).unwrap();
                let flo = c.project_point(&lo, 0).unwrap();
                for row in 0..2 {
                    let fd = (fhi[row] - flo[row]) / (2.0 * h);
                    let an = jac[(row, axis)];
                    let denom = an.abs().max(fd.abs()).max(1.0);
                    assert!(
                        ((an - fd) / denom).abs() < 1e-6,
                        "jacobian mismatch at ({row},{axis}): {an} vs {fd}"
                    );
                }
            }
        }
    }
}
