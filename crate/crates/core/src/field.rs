//! Exact Euclidean distance transforms and the asymmetric distance field.
//!
//! The transform is the two-pass squared-distance lower-envelope method
//! (rows then columns), so equality with a brute-force nearest-foreground
//! search is exact, not approximate. Distances are measured between pixel
//! centers.

use crate::error::{Error, Result};
use crate::raster::Silhouette;

/// Precomputed field `F = lambda_o D(S) (1-S) + lambda_i D(S_inv) S`.
#[derive(Debug, Clone)]
pub struct AdfField {
    pub values: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub lambda_o: f64,
    pub lambda_i: f64,
    /// Identifier of the silhouette the field was built from.
    pub source: String,
}

/// 1D squared-distance lower envelope (Felzenszwalb & Huttenlocher).
fn dt1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        loop {
            let p = v[k];
            if f[p] == f64::INFINITY {
                // Previous parabola is absent; replace it.
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    // All parabolas may be absent (all +inf row).
    if f[v[0]] == f64::INFINITY {
        for o in out.iter_mut() {
            *o = f64::INFINITY;
        }
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *o = dq * dq + f[p];
    }
}

/// Exact Euclidean distance (in pixels) from every pixel center to the
/// nearest foreground pixel center of a binary mask.
pub fn distance_transform(mask: &Silhouette) -> Result<Vec<f64>> {
    if !mask.is_binary() {
        return Err(Error::invalid("distance transform requires a binary mask"));
    }
    if mask.values.iter().all(|&v| v == 0.0) {
        return Err(Error::EmptyMask);
    }
    let (w, h) = (mask.width, mask.height);
    let mut sq = vec![0.0f64; w * h];
    // Row pass.
    let mut row = vec![0.0f64; w];
    let mut rowout = vec![0.0f64; w];
    for y in 0..h {
        for x in 0..w {
            row[x] = if mask.values[y * w + x] == 1.0 {
                0.0
            } else {
                f64::INFINITY
            };
        }
        dt1d(&row, &mut rowout);
        sq[y * w..(y + 1) * w].copy_from_slice(&rowout);
    }
    // Column pass.
    let mut col = vec![0.0f64; h];
    let mut colout = vec![0.0f64; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = sq[y * w + x];
        }
        dt1d(&col, &mut colout);
        for y in 0..h {
            sq[y * w + x] = colout[y];
        }
    }
    Ok(sq.iter().map(|&d| d.sqrt()).collect())
}

/// The asymmetric distance field of a binary silhouette: the outer term
/// penalizes boundary mass outside `S`, the inner term boundary mass
/// strictly inside it.
pub fn asymmetric_field(mask: &Silhouette, lambda_o: f64, lambda_i: f64) -> Result<AdfField> {
    if lambda_o < 0.0 || lambda_i < 0.0 {
        return Err(Error::invalid("field scaling factors must be nonnegative"));
    }
    let fg = mask.values.iter().filter(|&&v| v == 1.0).count();
    if fg == 0 {
        return Err(Error::DegenerateMask("mask has no foreground".into()));
    }
    if fg == mask.values.len() {
        return Err(Error::DegenerateMask("mask has no background".into()));
    }
    let d_fg = distance_transform(mask)?;
    let inverted = Silhouette {
        values: mask.values.iter().map(|v| 1.0 - v).collect(),
        ..mask.clone()
    };
    let d_bg = distance_transform(&inverted)?;
    let values = mask
        .values
        .iter()
        .zip(d_fg.iter().zip(&d_bg))
        .map(|(&s, (&df, &db))| lambda_o * df * (1.0 - s) + lambda_i * db * s)
        .collect();
    Ok(AdfField {
        values,
        width: mask.width,
        height: mask.height,
        lambda_o,
        lambda_i,
        source: String::new(),
    })
}

/// `sum_p B(p) F(p)`; the gradient with respect to the boundary is simply
/// the (constant) field.
pub fn adf_energy(boundary: &[f64], field: &AdfField) -> Result<(f64, Vec<f64>)> {
    if boundary.len() != field.values.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} pixels", field.values.len()),
            got: format!("{}", boundary.len()),
        });
    }
    let energy = boundary
        .iter()
        .zip(&field.values)
        .map(|(b, f)| b * f)
        .sum();
    Ok((energy, field.values.clone()))
}
