//! Binary PGM (P5, maxval 255) mask I/O.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{Silhouette, SilhouetteKind};

pub fn write_pgm<W: Write>(values: &[f64], width: usize, height: usize, mut w: W) -> std::io::Result<()> {
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)
}

pub fn write_silhouette(sil: &Silhouette, path: &Path) -> Result<()> {
    let tmp = path.with_extension("pgm.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    write_pgm(&sil.values, sil.width, sil.height, &mut f)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Writes an arbitrary nonnegative grid scaled so its maximum maps to 255.
pub fn write_scaled_grid(values: &[f64], width: usize, height: usize, path: &Path) -> Result<()> {
    let max = values.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let scaled: Vec<f64> = values.iter().map(|&v| v / max).collect();
    let tmp = path.with_extension("pgm.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    write_pgm(&scaled, width, height, &mut f).map_err(|e| Error::io(path.display().to_string(), e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Loads a P5 PGM as a hard silhouette; values at or above 128 are
/// foreground.
pub fn read_hard_silhouette(path: &Path) -> Result<Silhouette> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_pgm(&data).map_err(|msg| Error::invalid(format!("{}: {msg}", path.display())))
}

fn parse_pgm(data: &[u8]) -> std::result::Result<Silhouette, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        // Skip whitespace and comments.
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a P5 PGM".into());
    }
    let width: usize = token()?.parse().map_err(|_| "bad width")?;
    let height: usize = token()?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token()?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    pos += 1; // single whitespace after maxval
    if data.len() < pos + width * height {
        return Err("truncated pixel data".into());
    }
    let values = data[pos..pos + width * height]
        .iter()
        .map(|&b| if b >= 128 { 1.0 } else { 0.0 })
        .collect();
    Ok(Silhouette {
        values,
        width,
        height,
        kind: SilhouetteKind::Hard,
    })
}
