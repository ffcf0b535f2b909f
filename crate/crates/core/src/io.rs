//! Image and CSV artifact writers.

use std::io::Write;
use std::path::Path;

use crate::scene::ImageRgb;

/// Binary PGM (P5), 8-bit, values clamped to [0, 1].
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> std::io::Result<()> {
    assert_eq!(values.len(), width * height);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)
}

/// Binary PPM (P6), 8-bit RGB.
pub fn write_ppm(path: &Path, img: &ImageRgb) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)?;
    let mut bytes = Vec::with_capacity(img.pixels.len() * 3);
    for p in &img.pixels {
        for c in 0..3 {
            bytes.push((p[c].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    f.write_all(&bytes)
}

/// Depth map normalized by its finite maximum, misses black.
pub fn depth_to_gray(depths: &[f64]) -> Vec<f64> {
    let max = depths.iter().cloned().filter(|d| d.is_finite()).fold(0.0f64, f64::max);
    if max <= 0.0 {
        return vec![0.0; depths.len()];
    }
    depths
        .iter()
        .map(|&d| if d.is_finite() { (d / max).clamp(0.0, 1.0) } else { 0.0 })
        .collect()
}

/// Map a BEV flow field to an RGB image: x-velocity in red, y-velocity in
/// green, both centered at 0.5 and scaled by `max_speed`.
pub fn flow_to_rgb(flow_xy: &[(f64, f64)], width: usize, height: usize, max_speed: f64) -> ImageRgb {
    assert_eq!(flow_xy.len(), width * height);
    let s = if max_speed > 0.0 { 0.5 / max_speed } else { 0.0 };
    let pixels = flow_xy
        .iter()
        .map(|&(fx, fy)| {
            [
                (0.5 + fx * s).clamp(0.0, 1.0),
                (0.5 + fy * s).clamp(0.0, 1.0),
                0.5,
            ]
        })
        .collect();
    ImageRgb { width, height, pixels }
}

/// Write CSV rows; every cell is formatted with `Display`, which for f64 is
/// the shortest round-trip representation (byte-stable for equal inputs).
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", header.join(","))?;
    for row in rows {
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_csv(path: &Path) -> std::io::Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .map(|h| h.split(',').map(str::to_string).collect())
        .unwrap_or_default();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_and_ppm_headers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pgm");
        write_pgm(&p, 2, 2, &[0.0, 0.5, 1.0, 2.0]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 128, 255, 255]);

        let img = ImageRgb { width: 1, height: 1, pixels: vec![[1.0, 0.0, 0.5]] };
        let pp = dir.path().join("c.ppm");
        write_ppm(&pp, &img).unwrap();
        let bytes = std::fs::read(&pp).unwrap();
        assert!(bytes.starts_with(b"P6\n1 1\n255\n"));
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let rows = vec![vec!["1".to_string(), "0.25".to_string()]];
        write_csv(&p, &["a", "b"], &rows).unwrap();
        let (header, back) = read_csv(&p).unwrap();
        assert_eq!(header, vec!["a", "b"]);
        assert_eq!(back, rows);
    }
}
