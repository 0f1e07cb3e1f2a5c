//! Binary portable graymap (P5) export.

use std::path::Path;

use anyhow::{ensure, Context, Result};

/// Maps `[lo, hi]` linearly onto 0..=255, clamping values outside the range.
pub fn to_gray(values: &[f32], lo: f32, hi: f32) -> Vec<u8> {
    let (lo, hi) = (lo as f64, hi as f64);
    values
        .iter()
        .map(|&v| ((v as f64 - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Writes a `width x height` row-major image as an 8-bit P5 file.
pub fn write_pgm(path: &Path, values: &[f32], width: usize, height: usize, lo: f32, hi: f32) -> Result<()> {
    ensure!(
        values.len() == width * height,
        "image has {} values, expected {width}x{height}",
        values.len()
    );
    ensure!(hi > lo, "empty gray range [{lo}, {hi}]");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(to_gray(values, lo, hi));
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_mapping() {
        assert_eq!(
            to_gray(&[-0.3, 0.0, 0.3, 1.0, -1.0], -0.3, 0.3),
            vec![0, 128, 255, 255, 0]
        );
        assert_eq!(to_gray(&[0.0, 0.5, 1.0], 0.0, 1.0), vec![0, 128, 255]);
    }

    #[test]
    fn header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        write_pgm(&path, &[0.0, 1.0, 0.5, 0.25, 0.0, 1.0], 3, 2, 0.0, 1.0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 255, 128, 64, 0, 255]);
        assert!(write_pgm(&path, &[0.0], 3, 2, 0.0, 1.0).is_err());
    }
}
