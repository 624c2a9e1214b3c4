//! Binary 8-bit PGM (P5) writer for BEV dumps.
//!
//! Image row `r` is BEV row `r` (row 0 holds the smallest `y`), image
//! column `c` is BEV column `c` (growing `x`). Values in `[0, 1]` map to
//! `floor(v * 255 + 0.5)`, that is, rounding half up; inputs are clamped
//! to `[0, 1]` first and non-finite values become 0.

use std::path::Path;

use anyhow::{ensure, Context, Result};

pub fn to_byte(v: f64) -> u8 {
    if !v.is_finite() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode(values: &[f64], rows: usize, cols: usize) -> Result<Vec<u8>> {
    ensure!(values.len() == rows * cols, "PGM needs {} values, got {}", rows * cols, values.len());
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn write(path: &Path, values: &[f64], rows: usize, cols: usize) -> Result<()> {
    std::fs::write(path, encode(values, rows, cols)?).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(to_byte(0.0), 0);
        assert_eq!(to_byte(1.0), 255);
        // 0.5 * 255 = 127.5 rounds up.
        assert_eq!(to_byte(0.5), 128);
        assert_eq!(to_byte(0.25), 64);
        assert_eq!(to_byte(-3.0), 0);
        assert_eq!(to_byte(f64::NAN), 0);
        let bytes = encode(&[0.0, 1.0], 1, 2).unwrap();
        assert_eq!(bytes, b"P5\n2 1\n255\n\x00\xff");
    }
}
