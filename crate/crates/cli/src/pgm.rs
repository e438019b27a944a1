//! Binary PGM (P5) writer for attention-map export.

use std::path::Path;

use panrec_core::error::Result;

/// Write one grayscale image; `pixels` are probabilities scaled by 255 and
/// rounded, so a row summing to 1 yields a pixel sum near 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), width * height);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|&v| {
        let scaled = (v * 255.0).round();
        scaled.clamp(0.0, 255.0) as u8
    }));
    std::fs::write(path, bytes)?;
    Ok(())
}
