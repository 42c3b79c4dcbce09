//! Binary PPM (P6) output of per-patch colours.

use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Encodes a `grid×grid` patch colour map (`N×3`, values in `[0, 1]`) as a
/// P6 image, each patch drawn as a `patch_px×patch_px` square.
pub fn encode_patch_ppm(rgb: &Tensor, grid: usize, patch_px: usize) -> Result<Vec<u8>> {
    let (n, c) = rgb.dims2()?;
    if c != 3 || n != grid * grid {
        return Err(dim_err(format!(
            "patch colours must be {}×3 for a {grid}×{grid} grid, got {n}×{c}",
            grid * grid
        )));
    }
    let side = grid * patch_px;
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    out.reserve(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let p = (y / patch_px) * grid + x / patch_px;
            for v in rgb.row(p) {
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn write_patch_ppm(path: &Path, rgb: &Tensor, grid: usize, patch_px: usize) -> Result<()> {
    let bytes = encode_patch_ppm(rgb, grid, patch_px)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
