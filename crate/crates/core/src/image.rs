//! Binary greyscale PGM output for image grids.

use std::path::Path;

use crate::error::{Error, Result};

/// Lays out `tiles` (each `width * height` values in `[0, 1]`) left to right,
/// wrapping after `columns` tiles, and encodes the grid as binary PGM.
pub fn pgm_grid(tiles: &[&[f64]], width: usize, height: usize, columns: usize) -> Result<Vec<u8>> {
    if tiles.is_empty() || width == 0 || height == 0 || columns == 0 {
        return Err(Error::InvalidInput(
            "an image grid needs tiles and positive dimensions".into(),
        ));
    }
    if let Some(t) = tiles.iter().find(|t| t.len() != width * height) {
        return Err(Error::InvalidInput(format!(
            "tile has {} values, expected {}",
            t.len(),
            width * height
        )));
    }
    let cols = columns.min(tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let (gw, gh) = (cols * width, rows * height);
    let mut out = format!("P5 {gw} {gh} 255\n").into_bytes();
    let header = out.len();
    out.resize(header + gw * gh, 0);
    for (i, tile) in tiles.iter().enumerate() {
        let (ox, oy) = ((i % cols) * width, (i / cols) * height);
        for y in 0..height {
            for x in 0..width {
                let v = tile[y * width + x];
                out[header + (oy + y) * gw + ox + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Ok(out)
}

pub fn write_pgm_grid(
    path: &Path,
    tiles: &[&[f64]],
    width: usize,
    height: usize,
    columns: usize,
) -> Result<()> {
    std::fs::write(path, pgm_grid(tiles, width, height, columns)?)?;
    Ok(())
}
