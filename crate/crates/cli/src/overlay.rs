//! PNG slice overlays of a predicted mask on its CT.

use std::path::{Path, PathBuf};

use ctseg::volgrid::{LabelMask, Volume};
use image::{Rgb, RgbImage};

use crate::CliError;

const BONE: [f32; 3] = [230.0, 60.0, 40.0];
const NERVE: [f32; 3] = [40.0, 220.0, 80.0];
const ALPHA: f32 = 0.45;

/// One depth slice: CT in grey, scaled to the volume's intensity range,
/// with bone and nerve tinted.
pub fn render_slice(ct: &Volume, mask: &LabelMask, d: usize) -> RgbImage {
    let [_, hh, ww] = ct.shape();
    let (lo, hi) = ct
        .data()
        .iter()
        .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(f32::EPSILON);
    let mut img = RgbImage::new(ww as u32, hh as u32);
    for h in 0..hh {
        for w in 0..ww {
            let i = (d * hh + h) * ww + w;
            let g = (ct.data()[i] - lo) / span * 255.0;
            let tint = match mask.data()[i] {
                1 => Some(BONE),
                2 => Some(NERVE),
                _ => None,
            };
            let px = match tint {
                Some(c) => c.map(|c| (ALPHA * c + (1.0 - ALPHA) * g) as u8),
                None => [g as u8; 3],
            };
            img.put_pixel(w as u32, h as u32, Rgb(px));
        }
    }
    img
}

/// Writes `slice_{d:04}.png` for every `every`-th depth slice.
pub fn write_overlays(ct: &Volume, mask: &LabelMask, dir: &Path, every: usize) -> Result<Vec<PathBuf>, CliError> {
    if ct.shape() != mask.shape() {
        return Err(CliError::Data("overlay CT and mask shapes differ".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut written = Vec::new();
    for d in (0..ct.shape()[0]).step_by(every.max(1)) {
        let path = dir.join(format!("slice_{d:04}.png"));
        render_slice(ct, mask, d)
            .save(&path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        written.push(path);
    }
    Ok(written)
}
