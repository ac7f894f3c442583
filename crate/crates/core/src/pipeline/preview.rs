use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};

use super::PipelineError;
use crate::volume::Volume;

/// Label colours for CSF, GM and WM; background is black.
pub const PALETTE: [[u8; 3]; 3] = [[40, 110, 230], [230, 150, 40], [240, 240, 240]];

fn save<P: image::PixelWithColorType<Subpixel = u8>>(img: &image::ImageBuffer<P, Vec<u8>>, path: PathBuf) -> Result<PathBuf, PipelineError>
where
    P: image::Pixel<Subpixel = u8>,
{
    img.save(&path).map_err(|source| PipelineError::Image { path: path.clone(), source })?;
    Ok(path)
}

/// Writes `t1.png`, `t2.png` and `labels.png` of the middle axial slice into
/// `dir`. Intensities are windowed to the masked range of the slice.
pub fn emit_slice_previews(volume: &Volume, labels: &[u8], dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let [d, h, w] = volume.dims();
    if labels.len() != volume.len() {
        return Err(PipelineError::ShapeMismatch {
            what: "label map",
            expected: vec![d, h, w],
            got: vec![labels.len()],
        });
    }
    std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io { path: dir.to_path_buf(), source })?;
    let z = d / 2;
    let mask = volume.mask();
    let mut written = Vec::new();
    for (c, name) in ["t1.png", "t2.png"].into_iter().enumerate() {
        let data = volume.channel(c).data();
        let inside = (0..h * w).map(|p| z * h * w + p).filter(|&i| mask[i]);
        let (lo, hi) = inside.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| (lo.min(data[i]), hi.max(data[i])));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            let i = volume.index(z, y as usize, x as usize);
            let v = if mask[i] { 1.0 + 254.0 * (data[i] - lo) / span } else { 0.0 };
            Luma([v.round().clamp(0.0, 255.0) as u8])
        });
        written.push(save(&img, dir.join(name))?);
    }
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = volume.index(z, y as usize, x as usize);
        match PALETTE.get(labels[i] as usize) {
            Some(&rgb) if mask[i] => Rgb(rgb),
            _ => Rgb([0, 0, 0]),
        }
    });
    written.push(save(&img, dir.join("labels.png"))?);
    Ok(written)
}
