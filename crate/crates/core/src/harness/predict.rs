//! Single-image inference writing dataset-format outputs.

use std::path::{Path, PathBuf};

use crate::data::{read_rgb, write_depth_png, write_mask_png, DEFAULT_DEPTH_SCALE};
use crate::error::{Error, Result};
use crate::harness::eval::class_softmax;
use crate::metrics::argmax_classes;
use crate::model::Model;
use candle_core::DType;

#[derive(Debug, Clone)]
pub struct PredictOutput {
    pub size: usize,
    /// `[H, W]` normalized depth as predicted (before quantization).
    pub depth: Vec<f32>,
    /// `[H, W]` argmax class ids.
    pub seg: Vec<u8>,
    pub depth_path: PathBuf,
    pub mask_path: PathBuf,
    pub vis_path: PathBuf,
}

const RAMP: [[f32; 3]; 5] = [
    [0.05, 0.03, 0.53],
    [0.49, 0.01, 0.66],
    [0.80, 0.28, 0.47],
    [0.97, 0.59, 0.25],
    [0.94, 0.98, 0.13],
];

/// Maps `t` in [0, 1] onto a perceptual blue-to-yellow ramp.
pub fn colormap(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (RAMP.len() - 1) as f32;
    let i = (t.floor() as usize).min(RAMP.len() - 2);
    let f = t - i as f32;
    [0, 1, 2].map(|c| ((RAMP[i][c] * (1.0 - f) + RAMP[i + 1][c] * f) * 255.0).round() as u8)
}

fn write_visualization(
    path: &Path,
    rgb: &[f32],
    depth: &[f32],
    seg: &[u8],
    size: usize,
) -> Result<()> {
    let n = size * size;
    let (lo, hi) = depth
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &d| {
            (a.min(d), b.max(d))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = image::RgbImage::from_fn(3 * size as u32, size as u32, |x, y| {
        let (panel, px) = ((x as usize) / size, (x as usize) % size);
        let p = y as usize * size + px;
        let base = [0, 1, 2].map(|k| (rgb[k * n + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        image::Rgb(match panel {
            0 => base,
            1 => colormap((depth[p] - lo) / span),
            _ if seg[p] == 0 => base.map(|v| v / 2),
            _ => {
                let tint = colormap(seg[p] as f32 / 4.0 + 0.5);
                [0, 1, 2].map(|k| ((base[k] as u16 + tint[k] as u16) / 2) as u8)
            }
        })
    });
    img.save(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

/// Predicts depth and segmentation for one image file and writes
/// `<stem>_depth.png` (16-bit), `<stem>_mask.png` (paletted) and
/// `<stem>_vis.png` into `out_dir`.
pub fn predict_file(model: &Model, image: &Path, out_dir: &Path) -> Result<PredictOutput> {
    let size = model.config().image_size();
    let k = model.config().decoder.num_classes;
    let (rgb, _) = read_rgb(image, Some(size))?;
    let batch = model.image_batch(&[&rgb])?;
    let pred = model.predict(&batch)?;
    let depth: Vec<f32> = pred.depth.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let logits: Vec<f64> = pred
        .seg_logits
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1()?;
    let seg = argmax_classes(&class_softmax(&logits, k), k, size * size);

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let depth_path = out_dir.join(format!("{stem}_depth.png"));
    let mask_path = out_dir.join(format!("{stem}_mask.png"));
    let vis_path = out_dir.join(format!("{stem}_vis.png"));
    write_depth_png(&depth_path, &depth, size, DEFAULT_DEPTH_SCALE)?;
    write_mask_png(&mask_path, &seg, size, k)?;
    write_visualization(&vis_path, &rgb, &depth, &seg, size)?;
    Ok(PredictOutput {
        size,
        depth,
        seg,
        depth_path,
        mask_path,
        vis_path,
    })
}
