//! Dataset directory layout:
//!
//! ```text
//! root/rgb/<id>.png    8-bit RGB
//! root/depth/<id>.png  16-bit grayscale, value = round(depth * depth_scale)
//! root/mask/<id>.png   8-bit paletted, palette index = class id
//! root/meta.json       {"depth_scale", "num_classes", "image_size"}
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::error::{Error, Result};

pub const DEFAULT_DEPTH_SCALE: f64 = 65535.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub depth_scale: f64,
    pub num_classes: usize,
    pub image_size: usize,
}

impl DatasetMeta {
    pub fn new(image_size: usize, num_classes: usize) -> Self {
        Self {
            depth_scale: DEFAULT_DEPTH_SCALE,
            num_classes,
            image_size,
        }
    }
}

fn sample_err(id: &str, msg: impl std::fmt::Display) -> Error {
    Error::Sample {
        id: id.to_string(),
        msg: msg.to_string(),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn write_meta(root: &Path, meta: &DatasetMeta) -> Result<()> {
    create_dir(root)?;
    let path = root.join("meta.json");
    let text = serde_json::to_string_pretty(meta)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_meta(root: &Path) -> Result<DatasetMeta> {
    let path = root.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// 16-bit grayscale PNG, `round(depth * scale)` clamped to the u16 range.
pub fn write_depth_png(path: &Path, depth: &[f32], size: usize, scale: f64) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), size as u32, size as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut bytes = Vec::with_capacity(depth.len() * 2);
    for &d in depth {
        let v = (d as f64 * scale).round().clamp(0.0, u16::MAX as f64) as u16;
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    w.write_image_data(&bytes).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Input(format!("{}: {e}", path.display()))
}

fn mask_palette(num_classes: usize) -> Vec<u8> {
    let mut pal = Vec::with_capacity(num_classes * 3);
    for c in 0..num_classes {
        let rgb = match c {
            0 => [0, 0, 0],
            1 => [255, 255, 255],
            _ => {
                let h = (c as u32).wrapping_mul(2_654_435_761);
                [(h >> 16) as u8, (h >> 8) as u8, h as u8]
            }
        };
        pal.extend_from_slice(&rgb);
    }
    pal
}

/// 8-bit paletted PNG whose palette index is the class id.
pub fn write_mask_png(path: &Path, seg: &[u8], size: usize, num_classes: usize) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), size as u32, size as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(mask_palette(num_classes.clamp(2, 256)));
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    w.write_image_data(seg).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))
}

/// Channel-major `[3, H, W]` floats in [0, 1] to an 8-bit RGB PNG.
pub fn write_rgb_png(path: &Path, rgb: &[f32], size: usize) -> Result<()> {
    let n = size * size;
    let img = image::RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let p = y as usize * size + x as usize;
        image::Rgb([0, 1, 2].map(|k| (rgb[k * n + p].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path).map_err(|e| png_err(path, e))
}

fn read_raw_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Returns raw 16-bit values and the (square) size.
pub fn read_depth_png(path: &Path) -> Result<(Vec<u16>, usize, usize)> {
    let (info, buf) = read_raw_png(path)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(png_err(path, "depth must be 16-bit grayscale"));
    }
    let vals = buf
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((vals, info.width as usize, info.height as usize))
}

/// Class ids from an 8-bit paletted (or 8-bit grayscale) PNG.
pub fn read_mask_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let (info, buf) = read_raw_png(path)?;
    let ok = matches!(
        info.color_type,
        png::ColorType::Indexed | png::ColorType::Grayscale
    ) && info.bit_depth == png::BitDepth::Eight;
    if !ok {
        return Err(png_err(path, "mask must be 8-bit paletted or grayscale"));
    }
    Ok((buf, info.width as usize, info.height as usize))
}

/// Any image the `image` crate decodes, as channel-major RGB floats, resized
/// to `size` x `size` if needed.
pub fn read_rgb(path: &Path, size: Option<usize>) -> Result<(Vec<f32>, usize)> {
    let img = image::open(path).map_err(|e| png_err(path, e))?.to_rgb8();
    let img = match size {
        Some(s) if img.width() as usize != s || img.height() as usize != s => {
            image::imageops::resize(&img, s as u32, s as u32, FilterType::Triangle)
        }
        _ => img,
    };
    if img.width() != img.height() {
        return Err(png_err(path, "image must be square (or resized)"));
    }
    let s = img.width() as usize;
    let n = s * s;
    let mut rgb = vec![0f32; 3 * n];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * s + x as usize;
        for k in 0..3 {
            rgb[k * n + p] = px.0[k] as f32 / 255.0;
        }
    }
    Ok((rgb, s))
}

fn triplet_paths(root: &Path, id: &str) -> [PathBuf; 3] {
    let f = format!("{id}.png");
    [
        root.join("rgb").join(&f),
        root.join("depth").join(&f),
        root.join("mask").join(&f),
    ]
}

pub fn save_sample(root: &Path, sample: &ImageSample, meta: &DatasetMeta) -> Result<()> {
    for sub in ["rgb", "depth", "mask"] {
        create_dir(&root.join(sub))?;
    }
    let [rgb, depth, mask] = triplet_paths(root, &sample.id);
    write_rgb_png(&rgb, &sample.rgb, sample.size)?;
    write_depth_png(&depth, &sample.depth, sample.size, meta.depth_scale)?;
    write_mask_png(&mask, &sample.seg, sample.size, meta.num_classes)
}

pub fn save_dataset(root: &Path, samples: &[ImageSample], meta: &DatasetMeta) -> Result<()> {
    write_meta(root, meta)?;
    for s in samples {
        save_sample(root, s, meta)?;
    }
    Ok(())
}

fn nearest_resize<T: Copy>(src: &[T], from: usize, to: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(to * to);
    for y in 0..to {
        let sy = ((y as f64 + 0.5) * from as f64 / to as f64) as usize;
        for x in 0..to {
            let sx = ((x as f64 + 0.5) * from as f64 / to as f64) as usize;
            out.push(src[sy.min(from - 1) * from + sx.min(from - 1)]);
        }
    }
    out
}

/// Resamples a sample to `size`: RGB bilinear, depth and mask nearest.
pub fn resize_sample(sample: &ImageSample, size: usize) -> ImageSample {
    if sample.size == size {
        return sample.clone();
    }
    let n = sample.pixels();
    let mut rgb = Vec::with_capacity(3 * size * size);
    for k in 0..3 {
        let plane = &sample.rgb[k * n..(k + 1) * n];
        let img = image::ImageBuffer::<image::Luma<f32>, Vec<f32>>::from_raw(
            sample.size as u32,
            sample.size as u32,
            plane.to_vec(),
        )
        .expect("plane matches size");
        let r = image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle);
        rgb.extend(r.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    ImageSample {
        id: sample.id.clone(),
        size,
        rgb,
        depth: nearest_resize(&sample.depth, sample.size, size),
        seg: nearest_resize(&sample.seg, sample.size, size),
    }
}

/// Loads every triplet under `root`, sorted by id, optionally resampled to
/// `size`. An empty or absent `rgb/` directory yields an empty dataset.
pub fn load_dataset(root: &Path, size: Option<usize>) -> Result<Vec<ImageSample>> {
    let rgb_dir = root.join("rgb");
    let mut ids: Vec<String> = match fs::read_dir(&rgb_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(&rgb_dir, e)),
    };
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    ids.sort();
    let meta = read_meta(root)?;
    ids.iter()
        .map(|id| {
            let [rgb_p, depth_p, mask_p] = triplet_paths(root, id);
            for p in [&depth_p, &mask_p] {
                if !p.exists() {
                    return Err(sample_err(id, format!("missing {}", p.display())));
                }
            }
            let (rgb, s) = read_rgb(&rgb_p, None).map_err(|e| sample_err(id, e))?;
            let (raw, dw, dh) = read_depth_png(&depth_p).map_err(|e| sample_err(id, e))?;
            let (seg, mw, mh) = read_mask_png(&mask_p).map_err(|e| sample_err(id, e))?;
            if (dw, dh) != (s, s) || (mw, mh) != (s, s) {
                return Err(sample_err(
                    id,
                    format!("size mismatch: rgb {s}x{s}, depth {dw}x{dh}, mask {mw}x{mh}"),
                ));
            }
            let depth = raw
                .into_iter()
                .map(|v| (v as f64 / meta.depth_scale) as f32)
                .collect();
            let sample = ImageSample {
                id: id.clone(),
                size: s,
                rgb,
                depth,
                seg,
            };
            sample.check(meta.num_classes)?;
            Ok(match size {
                Some(t) => resize_sample(&sample, t),
                None => sample,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneConfig};

    #[test]
    fn empty_directory_is_empty_dataset() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path(), None)?.is_empty());
        Ok(())
    }

    #[test]
    fn round_trip_within_quantization() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig::with_size(32);
        let s = generate_scene(3, &cfg)?;
        let meta = DatasetMeta::new(32, 2);
        save_dataset(dir.path(), std::slice::from_ref(&s), &meta)?;
        let loaded = load_dataset(dir.path(), None)?;
        assert_eq!(loaded.len(), 1);
        let l = &loaded[0];
        assert_eq!(l.id, s.id);
        assert_eq!(l.seg, s.seg);
        for (a, b) in l.depth.iter().zip(&s.depth) {
            assert!(((a - b).abs() as f64) <= 1.0 / 65535.0);
        }
        for (a, b) in l.rgb.iter().zip(&s.rgb) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        Ok(())
    }

    #[test]
    fn depth_png_is_bit_exact() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let depth = [0.0f32, 0.5, 1.0, 0.25];
        write_depth_png(&p, &depth, 2, DEFAULT_DEPTH_SCALE)?;
        let (raw, w, h) = read_depth_png(&p)?;
        assert_eq!((w, h), (2, 2));
        let want: Vec<u16> = depth
            .iter()
            .map(|&d| (d as f64 * DEFAULT_DEPTH_SCALE).round() as u16)
            .collect();
        assert_eq!(raw, want);
        Ok(())
    }

    #[test]
    fn missing_member_names_the_sample() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scene(4, &SceneConfig::with_size(32))?;
        save_dataset(
            dir.path(),
            std::slice::from_ref(&s),
            &DatasetMeta::new(32, 2),
        )?;
        fs::remove_file(dir.path().join("mask").join(format!("{}.png", s.id))).unwrap();
        match load_dataset(dir.path(), None) {
            Err(Error::Sample { id, .. }) => assert_eq!(id, s.id),
            other => panic!("expected sample error, got {other:?}"),
        }
        Ok(())
    }

    #[test]
    fn unreadable_image_is_reported() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scene(4, &SceneConfig::with_size(32))?;
        save_dataset(
            dir.path(),
            std::slice::from_ref(&s),
            &DatasetMeta::new(32, 2),
        )?;
        fs::write(
            dir.path().join("rgb").join(format!("{}.png", s.id)),
            b"junk",
        )
        .unwrap();
        assert!(matches!(
            load_dataset(dir.path(), None),
            Err(Error::Sample { .. })
        ));
        Ok(())
    }

    #[test]
    fn loading_resizes_to_requested_resolution() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scene(9, &SceneConfig::with_size(64))?;
        save_dataset(dir.path(), &[s], &DatasetMeta::new(64, 2))?;
        let l = load_dataset(dir.path(), Some(32))?;
        assert_eq!(l[0].size, 32);
        assert_eq!(l[0].rgb.len(), 3 * 32 * 32);
        assert_eq!(l[0].seg.len(), 32 * 32);
        Ok(())
    }
}
