//! Samples, the synthetic scene generator and dataset directory IO.

mod io;
mod scene;

pub use io::{
    load_dataset, read_depth_png, read_mask_png, read_meta, read_rgb, resize_sample, save_dataset,
    save_sample, write_depth_png, write_mask_png, write_meta, write_rgb_png, DatasetMeta,
    DEFAULT_DEPTH_SCALE,
};
pub use scene::{generate_scene, split_seeds, SceneConfig, Shape};

/// One RGB image with its ground truth. Buffers are row-major; RGB is
/// channel-major `[3, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// Square side length.
    pub size: usize,
    /// Values in [0, 1].
    pub rgb: Vec<f32>,
    /// Normalized depth in [0, 1].
    pub depth: Vec<f32>,
    /// Class ids.
    pub seg: Vec<u8>,
}

impl ImageSample {
    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    pub fn check(&self, num_classes: usize) -> crate::Result<()> {
        let n = self.pixels();
        let fail = |msg: String| {
            Err(crate::Error::Sample {
                id: self.id.clone(),
                msg,
            })
        };
        if self.rgb.len() != 3 * n || self.depth.len() != n || self.seg.len() != n {
            return fail("buffer sizes disagree with image size".into());
        }
        if self.depth.iter().any(|d| !d.is_finite()) {
            return fail("non-finite depth".into());
        }
        if let Some(c) = self.seg.iter().find(|&&c| c as usize >= num_classes) {
            return fail(format!("class id {c} >= {num_classes}"));
        }
        Ok(())
    }
}
