//! Procedural scenes of low-contrast, see-through objects over a textured,
//! tilted background plane. Depth is visible through two monocular cues:
//! surfaces fade towards a haze colour with distance, and larger objects sit
//! nearer the camera.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Sphere,
    Box,
    Cylinder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    /// Inclusive range.
    pub num_objects: (usize, usize),
    pub shapes: Vec<Shape>,
    /// Tint opacity range, strictly inside (0, 1).
    pub alpha_blend: (f64, f64),
    pub background_seed: u64,
    /// Normalized depth range of the background plane.
    pub background_depth: (f64, f64),
    /// Normalized depth range of object rims.
    pub object_depth: (f64, f64),
    /// Maximum bulge of an object towards the camera.
    pub object_relief: f64,
    /// Minimum depth jump across every object/background boundary.
    pub min_depth_step: f64,
    /// Object radius range as a fraction of the image side.
    pub object_radius: (f64, f64),
    /// Allowed fraction of object pixels when at least one object is placed.
    pub object_fraction: (f64, f64),
    /// Background coordinate warp under objects, in pixels.
    pub refraction: f64,
    /// Blend towards the haze colour per unit depth, in [0, 1).
    pub haze: f64,
    /// Half-width of the random offset of an object's rim depth from the
    /// depth implied by its size.
    pub size_depth_jitter: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 96,
            num_objects: (1, 3),
            shapes: vec![Shape::Sphere, Shape::Box, Shape::Cylinder],
            alpha_blend: (0.15, 0.35),
            background_seed: 0,
            background_depth: (0.7, 0.95),
            object_depth: (0.3, 0.6),
            object_relief: 0.12,
            min_depth_step: 0.05,
            object_radius: (0.1, 0.22),
            object_fraction: (0.03, 0.6),
            refraction: 3.0,
            haze: 0.6,
            size_depth_jitter: 0.03,
        }
    }
}

impl SceneConfig {
    pub fn with_size(image_size: usize) -> Self {
        Self {
            image_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let in01 = |r: (f64, f64)| 0.0 <= r.0 && r.0 <= r.1 && r.1 <= 1.0;
        if self.image_size < 4 {
            return bad(format!("image_size {} too small", self.image_size));
        }
        if self.num_objects.0 > self.num_objects.1 {
            return bad("num_objects range is inverted".into());
        }
        if self.num_objects.1 > 0 && self.shapes.is_empty() {
            return bad("shape palette is empty".into());
        }
        let (a0, a1) = self.alpha_blend;
        if !(0.0 < a0 && a0 <= a1 && a1 < 1.0) {
            return bad(format!(
                "alpha_blend {:?} must lie strictly inside (0, 1)",
                self.alpha_blend
            ));
        }
        if !in01(self.background_depth) || !in01(self.object_depth) {
            return bad("depth ranges must lie in [0, 1]".into());
        }
        if self.object_depth.0 - self.object_relief < 0.0 || self.object_relief < 0.0 {
            return bad("object relief pushes depth below 0".into());
        }
        if self.object_depth.1 + self.min_depth_step > self.background_depth.0 {
            return bad(format!(
                "objects (max {}) must be at least {} in front of the background (min {})",
                self.object_depth.1, self.min_depth_step, self.background_depth.0
            ));
        }
        if !(0.0..1.0).contains(&self.haze) {
            return bad(format!("haze {} must lie in [0, 1)", self.haze));
        }
        if self.size_depth_jitter < 0.0 {
            return bad("size_depth_jitter must be >= 0".into());
        }
        if !in01(self.object_fraction) || !in01(self.object_radius) || self.object_radius.0 <= 0.0 {
            return bad("object fraction/radius ranges must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Deterministic smooth colour texture.
struct Texture {
    base: [f64; 3],
    waves: Vec<([f64; 3], f64, f64, f64)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let base = [
            rng.random_range(0.25..0.75),
            rng.random_range(0.25..0.75),
            rng.random_range(0.25..0.75),
        ];
        let s = size as f64;
        let waves = (0..5)
            .map(|_| {
                let amp = [
                    rng.random_range(-0.12..0.12),
                    rng.random_range(-0.12..0.12),
                    rng.random_range(-0.12..0.12),
                ];
                let fx = rng.random_range(-12.0..12.0) / s;
                let fy = rng.random_range(-12.0..12.0) / s;
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (amp, fx, fy, phase)
            })
            .collect();
        Self { base, waves }
    }

    fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.base;
        for (amp, fx, fy, ph) in &self.waves {
            let s = (fx * x + fy * y + ph).sin();
            for k in 0..3 {
                c[k] += amp[k] * s;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

struct Object {
    shape: Shape,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    rim: f64,
    relief: f64,
    alpha: f64,
    tint: [f64; 3],
}

impl Object {
    /// Depth and refraction direction at pixel centre, if covered.
    fn hit(&self, x: f64, y: f64) -> Option<(f64, f64, f64)> {
        let u = (x - self.cx) / self.rx;
        let v = (y - self.cy) / self.ry;
        match self.shape {
            Shape::Sphere => {
                let r2 = u * u + v * v;
                (r2 <= 1.0).then(|| (self.rim - self.relief * (1.0 - r2).sqrt(), u, v))
            }
            Shape::Box => (u.abs() <= 1.0 && v.abs() <= 1.0).then_some((
                self.rim - self.relief * 0.5 * (1.0 + 0.5 * u),
                0.3,
                0.1,
            )),
            Shape::Cylinder => (u.abs() <= 1.0 && v.abs() <= 1.0)
                .then(|| (self.rim - self.relief * (1.0 - u * u).sqrt(), u, 0.0)),
        }
    }
}

fn place_objects(rng: &mut ChaCha8Rng, cfg: &SceneConfig, count: usize) -> Vec<Object> {
    let s = cfg.image_size as f64;
    (0..count)
        .map(|_| {
            let shape = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
            let (r0, r1) = cfg.object_radius;
            let frac = rng.random_range(r0..=r1);
            let r = s * frac;
            let aspect = match shape {
                Shape::Sphere => 1.0,
                Shape::Box => rng.random_range(0.6..1.4),
                Shape::Cylinder => rng.random_range(1.3..2.0),
            };
            let (d0, d1) = cfg.object_depth;
            let nearness = if r1 > r0 {
                (frac - r0) / (r1 - r0)
            } else {
                0.5
            };
            let j = cfg.size_depth_jitter;
            let rim = (d1 - (d1 - d0) * nearness + rng.random_range(-j..=j)).clamp(d0, d1);
            Object {
                shape,
                cx: rng.random_range(0.0..s),
                cy: rng.random_range(0.0..s),
                rx: r,
                ry: r * aspect,
                rim,
                relief: rng.random_range(0.0..=cfg.object_relief),
                alpha: rng.random_range(cfg.alpha_blend.0..=cfg.alpha_blend.1),
                tint: [
                    rng.random_range(0.75..1.0),
                    rng.random_range(0.8..1.0),
                    rng.random_range(0.85..1.0),
                ],
            }
        })
        .collect()
}

const MAX_PLACEMENT_ATTEMPTS: usize = 256;
const HAZE_COLOUR: [f64; 3] = [0.8, 0.82, 0.86];

/// Blends a surface colour towards the haze colour by `haze * depth`.
fn hazed(c: [f64; 3], depth: f64, haze: f64) -> [f64; 3] {
    let f = haze * depth;
    std::array::from_fn(|k| (1.0 - f) * c[k] + f * HAZE_COLOUR[k])
}

/// Renders scene `seed`. Identical seeds give identical samples.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<ImageSample> {
    cfg.validate()?;
    let size = cfg.image_size;
    let s1 = (size - 1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tex_rng = ChaCha8Rng::seed_from_u64(
        seed.rotate_left(17) ^ cfg.background_seed ^ 0x9e37_79b9_7f4a_7c15,
    );
    let texture = Texture::new(&mut tex_rng, size);

    let (b0, b1) = cfg.background_depth;
    let top = rng.random_range(b0..=b1);
    let bottom = rng.random_range(b0..=b1);
    let slope_x = rng.random_range(-0.05..=0.05);
    let background_depth = |x: usize, y: usize| {
        let t = y as f64 / s1;
        let d = top + (bottom - top) * t + slope_x * (x as f64 / s1 - 0.5);
        d.clamp(b0, b1)
    };

    let count = rng.random_range(cfg.num_objects.0..=cfg.num_objects.1);
    let n_px = size * size;
    let mut objects = Vec::new();
    let mut owner: Vec<Option<(usize, f64, f64, f64)>> = vec![None; n_px];
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        objects = place_objects(&mut rng, cfg, count);
        owner.iter_mut().for_each(|o| *o = None);
        for (p, slot) in owner.iter_mut().enumerate() {
            let (x, y) = ((p % size) as f64 + 0.5, (p / size) as f64 + 0.5);
            for (i, obj) in objects.iter().enumerate() {
                if let Some((d, nx, ny)) = obj.hit(x, y) {
                    // nearest surface wins
                    if slot.is_none_or(|(_, best, _, _)| d < best) {
                        *slot = Some((i, d, nx, ny));
                    }
                }
            }
        }
        if count == 0 {
            break;
        }
        let frac = owner.iter().filter(|o| o.is_some()).count() as f64 / n_px as f64;
        if frac >= cfg.object_fraction.0 && frac <= cfg.object_fraction.1 {
            break;
        }
    }

    let mut rgb = vec![0f32; 3 * n_px];
    let mut depth = vec![0f32; n_px];
    let mut seg = vec![0u8; n_px];
    for p in 0..n_px {
        let (x, y) = (p % size, p / size);
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let (colour, d) = match owner[p] {
            None => {
                let d = background_depth(x, y);
                (hazed(texture.sample(fx, fy), d, cfg.haze), d)
            }
            Some((i, d, nx, ny)) => {
                let obj = &objects[i];
                let behind = hazed(
                    texture.sample(fx + cfg.refraction * nx, fy + cfg.refraction * ny),
                    background_depth(x, y),
                    cfg.haze,
                );
                let tint = hazed(obj.tint, d, cfg.haze);
                let mut c = [0.0; 3];
                for k in 0..3 {
                    c[k] = ((1.0 - obj.alpha) * behind[k] + obj.alpha * tint[k]).clamp(0.0, 1.0);
                }
                seg[p] = 1;
                (c, d)
            }
        };
        for k in 0..3 {
            rgb[k * n_px + p] = colour[k] as f32;
        }
        depth[p] = d as f32;
    }
    Ok(ImageSample {
        id: format!("{seed:08}"),
        size,
        rgb,
        depth,
        seg,
    })
}

/// Seeds of a split: training uses `[0, n)` offset by `base`, test uses a
/// disjoint range far above any training seed.
pub fn split_seeds(base: u64, n_train: usize, n_test: usize) -> (Vec<u64>, Vec<u64>) {
    const TEST_OFFSET: u64 = 1 << 32;
    let train = (0..n_train as u64).map(|i| base + i).collect();
    let test = (0..n_test as u64).map(|i| base + TEST_OFFSET + i).collect();
    (train, test)
}
