//! Turns the four uniform-resolution token sets into two four-level feature
//! pyramids at 1/4, 1/8, 1/16 and 1/32 of the input resolution.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoder::LayerTokens;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, ParamBuilder};

/// Downsampling factor of pyramid level `i` relative to the input.
pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Depth,
    Segmentation,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Depth, Branch::Segmentation];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Depth => "depth",
            Branch::Segmentation => "seg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReassembleConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Shared channel width of every pyramid level.
    pub channels: usize,
}

impl ReassembleConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by 32",
                self.image_size
            )));
        }
        if !self.patch_size.is_power_of_two() || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "patch_size {} must be a power of two dividing image_size",
                self.patch_size
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Spatial side length of each pyramid level.
    pub fn level_sizes(&self) -> [usize; 4] {
        LEVEL_STRIDES.map(|s| self.image_size / s)
    }
}

/// Four levels `[B, C, H_f, W_f]`, shallow (1/4) to deep (1/32).
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
    pub branch: Branch,
}

#[derive(Debug, Clone)]
enum Resample {
    Up(ConvTranspose2d),
    Same,
    Down(Conv2d),
}

#[derive(Debug, Clone)]
struct LevelProjection {
    project: Conv2d,
    resample: Resample,
}

impl LevelProjection {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.project.forward(x)?;
        match &self.resample {
            Resample::Up(t) => t.forward(&x),
            Resample::Same => Ok(x),
            Resample::Down(c) => c.forward(&x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reassemble {
    cfg: ReassembleConfig,
    // [branch][level]
    heads: [[LevelProjection; 4]; 2],
}

impl Reassemble {
    pub fn new(b: &mut ParamBuilder, cfg: &ReassembleConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid();
        let mut branches = Vec::with_capacity(2);
        for branch in Branch::BOTH {
            let mut levels = Vec::with_capacity(4);
            for (i, size) in cfg.level_sizes().into_iter().enumerate() {
                let mut lb = b.pp(format!("{}.{i}", branch.name()));
                let project =
                    Conv2d::new(&mut lb.pp("project"), cfg.embed_dim, cfg.channels, 1, 1, 0)?;
                let resample = if size > grid {
                    let f = size / grid;
                    Resample::Up(ConvTranspose2d::new(
                        &mut lb.pp("resample"),
                        cfg.channels,
                        cfg.channels,
                        f,
                    )?)
                } else if size < grid {
                    let f = grid / size;
                    Resample::Down(Conv2d::new(
                        &mut lb.pp("resample"),
                        cfg.channels,
                        cfg.channels,
                        f,
                        f,
                        0,
                    )?)
                } else {
                    Resample::Same
                };
                levels.push(LevelProjection { project, resample });
            }
            branches.push(
                <[LevelProjection; 4]>::try_from(levels)
                    .map_err(|_| Error::Contract("four levels".into()))?,
            );
        }
        let heads = <[[LevelProjection; 4]; 2]>::try_from(branches)
            .map_err(|_| Error::Contract("two branches".into()))?;
        Ok(Self {
            cfg: cfg.clone(),
            heads,
        })
    }

    pub fn config(&self) -> &ReassembleConfig {
        &self.cfg
    }

    /// Returns `(depth_pyramid, seg_pyramid)`. The shallowest tap feeds the
    /// 1/4 level, the deepest the 1/32 level.
    pub fn forward(&self, tokens: &LayerTokens) -> Result<(FeaturePyramid, FeaturePyramid)> {
        let g = self.cfg.grid();
        if tokens.grid != (g, g) {
            return Err(Error::Input(format!(
                "token grid {:?} does not match configured {g}x{g}",
                tokens.grid
            )));
        }
        let maps = tokens
            .tokens
            .iter()
            .map(|t| {
                let (b, n, d) = t.dims3()?;
                if n != g * g || d != self.cfg.embed_dim {
                    return Err(Error::Input(format!(
                        "tokens [{b}, {n}, {d}] do not match grid {g}x{g} / dim {}",
                        self.cfg.embed_dim
                    )));
                }
                Ok(t.transpose(1, 2)?.reshape((b, d, g, g))?)
            })
            .collect::<Result<Vec<_>>>()?;

        let build = |bi: usize, branch: Branch| -> Result<FeaturePyramid> {
            let mut levels = Vec::with_capacity(4);
            for (proj, map) in self.heads[bi].iter().zip(&maps) {
                levels.push(proj.forward(map)?);
            }
            Ok(FeaturePyramid {
                levels: levels.try_into().expect("four levels"),
                branch,
            })
        };
        Ok((build(0, Branch::Depth)?, build(1, Branch::Segmentation)?))
    }
}
