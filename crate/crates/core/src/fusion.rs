//! Semantic-geometric fusion: each branch is reweighted by channel and spatial
//! attention maps computed from the other branch.
//!
//! With `CAM(F) = sigmoid(FC(avgpool(F)) + FC(maxpool(F)))` (pooling over the
//! spatial axes, one MLP shared by both paths) and
//! `SAM(F) = sigmoid(conv7x7([mean_c(F), max_c(F)]))` (pooling over channels):
//!
//! ```text
//! F_d'  = F_d  * CAM(F_s)        F_s'  = F_s  * CAM(F_d)
//! F_d'' = F_d' * SAM(F_s')       F_s'' = F_s' * SAM(F_d')
//! ```
//!
//! Attention computed *from* a branch's features uses that branch's
//! [`AttentionParams`].

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Conv2d, Linear, ParamBuilder};

/// Channel-MLP reduction ratio.
pub const REDUCTION: usize = 4;
pub const SPATIAL_KERNEL: usize = 7;

#[derive(Debug, Clone)]
pub struct AttentionParams {
    /// Shared by the average- and max-pooled paths.
    pub fc1: Linear,
    pub fc2: Linear,
    /// 2 input channels (avg, max), 1 output channel.
    pub spatial: Conv2d,
}

impl AttentionParams {
    pub fn new(b: &mut ParamBuilder, channels: usize) -> Result<Self> {
        let hidden = (channels / REDUCTION).max(1);
        let fc1 = Linear::new(&mut b.pp("fc1"), channels, hidden)?;
        let fc2 = Linear::new(&mut b.pp("fc2"), hidden, channels)?;
        let spatial = Conv2d::new(
            &mut b.pp("spatial"),
            2,
            1,
            SPATIAL_KERNEL,
            1,
            SPATIAL_KERNEL / 2,
        )?;
        Ok(Self { fc1, fc2, spatial })
    }

    pub fn channels(&self) -> Result<usize> {
        Ok(self.fc1.weight.dim(0)?)
    }

    fn mlp(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }
}

/// `[B, C, H, W] -> [B, C, 1, 1]`, each weight in (0, 1).
pub fn channel_attention(f: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let (b, c, _, _) = f.dims4()?;
    if c != p.channels()? {
        return Err(Error::Input(format!(
            "feature has {c} channels, attention expects {}",
            p.channels()?
        )));
    }
    let avg = f.mean((2, 3))?;
    let max = f.max(3)?.max(2)?;
    let logits = (p.mlp(&avg)? + p.mlp(&max)?)?;
    sigmoid(&logits)?.reshape((b, c, 1, 1)).map_err(Into::into)
}

/// `[B, C, H, W] -> [B, 1, H, W]`, each weight in (0, 1).
pub fn spatial_attention(f: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let avg = f.mean_keepdim(1)?;
    let max = f.max_keepdim(1)?;
    let pooled = Tensor::cat(&[&avg, &max], 1)?;
    sigmoid(&p.spatial.forward(&pooled)?)
}

/// One cross-task fusion step. Returns `(F_d'', F_s'')`.
pub fn sgfm(
    f_d: &Tensor,
    f_s: &Tensor,
    p_d: &AttentionParams,
    p_s: &AttentionParams,
) -> Result<(Tensor, Tensor)> {
    if f_d.dims() != f_s.dims() {
        return Err(Error::Input(format!(
            "branch shapes differ: depth {:?} vs seg {:?}",
            f_d.dims(),
            f_s.dims()
        )));
    }
    let cam_s = channel_attention(f_s, p_s)?;
    let cam_d = channel_attention(f_d, p_d)?;
    let fd1 = f_d.broadcast_mul(&cam_s)?;
    let fs1 = f_s.broadcast_mul(&cam_d)?;
    let sam_s = spatial_attention(&fs1, p_s)?;
    let sam_d = spatial_attention(&fd1, p_d)?;
    Ok((fd1.broadcast_mul(&sam_s)?, fs1.broadcast_mul(&sam_d)?))
}

/// The attention parameter pair for one pyramid level.
#[derive(Debug, Clone)]
pub struct FusionLevel {
    pub depth: AttentionParams,
    pub seg: AttentionParams,
}

impl FusionLevel {
    pub fn new(b: &mut ParamBuilder, channels: usize) -> Result<Self> {
        let depth = AttentionParams::new(&mut b.pp("depth"), channels)?;
        let seg = AttentionParams::new(&mut b.pp("seg"), channels)?;
        Ok(Self { depth, seg })
    }

    pub fn forward(&self, f_d: &Tensor, f_s: &Tensor) -> Result<(Tensor, Tensor)> {
        sgfm(f_d, f_s, &self.depth, &self.seg)
    }
}
