//! Vision-transformer encoder: patch embedding, learned position embeddings
//! and a stack of pre-norm transformer blocks. Token sets are tapped after
//! four configured blocks.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_last, Conv2d, Init, LayerNorm, Linear, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// 1-based block indices whose outputs are tapped, shallow to deep.
    pub tap_layers: [usize; 4],
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 96,
            patch_size: 8,
            embed_dim: 64,
            num_blocks: 12,
            num_heads: 4,
            tap_layers: [3, 6, 9, 12],
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    /// The ViT-scale configuration (384 px input, 16 px patches).
    pub fn full_scale() -> Self {
        Self {
            image_size: 384,
            patch_size: 16,
            embed_dim: 768,
            num_blocks: 12,
            num_heads: 12,
            tap_layers: [3, 6, 9, 12],
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 {
            return bad("image_size and patch_size must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.tap_layers[0] == 0 || self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "tap_layers {:?} must be strictly increasing and 1-based",
                self.tap_layers
            ));
        }
        if self.tap_layers[3] > self.num_blocks {
            return bad(format!(
                "tap layer {} exceeds num_blocks {}",
                self.tap_layers[3], self.num_blocks
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Token sets from the four tapped blocks, each `[B, num_patches, embed_dim]`.
#[derive(Debug, Clone)]
pub struct LayerTokens {
    pub tokens: [Tensor; 4],
    /// Patch grid (rows, cols).
    pub grid: (usize, usize),
}

#[derive(Debug, Clone)]
struct Attention {
    qkv: Linear,
    proj: Linear,
    num_heads: usize,
}

impl Attention {
    /// Attention weights `[B, heads, N, N]`, rows softmax-normalized.
    fn weights(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.num_heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.num_heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        Ok((softmax_last(&scores)?, v))
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let (attn, v) = self.weights(x)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(b: &mut ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let norm1 = LayerNorm::new(&mut b.pp("norm1"), d)?;
        let qkv = Linear::new(&mut b.pp("qkv"), d, 3 * d)?;
        let proj = Linear::new(&mut b.pp("proj"), d, d)?;
        let norm2 = LayerNorm::new(&mut b.pp("norm2"), d)?;
        let fc1 = Linear::new(&mut b.pp("fc1"), d, cfg.mlp_ratio * d)?;
        let fc2 = Linear::new(&mut b.pp("fc2"), cfg.mlp_ratio * d, d)?;
        Ok(Self {
            norm1,
            attn: Attention {
                qkv,
                proj,
                num_heads: cfg.num_heads,
            },
            norm2,
            fc1,
            fc2,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    patch: Conv2d,
    pos_embed: Tensor,
    blocks: Vec<Block>,
}

impl Encoder {
    pub fn new(b: &mut ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let patch = Conv2d::new(
            &mut b.pp("patch_embed"),
            3,
            cfg.embed_dim,
            cfg.patch_size,
            cfg.patch_size,
            0,
        )?;
        let pos_embed = b.param(
            "pos_embed",
            &[1, cfg.num_patches(), cfg.embed_dim],
            Init::Normal(0.02),
        )?;
        let blocks = (0..cfg.num_blocks)
            .map(|i| Block::new(&mut b.pp(format!("blocks.{i:02}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            patch,
            pos_embed,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let dims = image.dims();
        let s = self.cfg.image_size;
        if dims.len() != 4 || dims[1] != 3 || dims[2] != s || dims[3] != s {
            return Err(Error::Input(format!(
                "expected image batch [B, 3, {s}, {s}], got {dims:?}"
            )));
        }
        Ok(())
    }

    /// One token per non-overlapping patch, position embeddings added:
    /// `[B, 3, S, S] -> [B, num_patches, embed_dim]`.
    pub fn patch_embed(&self, image: &Tensor) -> Result<Tensor> {
        self.check_input(image)?;
        let x = self
            .patch
            .forward(image)?
            .flatten_from(2)?
            .transpose(1, 2)?;
        Ok(x.broadcast_add(&self.pos_embed)?)
    }

    pub fn encode(&self, image: &Tensor) -> Result<LayerTokens> {
        let mut x = self.patch_embed(image)?;
        let mut taps = Vec::with_capacity(4);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x)?;
            if self.cfg.tap_layers.contains(&(i + 1)) {
                taps.push(x.clone());
            }
        }
        let tokens: [Tensor; 4] = taps
            .try_into()
            .map_err(|_| Error::Contract("expected exactly four tapped layers".into()))?;
        let g = self.cfg.grid();
        Ok(LayerTokens {
            tokens,
            grid: (g, g),
        })
    }

    /// Attention weights of block `block` (0-based) for the given image,
    /// `[B, heads, N, N]`.
    pub fn attention_weights(&self, image: &Tensor, block: usize) -> Result<Tensor> {
        let mut x = self.patch_embed(image)?;
        for blk in &self.blocks[..block] {
            x = blk.forward(&x)?;
        }
        let blk = self
            .blocks
            .get(block)
            .ok_or_else(|| Error::Input(format!("no block {block}")))?;
        Ok(blk.attn.weights(&blk.norm1.forward(&x)?)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn small() -> EncoderConfig {
        EncoderConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 16,
            num_blocks: 4,
            num_heads: 2,
            tap_layers: [1, 2, 3, 4],
            mlp_ratio: 2,
        }
    }

    fn build(cfg: &EncoderConfig) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let enc = Encoder::new(&mut store.builder(3), cfg).unwrap();
        (store, enc)
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        assert!(EncoderConfig::full_scale().validate().is_ok());
        let d = EncoderConfig::default;
        for c in [
            EncoderConfig {
                image_size: 100,
                ..d()
            },
            EncoderConfig {
                num_heads: 5,
                ..d()
            },
            EncoderConfig {
                tap_layers: [3, 3, 9, 12],
                ..d()
            },
            EncoderConfig {
                tap_layers: [3, 6, 9, 13],
                ..d()
            },
        ] {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn token_counts() {
        assert_eq!(EncoderConfig::default().num_patches(), 144);
        assert_eq!(EncoderConfig::full_scale().num_patches(), 576);
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let (_, enc) = build(&small());
        let img = Tensor::zeros((1, 3, 16, 16), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(enc.patch_embed(&img), Err(Error::Input(_))));
        let img = Tensor::zeros((1, 1, 32, 32), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(enc.encode(&img), Err(Error::Input(_))));
    }

    #[test]
    fn zero_projection_yields_position_embeddings() -> Result<()> {
        let (store, enc) = build(&small());
        store.zero_prefix("patch_embed")?;
        let img = Tensor::zeros((1, 3, 32, 32), DType::F64, &Device::Cpu)?;
        let tokens = enc.patch_embed(&img)?;
        let pos = store.get("pos_embed").unwrap().as_tensor();
        let diff = (tokens - pos)?.abs()?.max_all()?.to_scalar::<f64>()?;
        assert_eq!(diff, 0.0);
        Ok(())
    }

    #[test]
    fn attention_rows_are_convex() -> Result<()> {
        let (_, enc) = build(&small());
        let img = Tensor::rand(0.0f64, 1.0, (2, 3, 32, 32), &Device::Cpu)?;
        for blk in 0..4 {
            let w = enc.attention_weights(&img, blk)?;
            assert!(w.min_all()?.to_scalar::<f64>()? >= 0.0);
            let sums = w.sum(3)?.flatten_all()?.to_vec1::<f64>()?;
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
        }
        Ok(())
    }
}
