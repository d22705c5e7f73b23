use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig, IterationState, Predictions};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::reassemble::{FeaturePyramid, Reassemble, ReassembleConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn reassemble(&self) -> ReassembleConfig {
        ReassembleConfig {
            image_size: self.encoder.image_size,
            patch_size: self.encoder.patch_size,
            embed_dim: self.encoder.embed_dim,
            channels: self.decoder.channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.reassemble().validate()?;
        self.decoder.validate()
    }

    pub fn image_size(&self) -> usize {
        self.encoder.image_size
    }
}

/// Joint depth + segmentation network: `(S, D) = f(I)`.
#[derive(Clone)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    reassemble: Reassemble,
    decoder: Decoder,
}

/// Everything a training step needs from one forward pass.
pub struct ForwardOutput {
    pub pyramids: (FeaturePyramid, FeaturePyramid),
    pub states: Vec<IterationState>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(dtype, Device::Cpu);
        let mut b = params.builder(seed);
        let encoder = Encoder::new(&mut b.pp("encoder"), &cfg.encoder)?;
        let reassemble = Reassemble::new(&mut b.pp("reassemble"), &cfg.reassemble())?;
        let decoder = Decoder::new(&mut b.pp("decoder"), &cfg.decoder)?;
        drop(b);
        Ok(Self {
            cfg: cfg.clone(),
            params,
            encoder,
            reassemble,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn reassemble(&self) -> &Reassemble {
        &self.reassemble
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Builds an input batch `[B, 3, S, S]` from flat channel-major RGB
    /// buffers in the model's dtype.
    pub fn image_batch(&self, images: &[&[f32]]) -> Result<Tensor> {
        let s = self.cfg.image_size();
        let mut flat = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            if img.len() != 3 * s * s {
                return Err(Error::Input(format!(
                    "image buffer has {} values, expected 3x{s}x{s}",
                    img.len()
                )));
            }
            flat.extend_from_slice(img);
        }
        Ok(
            Tensor::from_vec(flat, (images.len(), 3, s, s), &Device::Cpu)?
                .to_dtype(self.params.dtype())?,
        )
    }

    pub fn forward(&self, images: &Tensor) -> Result<ForwardOutput> {
        let tokens = self.encoder.encode(images)?;
        let pyramids = self.reassemble.forward(&tokens)?;
        let states = self.decoder.run_iterations((&pyramids.0, &pyramids.1))?;
        Ok(ForwardOutput { pyramids, states })
    }

    /// Heads applied to every level of every iteration, all at full
    /// resolution: `out[n][level]`.
    pub fn multiscale_predictions(&self, out: &ForwardOutput) -> Result<Vec<Vec<Predictions>>> {
        let size = self.cfg.image_size();
        out.states
            .iter()
            .map(|st| {
                (0..4)
                    .map(|l| self.decoder.predict_level(st, l, size))
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    }

    /// Final prediction from the last iteration's shallowest level.
    pub fn predict(&self, images: &Tensor) -> Result<Predictions> {
        let out = self.forward(images)?;
        let last = out
            .states
            .last()
            .ok_or_else(|| Error::Contract("decoder produced no states".into()))?;
        self.decoder.predict_heads(last, self.cfg.image_size())
    }
}
