//! Iterative fusion decoder.
//!
//! A single set of decoder weights is applied `num_iterations` times:
//! `F_n = f_d(F_e, Gate(F_{n-1}))`. Within one pass, levels are visited deep
//! to shallow; at each level the reassembled features are summed with the
//! gated features of the previous pass, fused across branches, merged with
//! the upsampled coarser result and refined by a residual conv unit.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionLevel;
use crate::nn::{resize_bilinear, Conv2d, Init, ParamBuilder};
use crate::reassemble::FeaturePyramid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_iterations: usize,
    pub num_classes: usize,
    pub channels: usize,
    /// Cross-task fusion at every level; `false` is the no-fusion ablation.
    pub use_fusion: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_iterations: 3,
            num_classes: 2,
            channels: 64,
            use_fusion: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_iterations == 0 {
            return Err(Error::Config("num_iterations must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.channels < 2 {
            return Err(Error::Config("decoder channels must be >= 2".into()));
        }
        Ok(())
    }
}

/// All fused multi-scale features of one pass: `features[branch][level]`,
/// branch 0 = depth, 1 = segmentation; level 0 is the 1/4 scale.
#[derive(Debug, Clone)]
pub struct IterationState {
    pub features: [[Tensor; 4]; 2],
    /// 1-based.
    pub iteration_index: usize,
}

impl IterationState {
    pub fn depth(&self) -> &[Tensor; 4] {
        &self.features[0]
    }

    pub fn seg(&self) -> &[Tensor; 4] {
        &self.features[1]
    }
}

/// `depth: [B, H, W]` (nonnegative), `seg_logits: [B, K, H, W]`.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub depth: Tensor,
    pub seg_logits: Tensor,
}

/// Two 3x3 convolutions with pre-activation ReLU and an identity skip.
#[derive(Debug, Clone)]
struct ResidualUnit {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResidualUnit {
    fn new(b: &mut ParamBuilder, c: usize) -> Result<Self> {
        let conv1 = Conv2d::new(&mut b.pp("conv1"), c, c, 3, 1, 1)?;
        let conv2 = Conv2d::new(&mut b.pp("conv2"), c, c, 3, 1, 1)?;
        Ok(Self { conv1, conv2 })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&x.relu()?)?;
        let h = self.conv2.forward(&h.relu()?)?;
        Ok((x + h)?)
    }
}

/// 1x1 convolution + ReLU carrying features from one pass into the next.
#[derive(Debug, Clone)]
pub struct GateUnit {
    conv: Conv2d,
}

impl GateUnit {
    fn new(b: &mut ParamBuilder, c: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(b, c, c, 1, 1, 0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(x)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct Head {
    conv: Conv2d,
    out: Conv2d,
}

impl Head {
    fn new(b: &mut ParamBuilder, c: usize, out_ch: usize, out_bias: Init) -> Result<Self> {
        let hidden = (c / 2).max(1);
        let conv = Conv2d::new(&mut b.pp("conv"), c, hidden, 3, 1, 1)?;
        let out = Conv2d::with_bias(&mut b.pp("out"), hidden, out_ch, 1, 1, 0, out_bias)?;
        Ok(Self { conv, out })
    }

    fn forward(&self, x: &Tensor, size: usize) -> Result<Tensor> {
        let h = self.conv.forward(x)?.relu()?;
        resize_bilinear(&self.out.forward(&h)?, size, size)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: DecoderConfig,
    // [branch][level]
    gates: [[GateUnit; 4]; 2],
    refine: [[ResidualUnit; 4]; 2],
    fusion: Option<[FusionLevel; 4]>,
    depth_head: Head,
    seg_head: Head,
}

fn four<T>(v: Vec<T>) -> [T; 4] {
    v.try_into().unwrap_or_else(|_| unreachable!("four levels"))
}

impl Decoder {
    pub fn new(b: &mut ParamBuilder, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut gates = Vec::new();
        let mut refine = Vec::new();
        for branch in ["depth", "seg"] {
            let mut g = Vec::new();
            let mut r = Vec::new();
            for level in 0..4 {
                g.push(GateUnit::new(
                    &mut b.pp(format!("gate.{branch}.{level}")),
                    c,
                )?);
                r.push(ResidualUnit::new(
                    &mut b.pp(format!("refine.{branch}.{level}")),
                    c,
                )?);
            }
            gates.push(four(g));
            refine.push(four(r));
        }
        let fusion = if cfg.use_fusion {
            let levels = (0..4)
                .map(|l| FusionLevel::new(&mut b.pp(format!("fusion.{l}")), c))
                .collect::<Result<Vec<_>>>()?;
            Some(four(levels))
        } else {
            None
        };
        let depth_head = Head::new(&mut b.pp("head.depth"), c, 1, Init::Const(0.5))?;
        let seg_head = Head::new(&mut b.pp("head.seg"), c, cfg.num_classes, Init::Zeros)?;
        Ok(Self {
            cfg: cfg.clone(),
            gates: [gates.remove(0), gates.remove(0)],
            refine: [refine.remove(0), refine.remove(0)],
            fusion,
            depth_head,
            seg_head,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Per-level 1x1 conv + ReLU on every branch and level of `prev`.
    pub fn gate(&self, prev: &IterationState) -> Result<[[Tensor; 4]; 2]> {
        let mut out: Vec<[Tensor; 4]> = Vec::with_capacity(2);
        for (gates, feats) in self.gates.iter().zip(&prev.features) {
            let lv = gates
                .iter()
                .zip(feats)
                .map(|(g, f)| g.forward(f))
                .collect::<Result<Vec<_>>>()?;
            out.push(four(lv));
        }
        Ok([out.remove(0), out.remove(0)])
    }

    /// One decoder pass. `prev` must be `None` exactly for iteration 1.
    pub fn decode_once(
        &self,
        fe: (&FeaturePyramid, &FeaturePyramid),
        prev: Option<&IterationState>,
        iteration_index: usize,
    ) -> Result<IterationState> {
        match (prev.is_some(), iteration_index) {
            (_, 0) => return Err(Error::Contract("iteration index is 1-based".into())),
            (false, 1) | (true, 2..) => {}
            (true, 1) => {
                return Err(Error::Contract(
                    "iteration 1 must not receive previous features".into(),
                ))
            }
            (false, n) => {
                return Err(Error::Contract(format!(
                    "iteration {n} requires previous features"
                )))
            }
        }
        let gated = prev.map(|p| self.gate(p)).transpose()?;
        let inputs = [&fe.0.levels, &fe.1.levels];

        let mut out: [Vec<Tensor>; 2] = [Vec::with_capacity(4), Vec::with_capacity(4)];
        let mut carry: Option<[Tensor; 2]> = None;
        for level in (0..4).rev() {
            let mut x: Vec<Tensor> = Vec::with_capacity(2);
            for bi in 0..2 {
                let base = &inputs[bi][level];
                x.push(match &gated {
                    Some(g) => (base + &g[bi][level])?,
                    None => base.clone(),
                });
            }
            let (fd, fs) = match &self.fusion {
                Some(f) => f[level].forward(&x[0], &x[1])?,
                None => (x[0].clone(), x[1].clone()),
            };
            let mut refined = Vec::with_capacity(2);
            for (bi, y) in [fd, fs].into_iter().enumerate() {
                let z = match &carry {
                    Some(c) => (y + &c[bi])?,
                    None => y,
                };
                refined.push(self.refine[bi][level].forward(&z)?);
            }
            if level > 0 {
                let (_, _, h, w) = refined[0].dims4()?;
                carry = Some([
                    resize_bilinear(&refined[0], 2 * h, 2 * w)?,
                    resize_bilinear(&refined[1], 2 * h, 2 * w)?,
                ]);
            }
            for (bi, r) in refined.into_iter().enumerate() {
                out[bi].push(r);
            }
        }
        let [mut d, mut s] = out;
        d.reverse();
        s.reverse();
        Ok(IterationState {
            features: [four(d), four(s)],
            iteration_index,
        })
    }

    /// States for iterations `1..=N`, each chained through the gates.
    pub fn run_iterations(
        &self,
        fe: (&FeaturePyramid, &FeaturePyramid),
    ) -> Result<Vec<IterationState>> {
        let mut states: Vec<IterationState> = Vec::with_capacity(self.cfg.num_iterations);
        for n in 1..=self.cfg.num_iterations {
            let next = self.decode_once(fe, states.last(), n)?;
            states.push(next);
        }
        Ok(states)
    }

    /// Heads applied to one pyramid level, upsampled to `size x size`.
    pub fn predict_level(
        &self,
        state: &IterationState,
        level: usize,
        size: usize,
    ) -> Result<Predictions> {
        let depth = self
            .depth_head
            .forward(&state.features[0][level], size)?
            .relu()?
            .squeeze(1)?;
        let seg_logits = self.seg_head.forward(&state.features[1][level], size)?;
        Ok(Predictions { depth, seg_logits })
    }

    /// Final prediction: heads on the shallowest (1/4) level.
    pub fn predict_heads(&self, state: &IterationState, size: usize) -> Result<Predictions> {
        self.predict_level(state, 0, size)
    }
}
