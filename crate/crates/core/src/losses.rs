//! Hybrid training objective.
//!
//! Geometric term (per sample, then averaged over the batch):
//! `w_d * sqrt(mean (D - D*)^2) + w_g * mean |grad D - grad D*|_1
//!  + w_n * mean |N_D - N_D*|_1`, gradients by forward differences and
//! normals `normalize(-dD/dx, -dD/dy, 1)` on the pixel grid.
//! Semantic term: mean per-pixel cross-entropy.
//! Total: `sum_n (n/N) * mean_over_levels(alpha * L_geo + beta * L_sem)`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, IterationState, Predictions};
use crate::error::{Error, Result};
use crate::nn::log_softmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub w_d: f64,
    pub w_g: f64,
    pub w_n: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Weight iteration `n` by `n / N`; otherwise every iteration weighs 1.
    pub iteration_ramp: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_d: 1.0,
            w_g: 1.0,
            w_n: 1.0,
            alpha: 1.0,
            beta: 0.1,
            iteration_ramp: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_d, self.w_g, self.w_n, self.alpha, self.beta];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be >= 0: {all:?}")));
        }
        Ok(())
    }

    /// Weight of iteration `n` (1-based) out of `total`.
    pub fn iteration_weight(&self, n: usize, total: usize) -> f64 {
        if self.iteration_ramp {
            n as f64 / total as f64
        } else {
            1.0
        }
    }
}

/// Ground truth for one batch.
#[derive(Debug, Clone)]
pub struct Targets {
    /// `[B, H, W]`, normalized to [0, 1].
    pub depth: Tensor,
    /// `[B, H, W]` class ids, `u32`.
    pub seg: Tensor,
    /// Optional `[B, H, W]` validity weights (1 = supervised).
    pub valid: Option<Tensor>,
}

fn check_map(d: &Tensor) -> Result<(usize, usize, usize)> {
    let (b, h, w) = d.dims3()?;
    if h < 2 || w < 2 {
        return Err(Error::Input(format!("depth map {h}x{w} smaller than 2x2")));
    }
    Ok((b, h, w))
}

/// Forward differences `(d/dx, d/dy)` of a `[B, H, W]` map; the last column
/// (resp. row) is zero.
pub fn depth_gradients(d: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, h, w) = check_map(d)?;
    let dx = (d.narrow(2, 1, w - 1)? - d.narrow(2, 0, w - 1)?)?;
    let dx = Tensor::cat(&[&dx, &Tensor::zeros((b, h, 1), d.dtype(), d.device())?], 2)?;
    let dy = (d.narrow(1, 1, h - 1)? - d.narrow(1, 0, h - 1)?)?;
    let dy = Tensor::cat(&[&dy, &Tensor::zeros((b, 1, w), d.dtype(), d.device())?], 1)?;
    Ok((dx, dy))
}

/// Unit surface normals `[B, 3, H, W]` of the depth surface over the pixel grid.
pub fn normals_from_depth(d: &Tensor) -> Result<Tensor> {
    let (dx, dy) = depth_gradients(d)?;
    normals_from_gradients(&dx, &dy)
}

fn normals_from_gradients(dx: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let norm = ((dx.sqr()? + dy.sqr()?)? + 1.0)?.sqrt()?;
    let inv = norm.recip()?;
    let nx = dx.neg()?.mul(&inv)?;
    let ny = dy.neg()?.mul(&inv)?;
    Ok(Tensor::stack(&[&nx, &ny, &inv], 1)?)
}

/// Scalar loss terms, each a 0-d tensor.
#[derive(Debug, Clone)]
pub struct GeometricTerms {
    pub value: Tensor,
    pub gradient: Tensor,
    pub normal: Tensor,
    pub total: Tensor,
}

/// Mean over pixels of `x` (`[B, H, W]`) weighted by `mask`, per sample.
fn per_sample_mean(x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    Ok(match mask {
        None => x.mean((1, 2))?,
        Some(m) => {
            let num = (x * m)?.sum((1, 2))?;
            let den = m.sum((1, 2))?.clamp(1.0, f64::INFINITY)?;
            (num / den)?
        }
    })
}

pub fn geometric_terms(
    d: &Tensor,
    d_star: &Tensor,
    cfg: &LossConfig,
    mask: Option<&Tensor>,
) -> Result<GeometricTerms> {
    if d.dims() != d_star.dims() {
        return Err(Error::Input(format!(
            "prediction {:?} and target {:?} differ in shape",
            d.dims(),
            d_star.dims()
        )));
    }
    check_map(d)?;
    let mask = match mask {
        Some(m) => Some(m.to_dtype(d.dtype())?),
        None => None,
    };
    let mask = mask.as_ref();

    let value = per_sample_mean(&(d - d_star)?.sqr()?, mask)?
        .sqrt()?
        .mean_all()?;

    let (dx, dy) = depth_gradients(d)?;
    let (tx, ty) = depth_gradients(d_star)?;
    let grad_l1 = ((&dx - &tx)?.abs()? + (&dy - &ty)?.abs()?)?;
    let gradient = per_sample_mean(&grad_l1, mask)?.mean_all()?;

    let n = normals_from_gradients(&dx, &dy)?;
    let nt = normals_from_gradients(&tx, &ty)?;
    let normal_l1 = (n - nt)?.abs()?.sum(1)?;
    let normal = per_sample_mean(&normal_l1, mask)?.mean_all()?;

    let total = (((&value * cfg.w_d)? + (&gradient * cfg.w_g)?)? + (&normal * cfg.w_n)?)?;
    Ok(GeometricTerms {
        value,
        gradient,
        normal,
        total,
    })
}

/// Weighted sum of the three depth terms (0-d tensor).
pub fn geometric_loss(d: &Tensor, d_star: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    Ok(geometric_terms(d, d_star, cfg, None)?.total)
}

/// Mean per-pixel cross-entropy of `[B, K, H, W]` logits against `[B, H, W]`
/// class ids.
pub fn semantic_loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (b, k, h, w) = logits.dims4()?;
    if target.dims() != [b, h, w] {
        return Err(Error::Input(format!(
            "target {:?} does not match logits {:?}",
            target.dims(),
            logits.dims()
        )));
    }
    let target = target.to_dtype(DType::U32)?;
    let max_id = target.max_all()?.to_scalar::<u32>()? as usize;
    if max_id >= k {
        return Err(Error::Input(format!(
            "class id {max_id} out of range for {k} classes"
        )));
    }
    let classes = Tensor::arange(0u32, k as u32, logits.device())?.reshape((1, k, 1, 1))?;
    let one_hot = target
        .unsqueeze(1)?
        .broadcast_eq(&classes)?
        .to_dtype(logits.dtype())?;
    let lsm = log_softmax(logits, 1)?;
    Ok((lsm * one_hot)?.sum(1)?.mean_all()?.neg()?)
}

/// `sum_n w_n * L_n` for already-computed per-iteration losses.
pub fn ramp_combine(per_iteration: &[f64], cfg: &LossConfig) -> f64 {
    let n = per_iteration.len();
    per_iteration
        .iter()
        .enumerate()
        .map(|(i, l)| cfg.iteration_weight(i + 1, n) * l)
        .sum()
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    /// Differentiable total.
    pub total: Tensor,
    /// Ramp-weighted, level-averaged geometric term (before `alpha`).
    pub geo: f64,
    /// Ramp-weighted, level-averaged semantic term (before `beta`).
    pub sem: f64,
    /// Level-averaged `alpha * L_geo + beta * L_sem` per iteration, unweighted.
    pub per_iteration: Vec<f64>,
}

/// Combines per-iteration, per-level full-resolution predictions
/// (`preds[n][level]`) into the ramped multi-scale objective.
pub fn combine_predictions(
    preds: &[Vec<Predictions>],
    targets: &Targets,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if preds.is_empty() {
        return Err(Error::Input("no iterations to supervise".into()));
    }
    let n_iter = preds.len();
    let mut total: Option<Tensor> = None;
    let (mut geo, mut sem) = (0.0, 0.0);
    let mut per_iteration = Vec::with_capacity(n_iter);
    for (i, levels) in preds.iter().enumerate() {
        if levels.is_empty() {
            return Err(Error::Input(format!("iteration {} has no levels", i + 1)));
        }
        let mut iter_geo: Option<Tensor> = None;
        let mut iter_sem: Option<Tensor> = None;
        for p in levels {
            let g = geometric_terms(&p.depth, &targets.depth, cfg, targets.valid.as_ref())?.total;
            let s = semantic_loss(&p.seg_logits, &targets.seg)?;
            iter_geo = Some(match iter_geo {
                Some(acc) => (acc + g)?,
                None => g,
            });
            iter_sem = Some(match iter_sem {
                Some(acc) => (acc + s)?,
                None => s,
            });
        }
        let scale = 1.0 / levels.len() as f64;
        let g = (iter_geo.expect("nonempty") * scale)?;
        let s = (iter_sem.expect("nonempty") * scale)?;
        let l = ((&g * cfg.alpha)? + (&s * cfg.beta)?)?;
        let w = cfg.iteration_weight(i + 1, n_iter);
        geo += w * g.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        sem += w * s.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        per_iteration.push(l.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        let weighted = (l * w)?;
        total = Some(match total {
            Some(acc) => (acc + weighted)?,
            None => weighted,
        });
    }
    Ok(LossBreakdown {
        total: total.expect("nonempty"),
        geo,
        sem,
        per_iteration,
    })
}

/// Full objective over every iteration state: heads are applied at each of
/// the four levels and upsampled to `size`.
pub fn total_loss(
    states: &[IterationState],
    heads: &Decoder,
    targets: &Targets,
    cfg: &LossConfig,
    size: usize,
) -> Result<LossBreakdown> {
    let preds = states
        .iter()
        .map(|st| {
            (0..4)
                .map(|l| heads.predict_level(st, l, size))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    combine_predictions(&preds, targets, cfg)
}
