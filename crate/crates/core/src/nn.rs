//! Parameter storage and the handful of differentiable building blocks the
//! model is assembled from.
//!
//! Every block is differentiable end to end. Layer norm, softmax and sigmoid
//! are composed from plain `candle_core` ops, and the im2col lowering of
//! convolutions carries its own adjoint.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Gaussian with the given standard deviation.
    Normal(f64),
}

/// Named trainable parameters, kept sorted by name.
///
/// Module structs hold clones of the underlying tensors; `Var::set` writes
/// in place, so optimizer updates are visible to every holder.
#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar trainable parameters.
    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite a parameter's value. Shape must match.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} does not match stored {:?}",
                value.dims(),
                var.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Set every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&self, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, var) in self.vars.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            var.set(&var.as_tensor().zeros_like()?)?;
            n += 1;
        }
        Ok(n)
    }

    pub fn builder(&mut self, seed: u64) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: String::new(),
        }
    }
}

/// Creates parameters under a hierarchical name prefix, drawing initial values
/// from a seeded generator in creation order.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: String,
}

/// A scoped view of a [`ParamBuilder`]; dropping it restores the parent prefix.
pub struct Scope<'b, 'a> {
    builder: &'b mut ParamBuilder<'a>,
    saved_len: usize,
}

impl<'a> ParamBuilder<'a> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> Scope<'_, 'a> {
        let saved_len = self.prefix.len();
        if !self.prefix.is_empty() {
            self.prefix.push('.');
        }
        self.prefix.push_str(name.as_ref());
        Scope {
            builder: self,
            saved_len,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        if self.store.vars.contains_key(&full) {
            return Err(Error::Config(format!("duplicate parameter {full}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| std * standard_normal(&mut self.rng))
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.store.vars.insert(full, var);
        Ok(handle)
    }
}

impl<'b, 'a> std::ops::Deref for Scope<'b, 'a> {
    type Target = ParamBuilder<'a>;
    fn deref(&self) -> &Self::Target {
        self.builder
    }
}

impl<'b, 'a> std::ops::DerefMut for Scope<'b, 'a> {
    fn deref_mut(&mut self) -> &mut Self::Target {
        self.builder
    }
}

impl Drop for Scope<'_, '_> {
    fn drop(&mut self) {
        self.builder.prefix.truncate(self.saved_len);
    }
}

// Box-Muller; keeps us off rand_distr for a single distribution.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Default fan-in scaled uniform bound.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Dense layer over the last axis. Weight stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = fan_in_bound(in_dim);
        Ok(Self {
            weight: b.param("weight", &[in_dim, out_dim], Init::Uniform(bound))?,
            bias: b.param("bias", &[out_dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

/// 2-D convolution with bias, square kernel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        b: &mut ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::with_bias(b, in_ch, out_ch, kernel, stride, padding, Init::Zeros)
    }

    pub fn with_bias(
        b: &mut ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias_init: Init,
    ) -> Result<Self> {
        let bound = fan_in_bound(in_ch * kernel * kernel);
        Ok(Self {
            weight: b.param(
                "weight",
                &[out_ch, in_ch, kernel, kernel],
                Init::Uniform(bound),
            )?,
            bias: b.param("bias", &[out_ch], bias_init)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d_gemm(x, &self.weight, self.stride, self.padding)?;
        add_channel_bias(&y, &self.bias)
    }
}

/// Geometry of a stride-1 patch unfold.
#[derive(Debug, Clone, Copy)]
struct Unfold {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    padding: usize,
}

impl Unfold {
    fn out_hw(&self) -> (usize, usize) {
        (
            self.height + 2 * self.padding + 1 - self.kernel,
            self.width + 2 * self.padding + 1 - self.kernel,
        )
    }

    fn cols_shape(&self) -> Shape {
        let (ho, wo) = self.out_hw();
        Shape::from((
            self.batch,
            self.channels * self.kernel * self.kernel,
            ho * wo,
        ))
    }

    fn image_shape(&self) -> Shape {
        Shape::from((self.batch, self.channels, self.height, self.width))
    }

    /// Calls `f(image_index, cols_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = self.out_hw();
        let (k, p) = (self.kernel, self.padding as isize);
        let (h, w) = (self.height as isize, self.width as isize);
        let plane = self.height * self.width;
        for b in 0..self.batch {
            for c in 0..self.channels {
                let img = (b * self.channels + c) * plane;
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ((b * self.channels + c) * k * k + ky * k + kx) * ho * wo;
                        for oy in 0..ho {
                            let iy = oy as isize + ky as isize - p;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            for ox in 0..wo {
                                let ix = ox as isize + kx as isize - p;
                                if ix >= 0 && ix < w {
                                    f(
                                        img + iy as usize * self.width + ix as usize,
                                        row + oy * wo + ox,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn unfold<T: Copy + Default>(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.cols_shape().elem_count()];
        self.for_each_tap(|i, o| out[o] = x[i]);
        out
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.image_shape().elem_count()];
        self.for_each_tap(|i, o| out[i] += cols[o]);
        out
    }
}

fn contiguous_slice<'a, T: candle_core::WithDType>(
    s: &'a CpuStorage,
    l: &Layout,
) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => Err(candle_core::Error::RequiresContiguous { op: "unfold" }),
    }
}

/// `[B, C, H, W] -> [B, C*k*k, Ho*Wo]`.
struct Im2Col(Unfold);

/// Adjoint of [`Im2Col`]: scatter-adds columns back onto the image.
struct Col2Im(Unfold);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(self.0.unfold(contiguous_slice::<f32>(s, l)?)),
            CpuStorage::F64(_) => CpuStorage::F64(self.0.unfold(contiguous_slice::<f64>(s, l)?)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32/f64".into())),
        };
        Ok((out, self.0.cols_shape()))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(self.0.fold(contiguous_slice::<f32>(s, l)?)),
            CpuStorage::F64(_) => CpuStorage::F64(self.0.fold(contiguous_slice::<f64>(s, l)?)),
            _ => return Err(candle_core::Error::Msg("col2im supports f32/f64".into())),
        };
        Ok((out, self.0.image_shape()))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Convolution lowered to a single matrix product over unfolded patches.
/// Handles stride-1 kernels with any padding and `kernel == stride`
/// patchification; other geometries use the direct convolution.
pub fn conv2d_gemm(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, ci, k, _) = weight.dims4()?;
    if ci != c {
        return Err(Error::Input(format!(
            "convolution expects {ci} input channels, got {c}"
        )));
    }
    let (cols, ho, wo) = if stride == 1 && k == 1 && padding == 0 {
        (x.reshape((b, c, h * w))?, h, w)
    } else if stride == 1 {
        let geo = Unfold {
            batch: b,
            channels: c,
            height: h,
            width: w,
            kernel: k,
            padding,
        };
        let (ho, wo) = geo.out_hw();
        (x.contiguous()?.apply_op1(Im2Col(geo))?, ho, wo)
    } else if k == stride && padding == 0 && h % k == 0 && w % k == 0 {
        let (ho, wo) = (h / k, w / k);
        let cols = x
            .reshape((b, c, ho, k, wo, k))?
            .permute((0, 1, 3, 5, 2, 4))?
            .reshape((b, c * k * k, ho * wo))?;
        (cols, ho, wo)
    } else {
        return Ok(x.conv2d(weight, padding, stride, 1, 1)?);
    };
    let wm = weight.reshape((o, c * k * k))?;
    Ok(wm.broadcast_matmul(&cols)?.reshape((b, o, ho, wo))?)
}

/// Transposed convolution with `kernel == stride` as a matrix product
/// followed by a pixel shuffle.
pub fn conv_transpose2d_gemm(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (ci, o, f, _) = weight.dims4()?;
    if ci != c {
        return Err(Error::Input(format!(
            "transposed convolution expects {ci} input channels, got {c}"
        )));
    }
    let wm = weight.reshape((c, o * f * f))?.t()?;
    let y = wm.broadcast_matmul(&x.reshape((b, c, h * w))?)?;
    Ok(y.reshape((b, o, f, f, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, o, h * f, w * f))?)
}

/// Transposed convolution with `kernel == stride`, i.e. an exact integer upscale.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(b: &mut ParamBuilder, in_ch: usize, out_ch: usize, factor: usize) -> Result<Self> {
        let bound = fan_in_bound(in_ch * factor * factor);
        Ok(Self {
            weight: b.param(
                "weight",
                &[in_ch, out_ch, factor, factor],
                Init::Uniform(bound),
            )?,
            bias: b.param("bias", &[out_ch], Init::Zeros)?,
            stride: factor,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv_transpose2d_gemm(x, &self.weight)?;
        add_channel_bias(&y, &self.bias)
    }
}

fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = bias.dim(0)?;
    Ok(x.broadcast_add(&bias.reshape((1, c, 1, 1))?)?)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param("gamma", &[dim], Init::Const(1.0))?,
            beta: b.param("beta", &[dim], Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Numerically stable softmax over the last axis. The subtracted max is
/// detached; it cancels analytically.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Numerically stable log-softmax over `dim`.
pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Row-stochastic bilinear interpolation matrix `[out, in]` with half-pixel
/// centres (the `align_corners = false` convention).
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let w1 = src - i0 as f64;
        m[o * in_len + i0] += 1.0 - w1;
        m[o * in_len + i1] += w1;
    }
    m
}

/// Bilinear resize of a `[B, C, h, w]` tensor to `[B, C, out_h, out_w]`,
/// written as two matrix products so it stays differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let (dtype, dev) = (x.dtype(), x.device());
    let mw = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?.to_dtype(dtype)?;
    let mh = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(dtype)?;
    let y = x.reshape((b * c * h, w))?.matmul(&mw.t()?)?;
    let y = y
        .reshape((b * c, h, out_w))?
        .transpose(1, 2)?
        .contiguous()?;
    let y = y.reshape((b * c * out_w, h))?.matmul(&mh.t()?)?;
    Ok(y.reshape((b, c, out_w, out_h))?
        .transpose(2, 3)?
        .contiguous()?)
}
