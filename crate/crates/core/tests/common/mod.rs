//! Independent scalar reference implementations shared by the integration
//! tests and the acceptance gate.

#![allow(dead_code)]

use candle_core::{Device, Tensor};
use monofuse::fusion::AttentionParams;
use monofuse::nn::{Conv2d, Linear};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn tensor(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(candle_core::DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Attention parameters as plain buffers, mirrored into the library type.
#[derive(Debug, Clone)]
pub struct RawAttention {
    pub c: usize,
    pub hidden: usize,
    /// `[C, hidden]`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[hidden, C]`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// `[1, 2, 7, 7]`
    pub ws: Vec<f64>,
    pub bs: f64,
}

impl RawAttention {
    pub fn random(r: &mut ChaCha8Rng, c: usize, scale: f64) -> Self {
        let hidden = (c / 4).max(1);
        Self {
            c,
            hidden,
            w1: uniform(r, c * hidden, -scale, scale),
            b1: uniform(r, hidden, -scale, scale),
            w2: uniform(r, hidden * c, -scale, scale),
            b2: uniform(r, c, -scale, scale),
            ws: uniform(r, 2 * 49, -scale, scale),
            bs: r.random_range(-scale..scale),
        }
    }

    pub fn zeros(c: usize) -> Self {
        let hidden = (c / 4).max(1);
        Self {
            c,
            hidden,
            w1: vec![0.0; c * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * c],
            b2: vec![0.0; c],
            ws: vec![0.0; 98],
            bs: 0.0,
        }
    }

    pub fn to_params(&self) -> AttentionParams {
        AttentionParams {
            fc1: Linear {
                weight: tensor(&self.w1, &[self.c, self.hidden]),
                bias: tensor(&self.b1, &[self.hidden]),
            },
            fc2: Linear {
                weight: tensor(&self.w2, &[self.hidden, self.c]),
                bias: tensor(&self.b2, &[self.c]),
            },
            spatial: Conv2d {
                weight: tensor(&self.ws, &[1, 2, 7, 7]),
                bias: tensor(&[self.bs], &[1]),
                stride: 1,
                padding: 3,
            },
        }
    }

    fn mlp(&self, v: &[f64]) -> Vec<f64> {
        let hid: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let s: f64 = (0..self.c)
                    .map(|i| v[i] * self.w1[i * self.hidden + j])
                    .sum();
                (s + self.b1[j]).max(0.0)
            })
            .collect();
        (0..self.c)
            .map(|o| {
                (0..self.hidden)
                    .map(|j| hid[j] * self.w2[j * self.c + o])
                    .sum::<f64>()
                    + self.b2[o]
            })
            .collect()
    }

    /// Channel weights of one `[C, H, W]` sample.
    pub fn cam(&self, f: &[f64], h: usize, w: usize) -> Vec<f64> {
        let hw = h * w;
        let mut avg = vec![0.0; self.c];
        let mut max = vec![f64::NEG_INFINITY; self.c];
        for ch in 0..self.c {
            for p in 0..hw {
                let v = f[ch * hw + p];
                avg[ch] += v / hw as f64;
                if v > max[ch] {
                    max[ch] = v;
                }
            }
        }
        let a = self.mlp(&avg);
        let m = self.mlp(&max);
        a.iter().zip(&m).map(|(x, y)| sigmoid(x + y)).collect()
    }

    /// Spatial weights of one `[C, H, W]` sample by direct 7x7 sliding window.
    pub fn sam(&self, f: &[f64], h: usize, w: usize) -> Vec<f64> {
        let hw = h * w;
        let mut pooled = vec![0.0; 2 * hw];
        for p in 0..hw {
            let mut s = 0.0;
            let mut m = f64::NEG_INFINITY;
            for ch in 0..self.c {
                let v = f[ch * hw + p];
                s += v;
                m = m.max(v);
            }
            pooled[p] = s / self.c as f64;
            pooled[hw + p] = m;
        }
        let mut out = vec![0.0; hw];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = self.bs;
                for k in 0..2 {
                    for dy in -3..=3isize {
                        for dx in -3..=3isize {
                            let (yy, xx) = (y + dy, x + dx);
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            let wi = k * 49 + ((dy + 3) * 7 + dx + 3) as usize;
                            acc += self.ws[wi] * pooled[k * hw + (yy as usize) * w + xx as usize];
                        }
                    }
                }
                out[(y as usize) * w + x as usize] = sigmoid(acc);
            }
        }
        out
    }
}

/// Cross-task fusion of one sample pair, each `[C, H, W]`.
pub fn sgfm_oracle(
    fd: &[f64],
    fs: &[f64],
    pd: &RawAttention,
    ps: &RawAttention,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let cam_s = ps.cam(fs, h, w);
    let cam_d = pd.cam(fd, h, w);
    let fd1: Vec<f64> = (0..fd.len()).map(|i| fd[i] * cam_s[i / hw]).collect();
    let fs1: Vec<f64> = (0..fs.len()).map(|i| fs[i] * cam_d[i / hw]).collect();
    let sam_s = ps.sam(&fs1, h, w);
    let sam_d = pd.sam(&fd1, h, w);
    (
        (0..fd.len()).map(|i| fd1[i] * sam_s[i % hw]).collect(),
        (0..fs.len()).map(|i| fs1[i] * sam_d[i % hw]).collect(),
    )
}

/// RMSE, MAE and REL over valid pixels.
pub fn depth_metrics_oracle(pred: &[f64], gt: &[f64], valid: &[bool]) -> (f64, f64, f64) {
    let (mut se, mut ae, mut re, mut n) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..pred.len() {
        if valid[i] {
            let e = pred[i] - gt[i];
            se += e * e;
            ae += e.abs();
            re += e.abs() / gt[i];
            n += 1.0;
        }
    }
    ((se / n).sqrt(), ae / n, re / n)
}

/// Mean IoU over classes appearing in either mask.
pub fn iou_oracle(pred: &[u8], gt: &[u8], k: usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for c in 0..k as u8 {
        let inter = pred
            .iter()
            .zip(gt)
            .filter(|(p, g)| **p == c && **g == c)
            .count();
        let union = pred
            .iter()
            .zip(gt)
            .filter(|(p, g)| **p == c || **g == c)
            .count();
        if union > 0 {
            sum += inter as f64 / union as f64;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Pixel sets of the 4-connected regions of `mask == class`, by flood fill.
pub fn components_oracle(mask: &[u8], h: usize, w: usize, class: u8) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if mask[start] != class || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (y, x) = (p / w, p % w);
            let mut nb = Vec::new();
            if y > 0 {
                nb.push(p - w);
            }
            if y + 1 < h {
                nb.push(p + w);
            }
            if x > 0 {
                nb.push(p - 1);
            }
            if x + 1 < w {
                nb.push(p + 1);
            }
            for q in nb {
                if mask[q] == class && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        comp.sort();
        out.push(comp);
    }
    out
}

fn set_iou(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|p| b.contains(p)).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// All-point interpolated AP from ranked TP flags: sum over recall steps of
/// the maximum precision at any rank with at least that recall.
pub fn ap_oracle(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    let mut tp = 0.0;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1.0;
        }
        prec.push(tp / (i + 1) as f64);
        rec.push(tp / num_gt as f64);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (i, &r) in rec.iter().enumerate() {
        if r > prev_r {
            let best = prec[i..].iter().copied().fold(0.0, f64::max);
            ap += (r - prev_r) * best;
            prev_r = r;
        }
    }
    ap
}

/// mAP@0.5 over foreground classes of one image, in [0, 100].
pub fn map50_oracle(prob: &[f64], gt: &[u8], h: usize, w: usize, k: usize) -> Option<f64> {
    let hw = h * w;
    let pred: Vec<u8> = (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if prob[c * hw + p] > prob[best * hw + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    let mut aps = Vec::new();
    for c in 1..k {
        let pc = components_oracle(&pred, h, w, c as u8);
        let gc = components_oracle(gt, h, w, c as u8);
        if pc.is_empty() && gc.is_empty() {
            continue;
        }
        let mut scored: Vec<(f64, &Vec<usize>)> = pc
            .iter()
            .map(|comp| {
                let s = comp.iter().map(|&p| prob[c * hw + p]).sum::<f64>() / comp.len() as f64;
                (s, comp)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut used = vec![false; gc.len()];
        let mut flags = Vec::new();
        for (_, comp) in scored {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gc.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let v = set_iou(comp, g);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v > 0.5 => {
                    used[j] = true;
                    flags.push(true);
                }
                _ => flags.push(false),
            }
        }
        aps.push(ap_oracle(&flags, gc.len()));
    }
    (!aps.is_empty()).then(|| 100.0 * aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Geometric loss of a single `[H, W]` map by explicit loops.
pub fn geometric_oracle(d: &[f64], t: &[f64], h: usize, w: usize, wts: (f64, f64, f64)) -> f64 {
    let n = (h * w) as f64;
    let grad = |m: &[f64], y: usize, x: usize| {
        let gx = if x + 1 < w {
            m[y * w + x + 1] - m[y * w + x]
        } else {
            0.0
        };
        let gy = if y + 1 < h {
            m[(y + 1) * w + x] - m[y * w + x]
        } else {
            0.0
        };
        (gx, gy)
    };
    let normal = |(gx, gy): (f64, f64)| {
        let l = (gx * gx + gy * gy + 1.0).sqrt();
        [-gx / l, -gy / l, 1.0 / l]
    };
    let (mut se, mut gl, mut nl) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let e = d[y * w + x] - t[y * w + x];
            se += e * e;
            let (a, b) = (grad(d, y, x), grad(t, y, x));
            gl += (a.0 - b.0).abs() + (a.1 - b.1).abs();
            let (na, nb) = (normal(a), normal(b));
            nl += (0..3).map(|i| (na[i] - nb[i]).abs()).sum::<f64>();
        }
    }
    wts.0 * (se / n).sqrt() + wts.1 * gl / n + wts.2 * nl / n
}

/// Mean cross-entropy of `[K, H*W]` logits.
pub fn cross_entropy_oracle(logits: &[f64], target: &[u32], k: usize) -> f64 {
    let hw = target.len();
    let mut total = 0.0;
    for p in 0..hw {
        let m = (0..k)
            .map(|c| logits[c * hw + p])
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = m
            + (0..k)
                .map(|c| (logits[c * hw + p] - m).exp())
                .sum::<f64>()
                .ln();
        total += lse - logits[target[p] as usize * hw + p];
    }
    total / hw as f64
}

/// Maximum relative error between analytic and central-difference gradients
/// of `f` at `x`, using `max(|a|, |n|, 1e-6)` as the scale.
pub fn gradient_check(f: &dyn Fn(&Tensor) -> Tensor, x: &[f64], shape: &[usize], eps: f64) -> f64 {
    let var = candle_core::Var::from_tensor(&tensor(x, shape)).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let analytic = values(grads.get(var.as_tensor()).unwrap());
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        xp[i] += eps;
        let mut xm = x.to_vec();
        xm[i] -= eps;
        let num = (scalar(&f(&tensor(&xp, shape))) - scalar(&f(&tensor(&xm, shape)))) / (2.0 * eps);
        let scale = analytic[i].abs().max(num.abs()).max(1e-6);
        worst = worst.max((analytic[i] - num).abs() / scale);
    }
    worst
}

/// Max absolute deviation of `channel_attention`, `spatial_attention` and
/// `sgfm` from the scalar oracles over random `[2, 4, 4]` features.
pub fn fusion_oracle_errors(seeds: std::ops::Range<u64>) -> (f64, f64, f64) {
    use monofuse::fusion::{channel_attention, sgfm, spatial_attention};
    let (c, h, w) = (2, 4, 4);
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for seed in seeds {
        let mut r = rng(seed);
        let fd = uniform(&mut r, c * h * w, -2.0, 2.0);
        let fs = uniform(&mut r, c * h * w, -2.0, 2.0);
        let pd = RawAttention::random(&mut r, c, 1.0);
        let ps = RawAttention::random(&mut r, c, 1.0);
        let (td, ts) = (tensor(&fd, &[1, c, h, w]), tensor(&fs, &[1, c, h, w]));
        let (qd, qs) = (pd.to_params(), ps.to_params());
        let dev = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };

        let cam = values(&channel_attention(&td, &qd).unwrap());
        worst.0 = worst.0.max(dev(&cam, &pd.cam(&fd, h, w)));
        let sam = values(&spatial_attention(&td, &qd).unwrap());
        worst.1 = worst.1.max(dev(&sam, &pd.sam(&fd, h, w)));
        let (od, os) = sgfm(&td, &ts, &qd, &qs).unwrap();
        let (wd, ws) = sgfm_oracle(&fd, &fs, &pd, &ps, h, w);
        worst.2 = worst
            .2
            .max(dev(&values(&od), &wd))
            .max(dev(&values(&os), &ws));
    }
    worst
}

/// Max absolute deviation of `depth_metrics`, `iou` and `map50` from the
/// naive references on random 8x8 instances. Returns the errors and the
/// number of instances on which mAP was defined.
pub fn metric_oracle_errors(seeds: std::ops::Range<u64>) -> (f64, f64, f64, usize) {
    use monofuse::metrics::{argmax_classes, depth_metrics, iou, map50};
    let (h, w, k) = (8, 8, 3);
    let hw = h * w;
    let mut worst = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for seed in seeds {
        let mut r = rng(seed);
        let pred = uniform(&mut r, hw, 0.0, 1.0);
        let gt = uniform(&mut r, hw, 0.05, 1.0);
        let valid: Vec<bool> = (0..hw).map(|_| r.random_bool(0.8)).collect();
        let valid = if valid.iter().any(|&v| v) {
            valid
        } else {
            vec![true; hw]
        };
        let got = depth_metrics(&pred, &gt, &valid).unwrap();
        let want = depth_metrics_oracle(&pred, &gt, &valid);
        worst.0 = worst
            .0
            .max((got.rmse - want.0).abs())
            .max((got.mae - want.1).abs())
            .max((got.rel - want.2).abs());

        let gt_mask: Vec<u8> = (0..hw).map(|_| r.random_range(0..k as u8)).collect();
        let blobby = r.random_bool(0.5);
        let prob: Vec<f64> = if blobby {
            let mut p = uniform(&mut r, k * hw, 0.0, 0.2);
            for q in 0..hw {
                p[gt_mask[q] as usize * hw + q] += if r.random_bool(0.85) { 1.0 } else { 0.0 };
            }
            p
        } else {
            uniform(&mut r, k * hw, 0.0, 1.0)
        };
        let pm = argmax_classes(&prob, k, hw);
        let a = iou(&pm, &gt_mask, k).unwrap();
        let b = iou_oracle(&pm, &gt_mask, k);
        worst.1 = worst.1.max(match (a, b) {
            (Some(x), Some(y)) => (x - y).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        });
        let a = map50(&prob, &gt_mask, h, w, k).unwrap();
        let b = map50_oracle(&prob, &gt_mask, h, w, k);
        worst.2 = worst.2.max(match (a, b) {
            (Some(x), Some(y)) => {
                worst.3 += 1;
                (x - y).abs()
            }
            (None, None) => 0.0,
            _ => f64::INFINITY,
        });
    }
    worst
}

/// Hand-evaluated ranked example on a 1x20 strip with one GT object
/// (pixels 0..10). Prediction A covers 0..8 (IoU 0.8) with score 0.9;
/// prediction B covers 9..12 (IoU 1/12) with score 0.6. The TP is ranked
/// first and reaches full recall, so AP = 100.
pub fn ranked_example_map() -> f64 {
    use monofuse::metrics::map50;
    let (h, w, k) = (1, 20, 2);
    let mut gt = vec![0u8; w];
    for p in gt.iter_mut().take(10) {
        *p = 1;
    }
    let mut prob = vec![0.0; k * w];
    for p in 0..w {
        let fg = if p < 8 {
            0.9
        } else if (9..12).contains(&p) {
            0.6
        } else {
            0.1
        };
        prob[w + p] = fg;
        prob[p] = 1.0 - fg;
    }
    map50(&prob, &gt, h, w, k).unwrap().unwrap()
}

/// Worst relative gradient error of each geometric term and of the
/// cross-entropy, on random 4x4 instances.
pub fn loss_gradient_errors(seeds: std::ops::Range<u64>) -> ([f64; 4], f64) {
    use monofuse::losses::{geometric_terms, semantic_loss, LossConfig};
    let cfg = LossConfig::default();
    let mut geo = [0.0f64; 4];
    let mut sem = 0.0f64;
    for seed in seeds {
        let mut r = rng(seed);
        let d = uniform(&mut r, 16, 0.1, 1.0);
        let t = tensor(&uniform(&mut r, 16, 0.1, 1.0), &[1, 4, 4]);
        for (i, slot) in geo.iter_mut().enumerate() {
            let t = t.clone();
            let cfg = cfg.clone();
            let f = move |x: &Tensor| {
                let g = geometric_terms(x, &t, &cfg, None).unwrap();
                [g.value, g.gradient, g.normal, g.total][i].clone()
            };
            *slot = slot.max(gradient_check(&f, &d, &[1, 4, 4], 1e-6));
        }
        let logits = uniform(&mut r, 3 * 16, -3.0, 3.0);
        let target: Vec<u32> = (0..16).map(|_| r.random_range(0..3)).collect();
        let tt = Tensor::from_vec(target, (1, 4, 4), &Device::Cpu).unwrap();
        let f = move |x: &Tensor| semantic_loss(x, &tt).unwrap();
        sem = sem.max(gradient_check(&f, &logits, &[1, 3, 4, 4], 1e-6));
    }
    (geo, sem)
}

/// Worst relative gradient error through one SGFM application, with
/// respect to both branch inputs, on random `[1, 2, 4, 4]` features.
pub fn sgfm_gradient_error(seeds: std::ops::Range<u64>) -> f64 {
    use monofuse::fusion::sgfm;
    let shape = [1, 2, 4, 4];
    let mut worst = 0.0f64;
    for seed in seeds {
        let mut r = rng(seed);
        let fd = uniform(&mut r, 32, -2.0, 2.0);
        let fs = uniform(&mut r, 32, -2.0, 2.0);
        let pd = RawAttention::random(&mut r, 2, 1.0).to_params();
        let ps = RawAttention::random(&mut r, 2, 1.0).to_params();
        let probe_d = tensor(&uniform(&mut r, 32, -1.0, 1.0), &shape);
        let probe_s = tensor(&uniform(&mut r, 32, -1.0, 1.0), &shape);
        let objective = |od: Tensor, os: Tensor| {
            ((od * &probe_d).unwrap().sum_all().unwrap()
                + (os * &probe_s).unwrap().sum_all().unwrap())
            .unwrap()
        };
        let fs_t = tensor(&fs, &shape);
        let f = |x: &Tensor| {
            let (od, os) = sgfm(x, &fs_t, &pd, &ps).unwrap();
            objective(od, os)
        };
        worst = worst.max(gradient_check(&f, &fd, &shape, 1e-6));
        let fd_t = tensor(&fd, &shape);
        let f = |x: &Tensor| {
            let (od, os) = sgfm(&fd_t, x, &pd, &ps).unwrap();
            objective(od, os)
        };
        worst = worst.max(gradient_check(&f, &fs, &shape, 1e-6));
    }
    worst
}
