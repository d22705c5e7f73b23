//! Depth errors (RMSE, MAE, REL) and segmentation scores (mean IoU, mAP at
//! IoU > 0.5 over connected-component instances).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strict IoU threshold for a true positive.
pub const MAP_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthErrors {
    pub rmse: f64,
    pub mae: f64,
    pub rel: f64,
}

/// Depth errors over pixels where `valid` is true.
pub fn depth_metrics(pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<DepthErrors> {
    if pred.len() != gt.len() || gt.len() != valid.len() {
        return Err(Error::Metric(format!(
            "length mismatch: pred {}, gt {}, valid {}",
            pred.len(),
            gt.len(),
            valid.len()
        )));
    }
    let (mut sq, mut abs, mut rel, mut n) = (0.0, 0.0, 0.0, 0usize);
    for ((&p, &g), &v) in pred.iter().zip(gt).zip(valid) {
        if !v {
            continue;
        }
        if g <= 0.0 {
            return Err(Error::Metric(format!(
                "nonpositive ground-truth depth {g} under relative error"
            )));
        }
        let e = p - g;
        sq += e * e;
        abs += e.abs();
        rel += e.abs() / g;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Metric("empty validity mask".into()));
    }
    let n = n as f64;
    Ok(DepthErrors {
        rmse: (sq / n).sqrt(),
        mae: abs / n,
        rel: rel / n,
    })
}

fn check_ids(mask: &[u8], num_classes: usize, what: &str) -> Result<()> {
    if let Some(&bad) = mask.iter().find(|&&c| c as usize >= num_classes) {
        return Err(Error::Metric(format!(
            "{what} class id {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

/// Mean IoU over classes present in either mask; `None` when no class is
/// present at all (empty masks).
pub fn iou(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<Option<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::Metric("mask length mismatch".into()));
    }
    check_ids(pred, num_classes, "predicted")?;
    check_ids(gt, num_classes, "ground-truth")?;
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[g as usize] += 1;
        }
    }
    let ratios: Vec<f64> = inter
        .iter()
        .zip(&union)
        .filter(|(_, &u)| u > 0)
        .map(|(&i, &u)| i as f64 / u as f64)
        .collect();
    if ratios.is_empty() {
        return Ok(None);
    }
    Ok(Some(ratios.iter().sum::<f64>() / ratios.len() as f64))
}

/// 4-connected components of `mask == class`. Returns per-pixel labels
/// (`u32::MAX` for other pixels) and the component count, labels assigned in
/// raster order of each component's first pixel.
pub fn connected_components(
    mask: &[u8],
    height: usize,
    width: usize,
    class: u8,
) -> (Vec<u32>, usize) {
    let mut labels = vec![u32::MAX; mask.len()];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if mask[start] != class || labels[start] != u32::MAX {
            continue;
        }
        labels[start] = count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / width, p % width);
            let mut visit = |q: usize| {
                if mask[q] == class && labels[q] == u32::MAX {
                    labels[q] = count;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        count += 1;
    }
    (labels, count as usize)
}

/// Average precision (all-point interpolation) from detections already
/// sorted by descending score, each flagged true/false positive.
pub fn average_precision(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// One predicted instance: pixel indices and a confidence score.
#[derive(Debug, Clone)]
pub struct Instance {
    pub pixels: Vec<usize>,
    pub score: f64,
}

fn instances(labels: &[u32], count: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); count];
    for (p, &l) in labels.iter().enumerate() {
        if l != u32::MAX {
            out[l as usize].push(p);
        }
    }
    out
}

fn pixel_iou(a: &[usize], b_mask: &[bool], b_len: usize) -> f64 {
    let inter = a.iter().filter(|&&p| b_mask[p]).count();
    let union = a.len() + b_len - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy score-ranked matching of predicted instances to ground-truth
/// instances; returns true-positive flags in ranked order.
pub fn match_instances(preds: &[Instance], gts: &[Vec<usize>], num_pixels: usize) -> Vec<bool> {
    let gt_masks: Vec<Vec<bool>> = gts
        .iter()
        .map(|g| {
            let mut m = vec![false; num_pixels];
            for &p in g {
                m[p] = true;
            }
            m
        })
        .collect();
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut matched = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let best = (0..gts.len())
                .filter(|&g| !matched[g])
                .map(|g| (g, pixel_iou(&preds[i].pixels, &gt_masks[g], gts[g].len())))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((g, v)) if v > MAP_IOU_THRESHOLD => {
                    matched[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// mAP at IoU > 0.5 over non-background classes, in [0, 100]. `prob` is
/// `[K, H, W]` class probabilities, channel-major. Returns `None` when no
/// foreground class has either predictions or ground truth.
pub fn map50(
    prob: &[f64],
    gt: &[u8],
    height: usize,
    width: usize,
    num_classes: usize,
) -> Result<Option<f64>> {
    let hw = height * width;
    if prob.len() != num_classes * hw || gt.len() != hw {
        return Err(Error::Metric(format!(
            "map50 expects prob [{num_classes}, {height}, {width}] and matching gt"
        )));
    }
    check_ids(gt, num_classes, "ground-truth")?;
    let pred = argmax_classes(prob, num_classes, hw);
    let mut aps = Vec::new();
    for class in 1..num_classes {
        let (pl, pc) = connected_components(&pred, height, width, class as u8);
        let (gl, gc) = connected_components(gt, height, width, class as u8);
        if pc == 0 && gc == 0 {
            continue;
        }
        let plane = &prob[class * hw..(class + 1) * hw];
        let preds: Vec<Instance> = instances(&pl, pc)
            .into_iter()
            .map(|pixels| {
                let score = pixels.iter().map(|&p| plane[p]).sum::<f64>() / pixels.len() as f64;
                Instance { pixels, score }
            })
            .collect();
        let gts = instances(&gl, gc);
        let flags = match_instances(&preds, &gts, hw);
        aps.push(average_precision(&flags, gc));
    }
    if aps.is_empty() {
        return Ok(None);
    }
    Ok(Some(100.0 * aps.iter().sum::<f64>() / aps.len() as f64))
}

/// Per-pixel argmax over `[K, H*W]` scores; ties go to the lower class id.
pub fn argmax_classes(scores: &[f64], num_classes: usize, hw: usize) -> Vec<u8> {
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..num_classes {
                if scores[k * hw + p] > scores[best * hw + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// Dataset-level summary: per-image metrics averaged uniformly over images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    pub rel: f64,
    pub iou: f64,
    pub map50: f64,
    pub sample_count: usize,
}

/// Per-image results collected before aggregation.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    depth: Vec<DepthErrors>,
    iou: Vec<f64>,
    map: Vec<f64>,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one image. `prob` is `[K, H, W]`; `valid` marks pixels with
    /// usable ground-truth depth.
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        depth: &[f64],
        depth_gt: &[f64],
        valid: &[bool],
        prob: &[f64],
        seg_gt: &[u8],
        height: usize,
        width: usize,
        num_classes: usize,
    ) -> Result<()> {
        self.depth.push(depth_metrics(depth, depth_gt, valid)?);
        let pred = argmax_classes(prob, num_classes, height * width);
        if let Some(v) = iou(&pred, seg_gt, num_classes)? {
            self.iou.push(v);
        }
        if let Some(v) = map50(prob, seg_gt, height, width, num_classes)? {
            self.map.push(v);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        if self.depth.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let col = |f: fn(&DepthErrors) -> f64| mean(&self.depth.iter().map(f).collect::<Vec<_>>());
        Ok(MetricsReport {
            rmse: col(|d| d.rmse),
            mae: col(|d| d.mae),
            rel: col(|d| d.rel),
            iou: mean(&self.iou),
            map50: mean(&self.map),
            sample_count: self.depth.len(),
        })
    }
}
