//! Batched inference and dataset-level evaluation.

use candle_core::DType;

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::harness::train::make_batch;
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::model::Model;

/// Per-image network output in plain buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrediction {
    /// `[H, W]` normalized depth.
    pub depth: Vec<f64>,
    /// `[K, H, W]` class probabilities.
    pub prob: Vec<f64>,
}

/// Softmax over the leading class axis of a `[K, H*W]` buffer.
pub fn class_softmax(logits: &[f64], num_classes: usize) -> Vec<f64> {
    let hw = logits.len() / num_classes;
    let mut out = vec![0.0; logits.len()];
    for p in 0..hw {
        let m = (0..num_classes)
            .map(|k| logits[k * hw + p])
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..num_classes)
            .map(|k| (logits[k * hw + p] - m).exp())
            .sum();
        for k in 0..num_classes {
            out[k * hw + p] = (logits[k * hw + p] - m).exp() / z;
        }
    }
    out
}

/// Runs the model on `samples` in batches of `batch_size`.
pub fn infer(
    model: &Model,
    samples: &[ImageSample],
    batch_size: usize,
) -> Result<Vec<ImagePrediction>> {
    let k = model.config().decoder.num_classes;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let (images, _) = make_batch(model, &refs)?;
        let pred = model.predict(&images)?;
        let depth = pred.depth.to_dtype(DType::F64)?.flatten_to(0)?;
        let logits = pred.seg_logits.to_dtype(DType::F64)?.flatten_from(1)?;
        for i in 0..chunk.len() {
            out.push(ImagePrediction {
                depth: depth.get(i)?.flatten_all()?.to_vec1()?,
                prob: class_softmax(&logits.get(i)?.to_vec1()?, k),
            });
        }
    }
    Ok(out)
}

/// Ground truth presented as a prediction: the evaluation upper bound.
pub fn oracle_prediction(sample: &ImageSample, num_classes: usize) -> ImagePrediction {
    let hw = sample.pixels();
    let mut prob = vec![0.0; num_classes * hw];
    for (p, &c) in sample.seg.iter().enumerate() {
        prob[c as usize * hw + p] = 1.0;
    }
    ImagePrediction {
        depth: sample.depth.iter().map(|&d| d as f64).collect(),
        prob,
    }
}

/// Aggregates metrics over a dataset. Pixels with ground-truth depth
/// `<= 0` are treated as invalid.
pub fn evaluate(
    model: &Model,
    samples: &[ImageSample],
    batch_size: usize,
    oracle: bool,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = model.config().decoder.num_classes;
    let preds = if oracle {
        samples.iter().map(|s| oracle_prediction(s, k)).collect()
    } else {
        infer(model, samples, batch_size)?
    };
    let mut acc = MetricsAccumulator::new();
    for (s, p) in samples.iter().zip(&preds) {
        let gt: Vec<f64> = s.depth.iter().map(|&d| d as f64).collect();
        let valid: Vec<bool> = gt.iter().map(|&d| d > 0.0).collect();
        acc.push(&p.depth, &gt, &valid, &p.prob, &s.seg, s.size, s.size, k)
            .map_err(|e| Error::Sample {
                id: s.id.clone(),
                msg: e.to_string(),
            })?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_columns_sum_to_one() {
        let p = class_softmax(&[0.0, 1.0, 2.0, 0.0, -1.0, 5.0], 2);
        for i in 0..3 {
            assert!((p[i] + p[3 + i] - 1.0).abs() < 1e-12);
        }
        assert!((p[0] - 0.5).abs() < 1e-12);
    }
}
