//! Mini-batch training with per-step JSON-lines logging and per-epoch
//! checkpoints.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::TrainConfig;
use crate::harness::optim::Adam;
use crate::losses::{total_loss, Targets};
use crate::model::Model;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.safetensors";

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_geo: f64,
    pub loss_sem: f64,
    pub per_iteration: Vec<f64>,
}

/// Sample order for one epoch; a pure function of `(seed, epoch, n)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Stacks samples into an image batch and loss targets in `dtype`.
pub fn make_batch(model: &Model, samples: &[&ImageSample]) -> Result<(Tensor, Targets)> {
    let s = model.config().image_size();
    let num_classes = model.config().decoder.num_classes;
    for smp in samples {
        if smp.size != s {
            return Err(Error::Sample {
                id: smp.id.clone(),
                msg: format!("size {} does not match model image size {s}", smp.size),
            });
        }
        smp.check(num_classes)?;
    }
    let rgb: Vec<&[f32]> = samples.iter().map(|x| x.rgb.as_slice()).collect();
    let images = model.image_batch(&rgb)?;
    let b = samples.len();
    let depth: Vec<f32> = samples
        .iter()
        .flat_map(|x| x.depth.iter().copied())
        .collect();
    let seg: Vec<u32> = samples
        .iter()
        .flat_map(|x| x.seg.iter().map(|&c| c as u32))
        .collect();
    let depth =
        Tensor::from_vec(depth, (b, s, s), &Device::Cpu)?.to_dtype(model.params().dtype())?;
    let seg = Tensor::from_vec(seg, (b, s, s), &Device::Cpu)?;
    Ok((
        images,
        Targets {
            depth,
            seg,
            valid: None,
        },
    ))
}

pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    adam: Adam,
    samples: Vec<ImageSample>,
    /// Completed epochs.
    epoch: usize,
    /// Batches of the current epoch already consumed.
    batch_offset: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, samples: Vec<ImageSample>) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg.model, cfg.precision.dtype(), cfg.seed)?;
        let adam = Adam::new(cfg.learning_rate, cfg.adam.clone());
        Self::assemble(cfg, model, adam, samples, 0, 0)
    }

    /// Continues exactly where the checkpoint left off.
    pub fn resume(ck: &Checkpoint, samples: Vec<ImageSample>) -> Result<Self> {
        let model = ck.build_model()?;
        let adam = ck.restore_optimizer();
        Self::assemble(
            ck.meta.config.clone(),
            model,
            adam,
            samples,
            ck.meta.epoch,
            ck.meta.batch_offset,
        )
    }

    fn assemble(
        cfg: TrainConfig,
        model: Model,
        adam: Adam,
        samples: Vec<ImageSample>,
        epoch: usize,
        batch_offset: usize,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let k = cfg.model.decoder.num_classes;
        for s in &samples {
            s.check(k)?;
            if s.size != cfg.model.image_size() {
                return Err(Error::Sample {
                    id: s.id.clone(),
                    msg: format!(
                        "size {} != configured image size {}",
                        s.size,
                        cfg.model.image_size()
                    ),
                });
            }
        }
        Ok(Self {
            cfg,
            model,
            adam,
            samples,
            epoch,
            batch_offset,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.adam.step
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(
            &self.model,
            &self.adam,
            self.epoch,
            self.batch_offset,
            &self.cfg,
        )
    }

    fn batches_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.cfg.batch_size)
    }

    fn limit_reached(&self) -> bool {
        self.cfg.max_steps > 0 && self.adam.step >= self.cfg.max_steps as u64
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs || self.limit_reached()
    }

    /// Forward, loss, backward and one Adam update on the given sample
    /// indices.
    pub fn train_step(&mut self, indices: &[usize]) -> Result<StepLog> {
        let batch: Vec<&ImageSample> = indices.iter().map(|&i| &self.samples[i]).collect();
        let (images, targets) = make_batch(&self.model, &batch)?;
        let out = self.model.forward(&images)?;
        let loss = total_loss(
            &out.states,
            self.model.decoder(),
            &targets,
            &self.cfg.loss,
            self.model.config().image_size(),
        )?;
        let total = loss.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !total.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
            return Err(Error::NonFiniteLoss {
                value: total,
                batch: ids.join(", "),
            });
        }
        let grads = loss.total.backward()?;
        self.adam.step(self.model.params(), &grads)?;
        Ok(StepLog {
            step: self.adam.step,
            epoch: self.epoch + 1,
            loss_total: total,
            loss_geo: loss.geo,
            loss_sem: loss.sem,
            per_iteration: loss.per_iteration,
        })
    }

    /// Runs the next batch of the current epoch. Returns `None` once training
    /// is finished.
    pub fn next_step(&mut self) -> Result<Option<StepLog>> {
        if self.finished() {
            return Ok(None);
        }
        let order = epoch_order(self.cfg.seed, self.epoch, self.samples.len());
        let bs = self.cfg.batch_size;
        let start = self.batch_offset * bs;
        let indices = order[start..(start + bs).min(order.len())].to_vec();
        let log = self.train_step(&indices)?;
        self.batch_offset += 1;
        if self.batch_offset == self.batches_per_epoch() {
            self.batch_offset = 0;
            self.epoch += 1;
        }
        Ok(Some(log))
    }

    /// Trains to completion, calling `on_step` after every step and
    /// `on_epoch` after every completed epoch (and once more if `max_steps`
    /// stops training mid-epoch).
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&StepLog) -> Result<()>,
        mut on_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while let Some(log) = self.next_step()? {
            on_step(&log)?;
            if self.batch_offset == 0 || self.limit_reached() {
                on_epoch(self)?;
            }
        }
        Ok(())
    }

    /// Trains to completion writing `train_log.jsonl` (appending when
    /// resuming), `epoch_NNN.safetensors` per epoch and `last.safetensors`
    /// into the checkpoint directory.
    pub fn fit(&mut self) -> Result<PathBuf> {
        let dir = self.cfg.checkpoint_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let log_path = dir.join(LOG_FILE);
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(self.adam.step > 0)
            .write(true)
            .truncate(self.adam.step == 0)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let mut writer = BufWriter::new(file);
        let interval = self.cfg.log_interval as u64;
        let last = dir.join(LAST_CHECKPOINT);
        self.run(
            |log| {
                if log.step % interval == 0 {
                    writeln!(writer, "{}", serde_json::to_string(log)?)
                        .and_then(|_| writer.flush())
                        .map_err(|e| Error::io(&log_path, e))?;
                }
                Ok(())
            },
            |t| {
                let ck = t.checkpoint()?;
                if t.batch_offset == 0 {
                    ck.save(&epoch_checkpoint_path(&dir, t.epoch))?;
                }
                ck.save(&last)
            },
        )?;
        if !last.exists() {
            self.checkpoint()?.save(&last)?;
        }
        Ok(last)
    }
}

pub fn epoch_checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.safetensors"))
}

/// Parses a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
