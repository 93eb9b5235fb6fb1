use serde::{Deserialize, Serialize};

use super::model::{MaeConfig, MaeModel};
use super::params::{AdamW, Grads};
use crate::imagecore::{ContourExtractor, Image, PatchGrid};
use crate::masking::{self, MaskPlan, PatchScores};
use crate::{Error, Result};

/// Samples per gradient chunk. Fixed so gradient sums are reproducible
/// regardless of the thread count.
pub const GRAD_CHUNK: usize = 4;

/// A training image with its precomputed contour patch scores.
#[derive(Clone, Debug)]
pub struct PretrainSample {
    pub grid: PatchGrid,
    pub scores: PatchScores,
}

pub fn prepare_samples(
    config: &MaeConfig,
    images: &[Image],
    extractor: &ContourExtractor,
) -> Result<Vec<PretrainSample>> {
    crate::par::map_slice(images, |img| {
        let contour = extractor.extract_or_uniform(img)?;
        Ok(PretrainSample {
            grid: crate::imagecore::to_patches(img, config.patch_size)?,
            scores: masking::patch_scores(&contour, config.patch_size)?,
        })
    })
    .into_iter()
    .collect()
}

/// Mask for sample `index` in `epoch`. Fully contour-guided plans are the
/// same every epoch; plans with a random share are redrawn per epoch.
pub fn mask_plan_for(sample: &PretrainSample, config: &MaeConfig, epoch: usize, index: usize) -> Result<MaskPlan> {
    let seed = crate::seed::derive(config.seed, "mask", &[epoch as u64, index as u64]);
    masking::plan_mask(&sample.scores, config.mask_rate, seed, config.contour_fraction)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

/// Model, optimiser state and the number of completed epochs.
#[derive(Clone, Debug)]
pub struct Pretrainer {
    pub model: MaeModel,
    pub optimizer: AdamW,
    pub epochs_done: usize,
}

impl Pretrainer {
    pub fn new(model: MaeModel) -> Self {
        let optimizer = AdamW::new(&model.store, model.config.lr, model.config.weight_decay);
        Pretrainer {
            model,
            optimizer,
            epochs_done: 0,
        }
    }

    /// One pass over `samples` in a seeded shuffled order. Returns the mean
    /// per-sample loss.
    pub fn run_epoch(&mut self, samples: &[PretrainSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("pretraining needs at least one image".into()));
        }
        let epoch = self.epochs_done;
        let cfg = self.model.config.clone();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng = crate::seed::rng(cfg.seed, "shuffle-pretrain", &[epoch as u64]);
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let model = &self.model;
            let parts = crate::par::map_chunks(batch.len(), GRAD_CHUNK, |range| -> Result<(Grads, f64)> {
                let mut g = Grads::zeros_like(&model.store);
                let mut loss = 0.0;
                for &idx in &batch[range] {
                    let plan = mask_plan_for(&samples[idx], &cfg, epoch, idx)?;
                    loss += model.reconstruction_step(&samples[idx].grid, &plan, &mut g)?;
                }
                Ok((g, loss))
            });
            let mut grads_parts = Vec::with_capacity(parts.len());
            let mut batch_loss = 0.0;
            for part in parts {
                let (g, l) = part?;
                batch_loss += l;
                grads_parts.push(g);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    loss: batch_loss,
                });
            }
            let mut grads = Grads::sum_ordered(&self.model.store, grads_parts);
            grads.scale(1.0 / batch.len() as f64);
            self.optimizer.update(&mut self.model.store, &grads);
            total += batch_loss;
        }
        self.epochs_done += 1;
        Ok(total / samples.len() as f64)
    }

    /// Runs until `epochs_done == target_epochs`, reporting each epoch.
    pub fn train_until(
        &mut self,
        samples: &[PretrainSample],
        target_epochs: usize,
        mut on_epoch: impl FnMut(&EpochLoss),
    ) -> Result<Vec<EpochLoss>> {
        let mut curve = Vec::new();
        while self.epochs_done < target_epochs {
            let loss = self.run_epoch(samples)?;
            let entry = EpochLoss {
                epoch: self.epochs_done - 1,
                loss,
            };
            on_epoch(&entry);
            curve.push(entry);
        }
        Ok(curve)
    }
}

/// Pretrains a fresh model on `images` for `config.epochs` epochs.
pub fn pretrain(
    images: &[Image],
    extractor: &ContourExtractor,
    config: &MaeConfig,
) -> Result<(MaeModel, Vec<EpochLoss>)> {
    let samples = prepare_samples(config, images, extractor)?;
    let mut trainer = Pretrainer::new(MaeModel::new(config.clone())?);
    let curve = trainer.train_until(&samples, config.epochs, |e| {
        log::info!("pretrain epoch {} loss {:.6}", e.epoch, e.loss)
    })?;
    Ok((trainer.model, curve))
}
