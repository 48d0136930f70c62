//! Camera-model training under the variational IB loss, with per-epoch
//! rate/distortion bookkeeping and beta sweeps.

mod optim;
mod schedule;

use ndarray::{s, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{Optimizer, OptimizerKind};
pub use schedule::LrSchedule;

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{FingerprintModel, Mode, ModelConfig};
use crate::objective::{loss_and_gradient, mean_code_accuracy, total_loss, Batch, LossOptions, LossRecord, LossWeights};
use crate::synth::{mix_seed, SyntheticImage};

const MODEL_STREAM: u64 = 0x304D_0DE1;
const DATA_STREAM: u64 = 0xDA7A;
const NOISE_STREAM: u64 = 0x2015E;
const VAL_STREAM: u64 = 0x7A1;
const VAL_NOISE_STREAM: u64 = 0x7A1_2015E;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub schedule: LrSchedule,
    pub patches_per_epoch: usize,
    pub batch_size: usize,
    pub loss: LossWeights,
    pub optimizer: OptimizerKind,
    /// Code samples per input in the training distortion.
    pub z_samples: usize,
    /// Size of the fixed validation patch set.
    pub val_patches: usize,
    pub seed: u64,
    /// Emit a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    /// Desk-scale run: 40 epochs in 10/25/5 phases, 160 batches of 64 per epoch.
    fn default() -> Self {
        Self {
            schedule: LrSchedule {
                base_lr: 1e-3,
                final_linear_lr: 5e-5,
                constant_epochs: 10,
                linear_epochs: 25,
                exponential_epochs: 5,
                exp_decay: 0.9,
            },
            patches_per_epoch: 10_240,
            batch_size: 64,
            loss: LossWeights::default(),
            optimizer: OptimizerKind::Adam,
            z_samples: 1,
            val_patches: 1024,
            seed: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainingConfig {
    /// Full-scale schedule: 700 epochs of 100,000 patches in batches of 200.
    pub fn full_scale() -> Self {
        Self {
            schedule: LrSchedule::full_scale(),
            patches_per_epoch: 100_000,
            batch_size: 200,
            ..Self::default()
        }
    }

    pub fn epochs(&self) -> usize {
        self.schedule.epochs()
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 || self.patches_per_epoch == 0 {
            return Err(Error::Config("batch_size and patches_per_epoch must be positive".into()));
        }
        if self.patches_per_epoch % self.batch_size != 0 {
            return Err(Error::Config(format!(
                "batch_size {} does not divide patches_per_epoch {}",
                self.batch_size, self.patches_per_epoch
            )));
        }
        if self.z_samples == 0 || self.val_patches == 0 {
            return Err(Error::Config("z_samples and val_patches must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        self.schedule.lr_at(epoch)
    }
}

/// A point on the rate-distortion plane (nats).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub rate: f64,
    pub distortion: f64,
    pub beta: f64,
    pub epoch: usize,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub epoch: usize,
    pub split: Split,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub train: RdPoint,
    pub val: RdPoint,
    pub val_accuracy: f64,
}

/// Hooks called during [`train`]; the CLI uses them for logs and checkpoints.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &LossRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _report: &EpochReport, _model: &FingerprintModel) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: FingerprintModel,
    pub rd_trace: Vec<RdPoint>,
    pub accuracy_trace: Vec<AccuracyPoint>,
    pub epochs: Vec<EpochReport>,
    pub final_loss: f64,
}

impl TrainOutcome {
    pub fn final_point(&self, split: Split) -> Option<RdPoint> {
        self.rd_trace.iter().rev().find(|p| p.split == split).copied()
    }

    /// Mean validation rate over the last `fraction` of epochs (at least one).
    pub fn tail_rate(&self, fraction: f64) -> f64 {
        let val: Vec<f64> = self
            .rd_trace
            .iter()
            .filter(|p| p.split == Split::Val)
            .map(|p| p.rate)
            .collect();
        let k = ((val.len() as f64 * fraction).ceil() as usize).clamp(1, val.len().max(1));
        val[val.len() - k..].iter().sum::<f64>() / k as f64
    }
}

/// Draws `count` random crops: a class uniformly, an image of that class
/// uniformly, then a uniform crop position. Images smaller than the patch
/// are skipped with a warning.
pub fn sample_patches<R: Rng + ?Sized>(images: &[SyntheticImage], count: usize, patch_size: usize, rng: &mut R) -> Result<Batch> {
    let mut by_class: Vec<Vec<&SyntheticImage>> = Vec::new();
    let mut skipped = 0usize;
    for img in images {
        let (h, w, _) = img.pixels.dim();
        if h < patch_size || w < patch_size {
            skipped += 1;
            continue;
        }
        if by_class.len() <= img.camera_id {
            by_class.resize(img.camera_id + 1, Vec::new());
        }
        by_class[img.camera_id].push(img);
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} image(s) smaller than {patch_size}x{patch_size}");
    }
    let classes: Vec<&Vec<&SyntheticImage>> = by_class.iter().filter(|v| !v.is_empty()).collect();
    let mut patches = Array4::<f64>::zeros((count, patch_size, patch_size, 3));
    let mut labels = Vec::with_capacity(count);
    if count == 0 {
        return Ok(Batch { patches, labels });
    }
    if classes.is_empty() {
        return Err(Error::Empty("no image large enough to sample patches".into()));
    }
    for i in 0..count {
        let class = classes[rng.random_range(0..classes.len())];
        let img = class[rng.random_range(0..class.len())];
        let (h, w, _) = img.pixels.dim();
        let y = rng.random_range(0..=h - patch_size);
        let x = rng.random_range(0..=w - patch_size);
        patches
            .slice_mut(s![i, .., .., ..])
            .assign(&img.pixels.slice(s![y..y + patch_size, x..x + patch_size, ..]));
        labels.push(img.camera_id);
    }
    Ok(Batch { patches, labels })
}

/// The fixed validation patch set used by [`train`] for a given seed.
pub fn validation_batch(dataset: &Dataset, config: &TrainingConfig, patch_size: usize) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, VAL_STREAM));
    sample_patches(dataset.split(Split::Val), config.val_patches, patch_size, &mut rng)
}

/// Evaluation-mode rate/distortion on a batch, with code noise seeded by epoch.
pub fn validation_point(model: &FingerprintModel, batch: &Batch, config: &TrainingConfig, epoch: usize) -> Result<RdPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(config.seed, VAL_NOISE_STREAM), epoch as u64));
    let b = total_loss(
        batch,
        model,
        &config.loss,
        &mut rng,
        LossOptions {
            mode: Mode::Eval,
            z_samples: 1,
        },
    )?;
    Ok(RdPoint {
        rate: b.rate,
        distortion: b.distortion,
        beta: config.loss.beta,
        epoch,
        split: Split::Val,
    })
}

/// Initializes a model from the training seed and trains it.
pub fn train_from_scratch(model_config: ModelConfig, dataset: &Dataset, config: &TrainingConfig, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, MODEL_STREAM));
    let model = FingerprintModel::init(model_config, &mut rng)?;
    train(model, dataset, config, observer)
}

/// Minimizes the total loss with the scheduled learning rate.
pub fn train(mut model: FingerprintModel, dataset: &Dataset, config: &TrainingConfig, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    config.validate()?;
    let classes = dataset
        .train
        .iter()
        .map(|i| i.camera_id)
        .collect::<std::collections::BTreeSet<_>>();
    if classes.len() < 2 {
        return Err(Error::Config("training set needs at least two camera classes".into()));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= model.num_classes()) {
        return Err(Error::Config(format!("camera id {c} exceeds model's {} classes", model.num_classes())));
    }
    let patch = model.patch_size();
    let val = validation_batch(dataset, config, patch)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, DATA_STREAM));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, NOISE_STREAM));
    let mut opt = Optimizer::new(config.optimizer, model.weights.len());
    let steps_per_epoch = config.patches_per_epoch / config.batch_size;
    let beta = config.loss.beta;
    let mut outcome = TrainOutcome {
        model: model.clone(),
        rd_trace: Vec::new(),
        accuracy_trace: Vec::new(),
        epochs: Vec::new(),
        final_loss: f64::NAN,
    };
    let mut step = 0usize;
    for epoch in 0..config.epochs() {
        let lr = config.lr_at(epoch)?;
        let (mut d_sum, mut r_sum) = (0.0, 0.0);
        for _ in 0..steps_per_epoch {
            let batch = sample_patches(&dataset.train, config.batch_size, patch, &mut data_rng)?;
            let lg = loss_and_gradient(&batch, &model, &config.loss, &mut noise_rng, config.z_samples)?;
            let b = lg.breakdown;
            if !b.is_finite() || lg.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("{b:?}"),
                });
            }
            opt.step(&mut model.weights, &lg.grad, lr);
            model.update_norms(&lg.moments);
            d_sum += b.distortion;
            r_sum += b.rate;
            outcome.final_loss = b.total;
            observer.on_step(&b.log_record(step, beta))?;
            step += 1;
        }
        let train_point = RdPoint {
            rate: r_sum / steps_per_epoch as f64,
            distortion: d_sum / steps_per_epoch as f64,
            beta,
            epoch,
            split: Split::Train,
        };
        let val_point = validation_point(&model, &val, config, epoch)?;
        let val_accuracy = mean_code_accuracy(&model, &val)?;
        let report = EpochReport {
            epoch,
            lr,
            train: train_point,
            val: val_point,
            val_accuracy,
        };
        log::info!(
            "epoch {epoch} lr {lr:.3e} train D {:.4} R {:.4} | val D {:.4} R {:.4} acc {:.3}",
            train_point.distortion,
            train_point.rate,
            val_point.distortion,
            val_point.rate,
            val_accuracy
        );
        outcome.rd_trace.push(train_point);
        outcome.rd_trace.push(val_point);
        outcome.accuracy_trace.push(AccuracyPoint {
            epoch,
            split: Split::Val,
            accuracy: val_accuracy,
        });
        outcome.epochs.push(report);
        observer.on_epoch(&report, &model)?;
    }
    outcome.model = model;
    Ok(outcome)
}

/// One run of a beta sweep; failed runs keep their error.
#[derive(Debug)]
pub struct SweepRun {
    pub beta: f64,
    pub run_index: usize,
    pub result: Result<TrainOutcome>,
}

impl SweepRun {
    pub fn final_point(&self) -> Option<RdPoint> {
        self.result.as_ref().ok().and_then(|o| o.final_point(Split::Val))
    }
}

/// Independent training runs, one per entry of `betas` (duplicates included).
/// Every run starts from the same initialization and patch stream, so a
/// sweep entry matches `train_from_scratch` at that beta.
pub fn beta_sweep(
    dataset: &Dataset,
    betas: &[f64],
    model_config: &ModelConfig,
    config: &TrainingConfig,
    observer: &mut dyn FnMut(usize, f64) -> Box<dyn TrainObserver>,
) -> Result<Vec<SweepRun>> {
    if betas.is_empty() {
        return Err(Error::Config("beta list is empty".into()));
    }
    if let Some(b) = betas.iter().find(|b| !(**b >= 0.0) || !b.is_finite()) {
        return Err(Error::Config(format!("beta must be finite and nonnegative, got {b}")));
    }
    let mut runs = Vec::with_capacity(betas.len());
    for (i, &beta) in betas.iter().enumerate() {
        let mut cfg = config.clone();
        cfg.loss.beta = beta;
        let mut obs = observer(i, beta);
        let result = train_from_scratch(model_config.clone(), dataset, &cfg, obs.as_mut());
        if let Err(e) = &result {
            log::error!("sweep run {i} (beta {beta}) failed: {e}");
        }
        runs.push(SweepRun {
            beta,
            run_index: i,
            result,
        });
    }
    Ok(runs)
}
