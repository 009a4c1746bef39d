//! Mini-batch training on the Pearson objective.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{kfold_split, Dataset};
use crate::encoder::{bind, forward, predict, Decay, ModelConfig, ModelParams, Stimulus};
use crate::error::{Error, Result};
use crate::eval::median;
use crate::objective::pearson_columns;
use crate::optim::{adamw_step, lr_at_epoch, AdamWConfig, OptimizerState, StepDecay};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub decay_interval_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub folds: usize,
    /// Share of the non-test stimuli held out for model selection.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            weight_decay: 1e-2,
            decay_factor: 0.8,
            decay_interval_epochs: 5,
            epochs: 30,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            folds: 5,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2 for a correlation objective, got {}",
                self.batch_size
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.decay_interval_epochs == 0 {
            return Err(Error::Config("decay_interval_epochs must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be >= 2, got {}", self.folds)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay {
            base_lr: self.base_lr,
            factor: self.decay_factor,
            interval: self.decay_interval_epochs,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Stimulus indices for one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl FoldSplit {
    /// Fold `fold` of a seeded k-fold partition is the test set; a seeded
    /// `validation_fraction` of the rest is held out for model selection.
    pub fn new(n: usize, fold: usize, cfg: &TrainConfig) -> Result<Self> {
        let folds = kfold_split(n, cfg.folds, cfg.seed)?;
        if fold >= folds.len() {
            return Err(Error::Usage(format!(
                "fold index {fold} out of range for {} folds",
                folds.len()
            )));
        }
        let test = folds[fold].clone();
        let mut rest: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        rest.sort_unstable();
        rest.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f01d));
        let n_val = if cfg.validation_fraction > 0.0 {
            ((rest.len() as f64 * cfg.validation_fraction).ceil() as usize).max(2)
        } else {
            0
        };
        if rest.len() < n_val + 2 {
            return Err(Error::Usage(format!(
                "fold {fold} leaves too few training stimuli ({})",
                rest.len()
            )));
        }
        let mut validation = rest[..n_val].to_vec();
        let mut train = rest[n_val..].to_vec();
        validation.sort_unstable();
        train.sort_unstable();
        Ok(Self {
            fold,
            train,
            validation,
            test,
        })
    }
}

/// Model inputs and targets, independent of where captions came from.
#[derive(Clone, Debug)]
pub struct TrainingData<'a> {
    pub images: &'a [f32],
    pub image_numel: usize,
    pub tokens: Vec<Vec<usize>>,
    /// `[n × voxels]`, lh then rh.
    pub targets: Vec<f32>,
    pub voxels: usize,
}

impl<'a> TrainingData<'a> {
    pub fn from_dataset(d: &'a Dataset, text_length: usize) -> Self {
        Self::with_tokens(d, d.token_ids(text_length))
    }

    pub fn with_tokens(d: &'a Dataset, tokens: Vec<Vec<usize>>) -> Self {
        let targets = (0..d.len()).flat_map(|i| d.targets(i)).collect();
        Self {
            images: &d.images,
            image_numel: d.image_numel(),
            tokens,
            targets,
            voxels: d.voxel_count(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn stimulus(&self, i: usize) -> Stimulus<'_, f32> {
        Stimulus {
            image: &self.images[i * self.image_numel..(i + 1) * self.image_numel],
            tokens: &self.tokens[i],
        }
    }

    fn target_rows(&self, idx: &[usize]) -> Vec<f32> {
        let v = self.voxels;
        idx.iter()
            .flat_map(|&i| self.targets[i * v..(i + 1) * v].iter().copied())
            .collect()
    }

    /// Fails with a message naming both sides when the model and the data
    /// disagree on a dimension.
    pub fn check_compatible(&self, cfg: &ModelConfig, vocab_len: usize) -> Result<()> {
        if cfg.image_numel() != self.image_numel {
            return Err(Error::DimMismatch {
                what: "image size",
                expected: cfg.image_numel(),
                found: self.image_numel,
            });
        }
        if cfg.voxel_count != self.voxels {
            return Err(Error::DimMismatch {
                what: "voxel count",
                expected: cfg.voxel_count,
                found: self.voxels,
            });
        }
        if cfg.vocab_size < vocab_len {
            return Err(Error::DimMismatch {
                what: "vocabulary size",
                expected: cfg.vocab_size,
                found: vocab_len,
            });
        }
        if let Some(t) = self.tokens.iter().find(|t| t.len() != cfg.text_length) {
            return Err(Error::DimMismatch {
                what: "text length",
                expected: cfg.text_length,
                found: t.len(),
            });
        }
        Ok(())
    }
}

const EVAL_BATCH: usize = 64;

/// Predictions for `idx`, `[idx.len() × voxels]`.
pub fn predict_indices(
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    data: &TrainingData<'_>,
    idx: &[usize],
) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(idx.len() * cfg.voxel_count);
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch: Vec<_> = chunk.iter().map(|&i| data.stimulus(i)).collect();
        out.extend_from_slice(predict(cfg, params, &batch)?.values());
    }
    Ok(out)
}

/// Per-voxel Pearson R over the stimuli `idx`.
pub fn voxel_correlations(
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    data: &TrainingData<'_>,
    idx: &[usize],
) -> Result<Vec<f64>> {
    let pred = predict_indices(cfg, params, data, idx)?;
    pearson_columns(&data.target_rows(idx), &pred, idx.len(), data.voxels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Median R over all voxels on the validation split (NaN without one).
    pub val_median_r: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (or the last one when there
    /// is no validation split).
    pub params: ModelParams<f32>,
    pub best_epoch: Option<usize>,
    pub trace: Vec<EpochRecord>,
}

/// Batches of at least two stimuli; a trailing singleton joins the
/// previous batch.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().map_or(false, |b| b.len() < 2) {
        let n = out.len();
        let start = (n - 2) * size;
        out.truncate(n - 2);
        out.push(&order[start..]);
    }
    out
}

/// One optimisation step on `batch`; returns the batch loss.
pub fn train_step(
    cfg: &ModelConfig,
    params: &mut ModelParams<f32>,
    state: &mut OptimizerState<f32>,
    data: &TrainingData<'_>,
    batch: &[usize],
    lr: f64,
    opt: &AdamWConfig,
) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let bound = bind(&mut g, params, true);
    let stimuli: Vec<_> = batch.iter().map(|&i| data.stimulus(i)).collect();
    let f = forward(&mut g, cfg, &bound, &stimuli)?;
    let target = Tensor::new([batch.len(), data.voxels], data.target_rows(batch))?;
    let loss = g.pearson_loss(f.predictions, &target)?;
    g.backward(loss)?;
    let loss_value = g.value(loss).values()[0] as f64;
    let grads: Vec<Option<Vec<f32>>> = bound.all.iter().map(|&v| g.take_grad(v)).collect();
    let grad_refs: Vec<Option<&[f32]>> = grads.iter().map(|o| o.as_deref()).collect();
    let decay: Vec<Decay> = params.entries().iter().map(|(_, d, _)| *d).collect();
    adamw_step(&mut params.tensors_mut(), &grad_refs, &decay, state, lr, opt)?;
    Ok(loss_value)
}

/// Trains a freshly initialised model (seeded by `tc.seed`) on
/// `split.train`, selecting the epoch with the best validation median R.
pub fn train(
    cfg: &ModelConfig,
    data: &TrainingData<'_>,
    split: &FoldSplit,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    tc.validate()?;
    cfg.validate()?;
    if split.train.len() < 2 {
        return Err(Error::Usage(format!(
            "fold {} has {} training stimuli; need at least 2",
            split.fold,
            split.train.len()
        )));
    }
    let mut params = ModelParams::<f32>::init(cfg, tc.seed)?;
    let mut state = OptimizerState::new(params.entries().into_iter().map(|(_, _, t)| t));
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(0x0b5e_55ed));
    let schedule = tc.schedule();
    let opt = tc.adamw();
    let mut order = split.train.clone();
    let mut trace = Vec::with_capacity(tc.epochs);
    let mut best: Option<(f64, usize, ModelParams<f32>)> = None;

    for epoch in 0..tc.epochs {
        let lr = lr_at_epoch(epoch, &schedule);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for batch in batches(&order, tc.batch_size) {
            total += train_step(cfg, &mut params, &mut state, data, batch, lr, &opt)?;
            count += 1;
        }
        let val_median_r = if split.validation.len() >= 2 {
            median(&voxel_correlations(cfg, &params, data, &split.validation)?)
        } else {
            f64::NAN
        };
        if !val_median_r.is_nan() && best.as_ref().map_or(true, |(b, _, _)| val_median_r > *b) {
            best = Some((val_median_r, epoch, params.clone()));
        }
        trace.push(EpochRecord {
            epoch,
            lr,
            train_loss: total / count.max(1) as f64,
            val_median_r,
        });
    }
    let (params, best_epoch) = match best {
        Some((_, e, p)) => (p, Some(e)),
        None => (params, None),
    };
    Ok(TrainOutcome {
        params,
        best_epoch,
        trace,
    })
}

/// CSV trace with columns `epoch,lr,train_loss,val_median_r`.
pub fn trace_csv(trace: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_median_r\n");
    for r in trace {
        s.push_str(&format!(
            "{},{:e},{:.6},{:.6}\n",
            r.epoch, r.lr, r.train_loss, r.val_median_r
        ));
    }
    s
}
