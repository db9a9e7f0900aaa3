//! Supervised training on depth samples and dataset-level evaluation.

use alloc::format;
use alloc::vec::Vec;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::depth_net::{Model, PATCH_FACTORS};
use crate::error::{Error, Result};
use crate::loss::{silog_loss, LossConfig};
use crate::metrics::{evaluate, MetricsReport};
use crate::optim::{adam_step, lr_at, LrSchedule, OptimizerState};
use crate::synth::{upsample_depth, DepthSample};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    /// Validate every this many steps; 0 disables periodic validation.
    pub eval_every: usize,
    pub loss: LossConfig,
    /// Evaluation depth cap in meters.
    pub eval_cap: f64,
    /// Seed of the sample order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            lr: LrSchedule::default(),
            eval_every: 500,
            loss: LossConfig::default(),
            eval_cap: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Contract("batch_size must be positive".into()));
        }
        if !(self.lr.start >= 0.0 && self.lr.end >= 0.0) {
            return Err(Error::Contract("learning rates must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug)]
pub enum TrainEvent<'a> {
    Step(&'a StepLog),
    Validation { step: usize, report: &'a MetricsReport },
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub losses: Vec<StepLog>,
    pub validations: Vec<(usize, MetricsReport)>,
}

/// Loss of one sample at 1/4 resolution and the gradient of every
/// parameter.
pub fn sample_gradients(model: &Model, sample: &DepthSample, loss: &LossConfig) -> Result<(f64, Vec<Tensor>)> {
    let (target, valid) = sample.downsample(PATCH_FACTORS[0])?;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let image = tape.leaf(sample.image.clone());
    let depth = model.net.forward(&mut tape, &p, image)?;
    let l = silog_loss(&mut tape, depth, &target, &valid, loss)?;
    let value = tape.value(l).item().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(Error::Numeric { stage: "loss".into() });
    }
    tape.backward(l)?;
    Ok((value, p.grads(&tape)))
}

/// Full-resolution depth: the 1/4 prediction enlarged by nearest neighbour.
pub fn predict_full(model: &Model, image: &Tensor) -> Result<Tensor> {
    Ok(upsample_depth(&model.predict(image)?, PATCH_FACTORS[0]))
}

/// Mean per-sample metrics at full resolution.
pub fn evaluate_model(model: &Model, samples: &[DepthSample], cap: f64) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let reports = samples
        .iter()
        .map(|s| evaluate(&predict_full(model, &s.image)?, &s.depth, &s.valid, cap))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::mean(&reports).expect("non-empty"))
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn at_step(step: usize, err: Error) -> Error {
    match err {
        Error::Numeric { stage } => Error::Numeric { stage: format!("step {step}: {stage}") },
        other => other,
    }
}

/// Runs `cfg.steps` Adam steps over mini-batches drawn without replacement
/// (reshuffled every epoch), reporting each step and periodic validation to
/// `observer`.
pub fn train(
    model: &mut Model,
    optimizer: &mut OptimizerState,
    cfg: &TrainConfig,
    train_set: &[DepthSample],
    val_set: &[DepthSample],
    mut observer: impl FnMut(TrainEvent<'_>),
) -> Result<TrainSummary> {
    cfg.validate()?;
    if cfg.steps > 0 && train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = Vec::new();
    let mut cursor = 0;
    let mut summary = TrainSummary::default();
    for step in 0..cfg.steps {
        let lr = lr_at(step, cfg.steps, cfg.lr);
        let mut total_loss = 0.0;
        let mut grads: Option<Vec<Tensor>> = None;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = shuffled(train_set.len(), &mut rng);
                cursor = 0;
            }
            let sample = &train_set[order[cursor]];
            cursor += 1;
            let (loss, g) = sample_gradients(model, sample, &cfg.loss).map_err(|e| at_step(step, e))?;
            total_loss += loss;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let scale = 1.0 / cfg.batch_size as f64;
        let mut grads = grads.expect("batch_size > 0");
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
            if !g.all_finite() {
                return Err(Error::Numeric { stage: format!("step {step}: gradients") });
            }
        }
        adam_step(model.params.tensors_mut(), &grads, optimizer, lr)?;
        let log = StepLog { step, lr, loss: total_loss * scale };
        observer(TrainEvent::Step(&log));
        summary.losses.push(log);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && !val_set.is_empty() {
            let report = evaluate_model(model, val_set, cfg.eval_cap).map_err(|e| at_step(step, e))?;
            observer(TrainEvent::Validation { step: step + 1, report: &report });
            summary.validations.push((step + 1, report));
        }
    }
    Ok(summary)
}
