use std::io::Write;
use std::path::Path;
use std::time::Instant;

use super::adam::{AdamConfig, AdamState};
use super::loss::{multitask_loss, multitask_loss_on_tape, LossBreakdown};
use crate::data::{batch_iter, epoch_seed, Batch, SampleSource};
use crate::error::{Error, Result};
use crate::model::{forward, forward_on_tape, ModelSpec, PredictionTriple};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{GradMap, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Drives the per-epoch shuffle.
    pub seed: u64,
    /// Strength of the soft-sharing tying penalty.
    pub soft_lambda: f64,
    pub shuffle: bool,
    /// Start the age output bias at the mean training age instead of zero.
    pub prime_age_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 40,
            adam: AdamConfig::default(),
            seed: 0,
            soft_lambda: 1e-3,
            shuffle: true,
            prime_age_bias: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::InvalidArgument {
                op: "train",
                reason: reason.to_string(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.adam.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(self.soft_lambda >= 0.0 && self.soft_lambda.is_finite()) {
            return bad("soft_lambda must be finite and non-negative");
        }
        Ok(())
    }
}

/// Sample-weighted mean losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub loss: LossBreakdown<f64>,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,total,age_l1,gender_bce,ethnicity_cce,soft_penalty,seconds";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.epoch, l.total, l.age_l1, l.gender_bce, l.ethnicity_cce, l.soft_penalty, self.seconds
        )
    }
}

pub fn write_log_csv(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ParamStore<T>,
    pub log: Vec<EpochLog>,
    pub steps: u64,
}

/// Loss and parameter gradients of one mini-batch.
pub fn train_step<T: Scalar>(
    params: &ParamStore<T>,
    spec: &ModelSpec,
    batch: &Batch<T>,
    soft_lambda: f64,
) -> Result<(LossBreakdown<T>, GradMap<T>)> {
    let mut tape = Tape::new();
    params.register(&mut tape)?;
    let x = tape.constant(batch.images.clone());
    let heads = forward_on_tape(&mut tape, spec, x)?;
    let loss = multitask_loss_on_tape(&mut tape, &heads, &batch.labels, spec, params, soft_lambda)?;
    let breakdown = loss.breakdown(&tape);
    let grads = tape.backward(loss.total)?;
    Ok((breakdown, grads))
}

pub fn train<T: Scalar, S: SampleSource + ?Sized>(
    spec: &ModelSpec,
    params: ParamStore<T>,
    source: &S,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with(spec, params, source, cfg, |_, _| Ok(()))
}

/// Mini-batch Adam on the unweighted multi-task loss. `on_epoch` runs after every epoch
/// and may abort training by returning an error.
pub fn train_with<T, S, F>(
    spec: &ModelSpec,
    mut params: ParamStore<T>,
    source: &S,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome<T>>
where
    T: Scalar,
    S: SampleSource + ?Sized,
    F: FnMut(&EpochLog, &ParamStore<T>) -> Result<()>,
{
    cfg.validate()?;
    spec.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.prime_age_bias && cfg.epochs > 0 {
        prime_age_bias(&mut params, source)?;
    }
    let mut adam = AdamState::new(&params, cfg.adam);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut steps = 0u64;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut sums = [0f64; 5];
        let mut seen = 0usize;
        for batch in batch_iter::<T, S>(source, cfg.batch_size, epoch_seed(cfg.seed, epoch), cfg.shuffle)? {
            let batch = batch?;
            let (loss, grads) = train_step(&params, spec, &batch, cfg.soft_lambda)?;
            steps += 1;
            let loss = loss.to_f64();
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { step: steps as usize });
            }
            adam.step(&mut params, &grads)?;
            let n = batch.labels.len() as f64;
            for (acc, v) in sums.iter_mut().zip([
                loss.age_l1,
                loss.gender_bce,
                loss.ethnicity_cce,
                loss.soft_penalty,
                loss.total,
            ]) {
                *acc += v * n;
            }
            seen += batch.labels.len();
        }
        let mean = sums.map(|s| s / seen as f64);
        let row = EpochLog {
            epoch,
            loss: LossBreakdown {
                age_l1: mean[0],
                gender_bce: mean[1],
                ethnicity_cce: mean[2],
                soft_penalty: mean[3],
                total: mean[4],
            },
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("{}", row.csv_row());
        on_epoch(&row, &params)?;
        log.push(row);
    }
    Ok(TrainOutcome { params, log, steps })
}

pub const AGE_BIAS: &str = "age/fc2/bias";

/// Sets the age regression bias to the mean label age of `source`.
pub fn prime_age_bias<T: Scalar, S: SampleSource + ?Sized>(params: &mut ParamStore<T>, source: &S) -> Result<()> {
    if source.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mean = (0..source.len()).map(|i| f64::from(source.label(i).age)).sum::<f64>() / source.len() as f64;
    let bias = params.get_mut(AGE_BIAS)?;
    bias.data_mut().fill(T::from_f64_lossy(mean));
    Ok(())
}

/// Predictions for every sample of `source`, in index order.
pub fn predict<T: Scalar, S: SampleSource + ?Sized>(
    params: &ParamStore<T>,
    spec: &ModelSpec,
    source: &S,
    batch_size: usize,
) -> Result<PredictionTriple<T>> {
    let mut out = PredictionTriple::empty();
    for batch in batch_iter::<T, S>(source, batch_size, 0, false)? {
        out.extend(forward(params, spec, &batch?.images)?);
    }
    Ok(out)
}

/// Full-set losses without updating anything.
pub fn evaluate_loss<T: Scalar, S: SampleSource + ?Sized>(
    params: &ParamStore<T>,
    spec: &ModelSpec,
    source: &S,
    batch_size: usize,
    soft_lambda: f64,
) -> Result<LossBreakdown<f64>> {
    let pred = predict(params, spec, source, batch_size)?;
    let labels: Vec<_> = (0..source.len()).map(|i| source.label(i)).collect();
    Ok(multitask_loss(&pred, &labels, spec, params, soft_lambda)?.to_f64())
}
