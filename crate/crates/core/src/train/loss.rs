//! Task losses and their unweighted multi-task sum.

use std::collections::BTreeMap;

use crate::data::LabelTriple;
use crate::error::{Error, Result};
use crate::model::{HeadOutputs, ModelSpec, Sharing, Task, NUM_ETHNICITIES};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::model::PredictionTriple;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo = T::from_f64_lossy(PROB_CLAMP);
    let hi = T::from_f64_lossy(1.0 - PROB_CLAMP);
    if p.is_nan() {
        p
    } else {
        p.max(lo).min(hi)
    }
}

fn mean<T: Scalar>(it: impl Iterator<Item = T>, n: usize) -> T {
    it.sum::<T>() / T::from_usize(n).expect("length fits")
}

/// Mean absolute age error in years.
pub fn l1_loss<T: Scalar>(pred: &[T], truth: &[T]) -> Result<T> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument {
            op: "l1_loss",
            reason: format!("{} predictions for {} targets", pred.len(), truth.len()),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(mean(pred.iter().zip(truth).map(|(&p, &t)| (p - t).abs()), pred.len()))
}

/// Mean binary cross entropy of probabilities `p` against 0/1 targets.
pub fn bce_loss<T: Scalar>(p: &[T], y: &[T]) -> Result<T> {
    if p.len() != y.len() {
        return Err(Error::InvalidArgument {
            op: "bce_loss",
            reason: format!("{} probabilities for {} targets", p.len(), y.len()),
        });
    }
    if p.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let one = T::one();
    Ok(mean(
        p.iter().zip(y).map(|(&p, &y)| {
            let p = clamp_prob(p);
            -(y * p.ln() + (one - y) * (one - p).ln())
        }),
        p.len(),
    ))
}

/// Mean categorical cross entropy of probability rows against class indices.
pub fn cce_loss<T: Scalar>(probs: &[[T; NUM_ETHNICITIES]], y: &[usize]) -> Result<T> {
    if probs.len() != y.len() {
        return Err(Error::InvalidArgument {
            op: "cce_loss",
            reason: format!("{} rows for {} targets", probs.len(), y.len()),
        });
    }
    if probs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = Vec::with_capacity(y.len());
    for (row, &c) in probs.iter().zip(y) {
        let p = row.get(c).ok_or(Error::ClassOutOfRange {
            index: c,
            classes: NUM_ETHNICITIES,
        })?;
        acc.push(-clamp_prob(*p).ln());
    }
    Ok(mean(acc.into_iter(), y.len()))
}

/// Per-component losses of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown<T> {
    pub age_l1: T,
    pub gender_bce: T,
    pub ethnicity_cce: T,
    /// Already multiplied by the tying strength; zero unless soft sharing.
    pub soft_penalty: T,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn new(age_l1: T, gender_bce: T, ethnicity_cce: T, soft_penalty: T) -> Self {
        Self {
            age_l1,
            gender_bce,
            ethnicity_cce,
            soft_penalty,
            total: age_l1 + gender_bce + ethnicity_cce + soft_penalty,
        }
    }

    pub fn to_f64(self) -> LossBreakdown<f64> {
        LossBreakdown {
            age_l1: self.age_l1.to_f64_lossy(),
            gender_bce: self.gender_bce.to_f64_lossy(),
            ethnicity_cce: self.ethnicity_cce.to_f64_lossy(),
            soft_penalty: self.soft_penalty.to_f64_lossy(),
            total: self.total.to_f64_lossy(),
        }
    }
}

fn label_columns<T: Scalar>(labels: &[LabelTriple]) -> (Vec<T>, Vec<T>, Vec<usize>) {
    (
        labels.iter().map(|l| T::from_u8(l.age).expect("age fits")).collect(),
        labels
            .iter()
            .map(|l| T::from_usize(l.gender.index()).expect("0/1 fits"))
            .collect(),
        labels.iter().map(|l| l.ethnicity.index()).collect(),
    )
}

/// Unweighted sum of the three task losses plus `soft_lambda` times the tying penalty
/// when `spec` uses soft sharing.
pub fn multitask_loss<T: Scalar>(
    pred: &PredictionTriple<T>,
    labels: &[LabelTriple],
    spec: &ModelSpec,
    params: &ParamStore<T>,
    soft_lambda: f64,
) -> Result<LossBreakdown<T>> {
    if pred.len() != labels.len() {
        return Err(Error::InvalidArgument {
            op: "multitask_loss",
            reason: format!("{} predictions for {} labels", pred.len(), labels.len()),
        });
    }
    let (ages, genders, eth) = label_columns::<T>(labels);
    let penalty = if spec.sharing == Sharing::Soft {
        soft_penalty(params)? * T::from_f64_lossy(soft_lambda)
    } else {
        T::zero()
    };
    Ok(LossBreakdown::new(
        l1_loss(&pred.age, &ages)?,
        bce_loss(&pred.gender_prob, &genders)?,
        cce_loss(&pred.ethnicity_probs, &eth)?,
        penalty,
    ))
}

/// Corresponding tensor names across the three soft-sharing encoder copies, keyed by the
/// path below the copy prefix.
pub fn soft_layout<T: Scalar>(params: &ParamStore<T>) -> Result<BTreeMap<String, [String; 3]>> {
    let mut groups: BTreeMap<String, [Option<String>; 3]> = BTreeMap::new();
    for name in params.names() {
        let Some((head, rest)) = name.split_once('/') else { continue };
        for family in ["encoder", "non_local"] {
            for task in Task::ALL {
                if head == format!("{family}_{task}") {
                    let slot = groups.entry(format!("{family}/{rest}")).or_default();
                    slot[task.index()] = Some(name.to_string());
                }
            }
        }
    }
    if groups.is_empty() {
        return Err(Error::InvalidArgument {
            op: "soft_penalty",
            reason: "no per-task encoder subtrees found".into(),
        });
    }
    groups
        .into_iter()
        .map(|(key, slots)| {
            let names = slots.clone().map(|s| s.unwrap_or_default());
            if slots.iter().any(Option::is_none) {
                return Err(Error::InvalidArgument {
                    op: "soft_penalty",
                    reason: format!("`{key}` is missing from some task encoders"),
                });
            }
            let shapes: Vec<&[usize]> = names
                .iter()
                .map(|n| params.get(n).map(Tensor::shape))
                .collect::<Result<_>>()?;
            if shapes[0] != shapes[1] || shapes[0] != shapes[2] {
                return Err(Error::ShapeMismatch {
                    op: "soft_penalty",
                    lhs: shapes[0].to_vec(),
                    rhs: if shapes[0] != shapes[1] { shapes[1] } else { shapes[2] }.to_vec(),
                });
            }
            Ok((key, names))
        })
        .collect()
}

const TASK_PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Sum over the three task pairs and every corresponding tensor of the squared L2 distance.
pub fn soft_penalty<T: Scalar>(params: &ParamStore<T>) -> Result<T> {
    let mut total = T::zero();
    for names in soft_layout(params)?.values() {
        for (a, b) in TASK_PAIRS {
            let (x, y) = (params.get(&names[a])?, params.get(&names[b])?);
            total += x.data().iter().zip(y.data()).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>();
        }
    }
    Ok(total)
}

/// [`soft_penalty`] recorded on a tape whose parameters are registered by name.
pub fn soft_penalty_on_tape<T: Scalar>(tape: &mut Tape<T>, params: &ParamStore<T>) -> Result<Var> {
    let mut total: Option<Var> = None;
    for names in soft_layout(params)?.values() {
        for (a, b) in TASK_PAIRS {
            let (x, y) = (tape.param_by_name(&names[a])?, tape.param_by_name(&names[b])?);
            let d = tape.sub(x, y)?;
            let sq = tape.square(d);
            let s = tape.sum(sq);
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
    }
    Ok(total.expect("layout is non-empty"))
}

/// Tape handles of each loss component.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub age_l1: Var,
    pub gender_bce: Var,
    pub ethnicity_cce: Var,
    /// Scaled by the tying strength.
    pub soft_penalty: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>) -> LossBreakdown<T> {
        let get = |v: Var| tape.value(v)[0];
        LossBreakdown {
            age_l1: get(self.age_l1),
            gender_bce: get(self.gender_bce),
            ethnicity_cce: get(self.ethnicity_cce),
            soft_penalty: self.soft_penalty.map_or(T::zero(), get),
            total: get(self.total),
        }
    }
}

/// Records the multi-task loss of `heads` against `labels`.
pub fn multitask_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    heads: &HeadOutputs,
    labels: &[LabelTriple],
    spec: &ModelSpec,
    params: &ParamStore<T>,
    soft_lambda: f64,
) -> Result<LossVars> {
    let n = tape.shape(heads.age)[0];
    if n != labels.len() {
        return Err(Error::InvalidArgument {
            op: "multitask_loss",
            reason: format!("{n} predictions for {} labels", labels.len()),
        });
    }
    let (ages, genders, eth) = label_columns::<T>(labels);
    let one = T::one();

    let target = tape.constant(Tensor::from_vec([n, 1], ages)?);
    let diff = tape.sub(heads.age, target)?;
    let abs = tape.abs(diff);
    let age_l1 = tape.mean(abs);

    let lo = T::from_f64_lossy(PROB_CLAMP);
    let hi = T::from_f64_lossy(1.0 - PROB_CLAMP);
    let p = tape.clamp(heads.gender_prob, lo, hi);
    let ln_p = tape.ln(p);
    let neg = tape.scale(p, -one);
    let q = tape.add_const(neg, one);
    let ln_q = tape.ln(q);
    let y = tape.constant(Tensor::from_vec([n, 1], genders.clone())?);
    let not_y = tape.constant(Tensor::from_vec([n, 1], genders.iter().map(|&g| one - g).collect())?);
    let pos = tape.mul(y, ln_p)?;
    let negs = tape.mul(not_y, ln_q)?;
    let ll = tape.add(pos, negs)?;
    let ll = tape.mean(ll);
    let gender_bce = tape.scale(ll, -one);

    let mut onehot = vec![T::zero(); n * NUM_ETHNICITIES];
    for (i, &c) in eth.iter().enumerate() {
        onehot[i * NUM_ETHNICITIES + c] = one;
    }
    let onehot = tape.constant(Tensor::from_vec([n, NUM_ETHNICITIES], onehot)?);
    let pe = tape.clamp(heads.ethnicity_probs, lo, hi);
    let ln_pe = tape.ln(pe);
    let picked = tape.mul(onehot, ln_pe)?;
    let s = tape.sum(picked);
    let ethnicity_cce = tape.scale(s, -one / T::from_usize(n).expect("batch fits"));

    let mut total = tape.add(age_l1, gender_bce)?;
    total = tape.add(total, ethnicity_cce)?;
    let soft = if spec.sharing == Sharing::Soft {
        let raw = soft_penalty_on_tape(tape, params)?;
        let scaled = tape.scale(raw, T::from_f64_lossy(soft_lambda));
        total = tape.add(total, scaled)?;
        Some(scaled)
    } else {
        None
    };
    Ok(LossVars {
        age_l1,
        gender_bce,
        ethnicity_cce,
        soft_penalty: soft,
        total,
    })
}
