//! Finite-temperature soft targets and the supervised objectives compared
//! against them.
//!
//! The target at response position `t` is the base model's next-token
//! distribution with the oracle token's logit raised by `β`:
//!
//! ```text
//! target_t = softmax(log π_base(· | x, y*_<t) + β · onehot(y*_t))
//! ```
//!
//! `β = 0` reproduces the base distribution; `β → ∞` collapses onto the
//! one-hot target of ordinary cross-entropy fine-tuning. The model is trained
//! by soft cross-entropy against these rows, which are constant in θ.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::{Matrix, PolicyModel, TokenSequence};
use crate::numerics::{entropy, log_softmax_unchecked, lse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Average over every supervised token in the batch.
    #[default]
    TokenMean,
    /// Sum over a sequence's tokens, averaged over sequences.
    SequenceMean,
}

/// Options shared by every loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossOptions {
    pub mask_prompt: bool,
    pub normalization: Normalization,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            mask_prompt: true,
            normalization: Normalization::TokenMean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GiftConfig {
    /// Inverse-temperature gain added to the oracle token's log-probability.
    pub beta: f64,
    pub mask_prompt: bool,
}

/// Per-position supervised objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Negative log-likelihood of the oracle token.
    Nll,
    /// Soft cross-entropy against the β-reweighted base distribution.
    Gift { beta: f64 },
    /// NLL minus `lambda_h` times the model's predictive entropy.
    EntropyReg { lambda_h: f64 },
    /// Cross-entropy against `(1 − eps) · onehot + eps / |V|`.
    LabelSmoothing { eps: f64 },
    /// NLL plus `alpha · KL(base ‖ model)`.
    Distill { alpha: f64 },
}

impl Objective {
    pub fn needs_teacher(&self) -> bool {
        matches!(self, Self::Gift { .. } | Self::Distill { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Gift { beta } if !(beta >= 0.0 && beta.is_finite()) => {
                domain(format!("beta must be finite and non-negative, got {beta}"))
            }
            Self::EntropyReg { lambda_h } if !(lambda_h >= 0.0) => {
                domain(format!("lambda_h must be non-negative, got {lambda_h}"))
            }
            Self::LabelSmoothing { eps } if !(0.0..1.0).contains(&eps) => {
                domain(format!("label smoothing eps must be in [0, 1), got {eps}"))
            }
            Self::Distill { alpha } if !(alpha >= 0.0) => domain(format!(
                "distillation weight must be non-negative, got {alpha}"
            )),
            _ => Ok(()),
        }
    }
}

/// Soft targets, one probability row per supervised position.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub rows: Matrix,
}

/// One target row: `softmax(base_logprobs + beta · onehot(oracle))`.
pub fn gift_target_row(base_logprobs: &[f64], oracle: u32, beta: f64) -> Result<Vec<f64>> {
    let o = oracle as usize;
    if o >= base_logprobs.len() {
        return domain(format!(
            "oracle token {oracle} outside vocabulary of size {}",
            base_logprobs.len()
        ));
    }
    let mut z = base_logprobs.to_vec();
    z[o] += beta;
    Ok(log_softmax_unchecked(&z)
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// Targets for every row of `base_logprobs`, aligned with `oracle`.
pub fn gift_targets(
    base_logprobs: &Matrix,
    oracle: &[u32],
    beta: f64,
) -> Result<TargetDistribution> {
    if base_logprobs.rows != oracle.len() {
        return Err(Error::Shape {
            expected: base_logprobs.rows,
            found: oracle.len(),
        });
    }
    let mut rows = Matrix::zeros(base_logprobs.rows, base_logprobs.cols);
    for (t, &o) in oracle.iter().enumerate() {
        let row = gift_target_row(base_logprobs.row(t), o, beta)?;
        rows.row_mut(t).copy_from_slice(&row);
    }
    Ok(TargetDistribution { rows })
}

/// Loss value with its parameter gradient.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub tokens: usize,
}

/// Teacher log-probabilities for each sequence, one row per supervised
/// position. The teacher takes part in no gradient.
pub fn teacher_logprobs(
    teacher: &PolicyModel,
    batch: &[TokenSequence],
    opts: LossOptions,
) -> Result<Vec<Matrix>> {
    batch
        .iter()
        .map(|seq| {
            let positions = seq.supervised_positions(!opts.mask_prompt)?;
            let logits = teacher.forward_logits(&seq.teacher_forced_input())?;
            let mut rows = Matrix::zeros(positions.len(), logits.cols);
            for (i, &(r, _)) in positions.iter().enumerate() {
                rows.row_mut(i)
                    .copy_from_slice(&log_softmax_unchecked(logits.row(r)));
            }
            Ok(rows)
        })
        .collect()
}

/// Loss and `∂loss/∂logits` at one position given model log-probs.
fn position_loss(
    objective: Objective,
    logp: &[f64],
    target: u32,
    teacher: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    let y = target as usize;
    if y >= logp.len() {
        return domain(format!(
            "oracle token {target} outside vocabulary of size {}",
            logp.len()
        ));
    }
    let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let mut grad = p.clone();
    let loss = match objective {
        Objective::Nll => {
            grad[y] -= 1.0;
            -logp[y]
        }
        Objective::Gift { beta } => {
            let base =
                teacher.ok_or_else(|| Error::Domain("GIFT needs base log-probabilities".into()))?;
            let t = gift_target_row(base, target, beta)?;
            for (g, tv) in grad.iter_mut().zip(&t) {
                *g -= tv;
            }
            -t.iter()
                .zip(logp)
                .filter(|(&tv, _)| tv > 0.0)
                .map(|(tv, l)| tv * l)
                .sum::<f64>()
        }
        Objective::EntropyReg { lambda_h } => {
            let h = entropy(&p);
            for (j, g) in grad.iter_mut().enumerate() {
                *g += lambda_h * p[j] * (logp[j] + h);
            }
            grad[y] -= 1.0;
            -logp[y] - lambda_h * h
        }
        Objective::LabelSmoothing { eps } => {
            let off = eps / logp.len() as f64;
            for g in grad.iter_mut() {
                *g -= off;
            }
            grad[y] -= 1.0 - eps;
            -(1.0 - eps) * logp[y] - off * logp.iter().sum::<f64>()
        }
        Objective::Distill { alpha } => {
            let base = teacher
                .ok_or_else(|| Error::Domain("distillation needs base log-probabilities".into()))?;
            let mut kl = 0.0;
            for (j, g) in grad.iter_mut().enumerate() {
                let b = base[j].exp();
                *g += alpha * (p[j] - b);
                if b > 0.0 {
                    kl += b * (base[j] - logp[j]);
                }
            }
            grad[y] -= 1.0;
            -logp[y] + alpha * kl
        }
    };
    Ok((loss, grad))
}

/// Batch loss under `objective`. `teacher` supplies per-sequence rows from
/// [`teacher_logprobs`] when the objective needs them.
pub fn objective_loss(
    model: &PolicyModel,
    batch: &[TokenSequence],
    objective: Objective,
    teacher: Option<&[Matrix]>,
    opts: LossOptions,
) -> Result<LossOutput> {
    objective.validate()?;
    if batch.is_empty() {
        return domain("empty batch");
    }
    if objective.needs_teacher() {
        match teacher {
            Some(t) if t.len() == batch.len() => {}
            Some(t) => {
                return Err(Error::Shape {
                    expected: batch.len(),
                    found: t.len(),
                })
            }
            None => return domain("objective needs teacher log-probabilities"),
        }
    }

    let positions: Vec<Vec<(usize, u32)>> = batch
        .iter()
        .map(|s| s.supervised_positions(!opts.mask_prompt))
        .collect::<Result<_>>()?;
    let total_tokens: usize = positions.iter().map(Vec::len).sum();
    if total_tokens == 0 {
        return domain("batch has no supervised positions");
    }

    let mut loss = 0.0;
    let mut grads = vec![0.0; model.num_params()];
    for (i, (seq, pos)) in batch.iter().zip(&positions).enumerate() {
        if pos.is_empty() {
            continue;
        }
        let weight = match opts.normalization {
            Normalization::TokenMean => 1.0 / total_tokens as f64,
            Normalization::SequenceMean => 1.0 / batch.len() as f64,
        };
        let trace = model.forward_trace(&seq.teacher_forced_input())?;
        let mut dlogits = Matrix::zeros(trace.logits.rows, trace.logits.cols);
        let teacher_rows = teacher.filter(|_| objective.needs_teacher()).map(|t| &t[i]);
        if let Some(rows) = teacher_rows {
            if rows.rows != pos.len() || rows.cols != trace.logits.cols {
                return Err(Error::Shape {
                    expected: pos.len(),
                    found: rows.rows,
                });
            }
        }
        for (k, &(r, target)) in pos.iter().enumerate() {
            let logp = log_softmax_unchecked(trace.logits.row(r));
            let (l, g) = position_loss(objective, &logp, target, teacher_rows.map(|m| m.row(k)))?;
            loss += weight * l;
            for (d, gv) in dlogits.row_mut(r).iter_mut().zip(g) {
                *d += weight * gv;
            }
        }
        for (acc, g) in grads.iter_mut().zip(model.backward(&trace, &dlogits)?) {
            *acc += g;
        }
    }
    Ok(LossOutput {
        loss,
        grads,
        tokens: total_tokens,
    })
}

fn opts_with_mask(mask_prompt: bool) -> LossOptions {
    LossOptions {
        mask_prompt,
        ..Default::default()
    }
}

fn check_shared_vocab(model: &PolicyModel, base: &PolicyModel) -> Result<()> {
    if model.vocab_size() != base.vocab_size() {
        return domain(format!(
            "model vocabulary {} differs from base vocabulary {}",
            model.vocab_size(),
            base.vocab_size()
        ));
    }
    Ok(())
}

pub fn gift_loss(
    model: &PolicyModel,
    base: &PolicyModel,
    batch: &[TokenSequence],
    cfg: GiftConfig,
) -> Result<LossOutput> {
    check_shared_vocab(model, base)?;
    let opts = opts_with_mask(cfg.mask_prompt);
    if batch.is_empty() {
        return domain("empty batch");
    }
    let teacher = teacher_logprobs(base, batch, opts)?;
    objective_loss(
        model,
        batch,
        Objective::Gift { beta: cfg.beta },
        Some(&teacher),
        opts,
    )
}

pub fn sft_loss(
    model: &PolicyModel,
    batch: &[TokenSequence],
    mask_prompt: bool,
) -> Result<LossOutput> {
    objective_loss(
        model,
        batch,
        Objective::Nll,
        None,
        opts_with_mask(mask_prompt),
    )
}

pub fn entropy_reg_loss(
    model: &PolicyModel,
    batch: &[TokenSequence],
    lambda_h: f64,
    mask_prompt: bool,
) -> Result<LossOutput> {
    objective_loss(
        model,
        batch,
        Objective::EntropyReg { lambda_h },
        None,
        opts_with_mask(mask_prompt),
    )
}

pub fn label_smoothing_loss(
    model: &PolicyModel,
    batch: &[TokenSequence],
    eps: f64,
    mask_prompt: bool,
) -> Result<LossOutput> {
    objective_loss(
        model,
        batch,
        Objective::LabelSmoothing { eps },
        None,
        opts_with_mask(mask_prompt),
    )
}

pub fn kd_loss(
    model: &PolicyModel,
    base: &PolicyModel,
    batch: &[TokenSequence],
    alpha: f64,
    mask_prompt: bool,
) -> Result<LossOutput> {
    check_shared_vocab(model, base)?;
    let opts = opts_with_mask(mask_prompt);
    if batch.is_empty() {
        return domain("empty batch");
    }
    let teacher = teacher_logprobs(base, batch, opts)?;
    objective_loss(
        model,
        batch,
        Objective::Distill { alpha },
        Some(&teacher),
        opts,
    )
}

/// Mean entropy of the GIFT targets over the batch's supervised positions.
pub fn mean_target_entropy(
    base: &PolicyModel,
    batch: &[TokenSequence],
    cfg: GiftConfig,
) -> Result<f64> {
    let opts = opts_with_mask(cfg.mask_prompt);
    let teacher = teacher_logprobs(base, batch, opts)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (seq, rows) in batch.iter().zip(&teacher) {
        let pos = seq.supervised_positions(!opts.mask_prompt)?;
        for (k, &(_, target)) in pos.iter().enumerate() {
            total += entropy(&gift_target_row(rows.row(k), target, cfg.beta)?);
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Log-partition of one target row, `log Σ_v π_base(v) e^{β·1[v = oracle]}`.
pub fn target_log_partition(base_logprobs: &[f64], oracle: u32, beta: f64) -> f64 {
    let mut z = base_logprobs.to_vec();
    z[oracle as usize] += beta;
    lse(&z)
}
