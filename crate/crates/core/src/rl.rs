//! Group-relative policy optimization with binary verifiable rewards.
//!
//! Each prompt gets `group_size` sampled responses; advantages are rewards
//! minus the group mean (no standard-deviation scaling). The surrogate is the
//! token-mean PPO clipped objective plus an exact per-token
//! `KL(π_θ ‖ π_ref)` penalty computed from full next-token distributions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::metrics::{derive_seed, MetricsContext, MetricsRecord};
use crate::model::{
    sample_rollout, AdamW, AdamWConfig, Matrix, PolicyModel, TokenSequence, Vocabulary,
};
use crate::numerics::{entropy, log_softmax_unchecked};
use crate::tasks::{self, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    pub group_size: usize,
    pub clip_ratio: f64,
    pub learning_rate: f64,
    /// Learning rate used at 7B scale; recorded for provenance only.
    pub reference_learning_rate: f64,
    pub rollout_temperature: f64,
    pub kl_coeff: f64,
    pub epochs: usize,
    pub batch_prompts: usize,
    /// Fixed number of update steps, cycling through the prompts as often as
    /// needed. `None` runs `epochs` full passes.
    pub max_steps: Option<usize>,
    pub max_new_tokens: usize,
    pub weight_decay: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_ratio: 0.2,
            learning_rate: 1e-4,
            reference_learning_rate: 1e-6,
            rollout_temperature: 1.0,
            kl_coeff: 0.01,
            epochs: 1,
            batch_prompts: 8,
            max_steps: None,
            max_new_tokens: 16,
            weight_decay: 0.0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return domain("group_size must be at least 2");
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return domain("clip_ratio must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0) || !(self.rollout_temperature > 0.0) {
            return domain("learning rate and rollout temperature must be positive");
        }
        if !(self.kl_coeff >= 0.0) || !self.kl_coeff.is_finite() {
            return domain("kl_coeff must be finite and >= 0");
        }
        if self.batch_prompts == 0 || self.max_new_tokens == 0 {
            return domain("batch_prompts and max_new_tokens must be positive");
        }
        Ok(())
    }
}

/// Binary task reward on a complete response; malformed input scores 0.
pub fn reward(spec: &TaskSpec, prompt: &[u32], response: &[u32]) -> f64 {
    tasks::verify(spec, prompt, response)
}

/// `A_i = r_i − mean(r)`.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    rewards.iter().map(|r| r - mean).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt: Vec<u32>,
    pub responses: Vec<Vec<u32>>,
    pub rewards: Vec<f64>,
    /// Sampling-policy log-probability of each emitted token.
    pub old_logprobs: Vec<Vec<f64>>,
}

impl RolloutGroup {
    pub fn advantages(&self) -> Vec<f64> {
        group_advantages(&self.rewards)
    }

    fn check(&self, group_size: usize) -> Result<()> {
        if self.responses.len() != group_size
            || self.rewards.len() != group_size
            || self.old_logprobs.len() != group_size
        {
            return Err(Error::Shape {
                expected: group_size,
                found: self.responses.len(),
            });
        }
        for (r, lp) in self.responses.iter().zip(&self.old_logprobs) {
            if r.len() != lp.len() {
                return Err(Error::Shape {
                    expected: r.len(),
                    found: lp.len(),
                });
            }
        }
        Ok(())
    }
}

/// Samples `group_size` responses for `prompt` and scores them.
pub fn collect_group(
    model: &PolicyModel,
    prompt: &[u32],
    eos: u32,
    cfg: &RlConfig,
    reward_fn: &dyn Fn(&[u32], &[u32]) -> f64,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutGroup> {
    let mut group = RolloutGroup {
        prompt: prompt.to_vec(),
        responses: Vec::with_capacity(cfg.group_size),
        rewards: Vec::with_capacity(cfg.group_size),
        old_logprobs: Vec::with_capacity(cfg.group_size),
    };
    for _ in 0..cfg.group_size {
        let r = sample_rollout(
            model,
            prompt,
            eos,
            cfg.rollout_temperature,
            cfg.max_new_tokens,
            rng,
        )?;
        group.rewards.push(reward_fn(prompt, &r.sequence.response));
        group.responses.push(r.sequence.response);
        group.old_logprobs.push(r.logprobs);
    }
    Ok(group)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct GrpoDiagnostics {
    pub mean_ratio: f64,
    pub clip_frac: f64,
    pub mean_kl: f64,
    pub mean_entropy: f64,
    pub mean_reward: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone)]
pub struct GrpoOutput {
    /// Clipped surrogate plus KL penalty.
    pub loss: f64,
    pub surrogate: f64,
    pub grads: Vec<f64>,
    pub diagnostics: GrpoDiagnostics,
}

/// Loss, gradient and diagnostics for one batch of rollout groups.
pub fn grpo_update(
    model: &PolicyModel,
    groups: &[RolloutGroup],
    cfg: &RlConfig,
    reference: &PolicyModel,
) -> Result<GrpoOutput> {
    cfg.validate()?;
    if model.vocab_size() != reference.vocab_size() {
        return domain("policy and reference vocabularies differ");
    }
    for g in groups {
        g.check(cfg.group_size)?;
    }
    let total_tokens: usize = groups.iter().flat_map(|g| &g.responses).map(Vec::len).sum();
    if total_tokens == 0 {
        return domain("rollout batch has no response tokens");
    }
    let w = 1.0 / total_tokens as f64;
    let (lo, hi) = (1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);

    let mut surrogate = 0.0;
    let mut kl_total = 0.0;
    let mut diag = GrpoDiagnostics {
        tokens: total_tokens,
        ..Default::default()
    };
    let mut reward_sum = 0.0;
    let mut grads = vec![0.0; model.num_params()];
    for group in groups {
        let advantages = group.advantages();
        reward_sum += group.rewards.iter().sum::<f64>();
        for ((response, old), &adv) in group
            .responses
            .iter()
            .zip(&group.old_logprobs)
            .zip(&advantages)
        {
            if response.is_empty() {
                continue;
            }
            let seq = TokenSequence::new(group.prompt.clone(), response.clone());
            let input = seq.teacher_forced_input();
            let trace = model.forward_trace(&input)?;
            let ref_logits = reference.forward_logits(&input)?;
            let mut dlogits = Matrix::zeros(trace.logits.rows, trace.logits.cols);
            for (t, (row, y)) in seq.supervised_positions(false)?.into_iter().enumerate() {
                let logp = log_softmax_unchecked(trace.logits.row(row));
                let logq = log_softmax_unchecked(ref_logits.row(row));
                let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
                let ratio = (logp[y as usize] - old[t]).exp();
                if !ratio.is_finite() {
                    return Err(Error::Rejected(format!(
                        "non-finite importance ratio at token {t}; diagnostics so far: {diag:?}"
                    )));
                }
                let clipped = ratio.clamp(lo, hi);
                surrogate += w * (ratio * adv).min(clipped * adv);
                diag.mean_ratio += w * ratio;
                let inactive = (adv > 0.0 && ratio > hi) || (adv < 0.0 && ratio < lo);
                if ratio < lo || ratio > hi {
                    diag.clip_frac += w;
                }
                let kl: f64 = p
                    .iter()
                    .zip(logp.iter().zip(&logq))
                    .map(|(&pv, (&a, &b))| if pv > 0.0 { pv * (a - b) } else { 0.0 })
                    .sum::<f64>()
                    .max(0.0);
                kl_total += w * kl;
                diag.mean_entropy += w * entropy(&p);

                let d = dlogits.row_mut(row);
                if !inactive && adv != 0.0 {
                    // −∂(ρA)/∂z = −ρA (onehot − p)
                    let s = w * ratio * adv;
                    for (dv, &pv) in d.iter_mut().zip(&p) {
                        *dv += s * pv;
                    }
                    d[y as usize] -= s;
                }
                if cfg.kl_coeff > 0.0 {
                    let s = w * cfg.kl_coeff;
                    for (j, dv) in d.iter_mut().enumerate() {
                        *dv += s * p[j] * (logp[j] - logq[j] - kl);
                    }
                }
            }
            for (acc, g) in grads.iter_mut().zip(model.backward(&trace, &dlogits)?) {
                *acc += g;
            }
        }
    }
    diag.mean_kl = kl_total;
    diag.mean_reward = reward_sum / (groups.len() * cfg.group_size) as f64;
    Ok(GrpoOutput {
        loss: -surrogate + cfg.kl_coeff * kl_total,
        surrogate,
        grads,
        diagnostics: diag,
    })
}

#[derive(Debug, Clone)]
pub struct RlOutcome {
    pub model: PolicyModel,
    pub metrics: Vec<MetricsRecord>,
}

/// Runs GRPO from `init` against the fixed `reference` over `prompts`.
/// Rollouts for prompt `j` of step `s` use the stream `derive_seed(seed, [s, j])`.
#[allow(clippy::too_many_arguments)]
pub fn train_rl(
    init: &PolicyModel,
    reference: &PolicyModel,
    vocab: Vocabulary,
    prompts: &[Vec<u32>],
    cfg: &RlConfig,
    reward_fn: &dyn Fn(&[u32], &[u32]) -> f64,
    ctx: &MetricsContext,
    mut on_record: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<RlOutcome> {
    cfg.validate()?;
    if init.vocab_size() != vocab.size || reference.vocab_size() != vocab.size {
        return Err(Error::Config(format!(
            "checkpoint vocabulary {} / reference {} does not match task vocabulary {}",
            init.vocab_size(),
            reference.vocab_size(),
            vocab.size
        )));
    }
    if prompts.is_empty() {
        return domain("no RL prompts");
    }
    let mut model = init.clone();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        model.num_params(),
    );
    let per_epoch = prompts.len().div_ceil(cfg.batch_prompts);
    let total_steps = match (cfg.epochs, cfg.max_steps) {
        (0, _) => 0,
        (_, Some(n)) => n,
        (e, None) => e * per_epoch,
    };
    let mut metrics = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..total_steps {
        let epoch = step / per_epoch;
        let slot = step % per_epoch;
        if slot == 0 {
            order = (0..prompts.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
                ctx.seed,
                &[u64::MAX, epoch as u64],
            )));
        }
        let batch =
            &order[slot * cfg.batch_prompts..((slot + 1) * cfg.batch_prompts).min(order.len())];
        let groups = batch
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, &[step as u64, j as u64]));
                collect_group(&model, &prompts[i], vocab.eos, cfg, reward_fn, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let out = grpo_update(&model, &groups, cfg, reference)?;
        opt.apply(&mut model, &out.grads)?;
        let d = out.diagnostics;
        let rec = ctx.record(
            step as u64,
            [
                ("mean_reward", d.mean_reward),
                ("kl_to_ref", d.mean_kl),
                ("entropy", d.mean_entropy),
                ("clip_frac", d.clip_frac),
                ("mean_ratio", d.mean_ratio),
                ("loss", out.loss),
            ],
        );
        on_record(&rec)?;
        metrics.push(rec);
    }
    Ok(RlOutcome { model, metrics })
}

/// Convenience reward closure for a task family.
pub fn task_reward(spec: TaskSpec) -> impl Fn(&[u32], &[u32]) -> f64 {
    move |prompt, response| reward(&spec, prompt, response)
}
