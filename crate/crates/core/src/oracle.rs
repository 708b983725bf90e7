//! Brute-force enumeration over small response spaces.
//!
//! Every closed form used elsewhere is checked here by explicit summation:
//! the Gibbs optimum of the KL-regularized objective, two-stage composition,
//! and the exact token-level policy built from the soft Q-function.
//!
//! A response is complete when it emits `eos` or reaches the horizon;
//! rewards are defined on complete responses only. Enumeration order is
//! lexicographic over token ids.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::model::{PolicyModel, TabularModel};
use crate::numerics::{kl_divergence, log_softmax_unchecked, lse, total_variation};

/// Anything that yields next-token log-probabilities for a context.
pub trait NextTokenPolicy {
    fn vocab_size(&self) -> usize;
    fn next_logprobs(&self, context: &[u32]) -> Result<Vec<f64>>;
}

impl NextTokenPolicy for PolicyModel {
    fn vocab_size(&self) -> usize {
        PolicyModel::vocab_size(self)
    }

    fn next_logprobs(&self, context: &[u32]) -> Result<Vec<f64>> {
        PolicyModel::next_logprobs(self, context)
    }
}

pub type RewardFn = Arc<dyn Fn(&[u32]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct EnumerableTask {
    pub vocab_size: usize,
    pub eos: u32,
    pub prompt: Vec<u32>,
    pub horizon: usize,
    reward: RewardFn,
}

impl fmt::Debug for EnumerableTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnumerableTask")
            .field("vocab_size", &self.vocab_size)
            .field("eos", &self.eos)
            .field("prompt", &self.prompt)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

impl EnumerableTask {
    pub const MAX_VOCAB: usize = 6;
    pub const MAX_HORIZON: usize = 6;
    pub const MAX_SEQUENCES: u64 = 50_000;

    pub fn new(
        vocab_size: usize,
        eos: u32,
        prompt: Vec<u32>,
        horizon: usize,
        reward: impl Fn(&[u32]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(2..=Self::MAX_VOCAB).contains(&vocab_size) {
            return domain(format!(
                "oracle vocabulary size {vocab_size} outside [2, {}]",
                Self::MAX_VOCAB
            ));
        }
        if !(1..=Self::MAX_HORIZON).contains(&horizon) {
            return domain(format!(
                "horizon {horizon} outside [1, {}]",
                Self::MAX_HORIZON
            ));
        }
        if eos as usize >= vocab_size || prompt.iter().any(|&t| t as usize >= vocab_size) {
            return domain("token id outside the oracle vocabulary");
        }
        Ok(Self {
            vocab_size,
            eos,
            prompt,
            horizon,
            reward: Arc::new(reward),
        })
    }

    /// Task whose reward is looked up from a table aligned with enumeration order.
    pub fn with_reward_table(
        vocab_size: usize,
        eos: u32,
        prompt: Vec<u32>,
        horizon: usize,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        let probe = Self::new(vocab_size, eos, prompt.clone(), horizon, |_| 0.0)?;
        let seqs = enumerate_sequences(&probe)?;
        if seqs.len() != rewards.len() {
            return Err(Error::Shape {
                expected: seqs.len(),
                found: rewards.len(),
            });
        }
        let table: std::collections::HashMap<Vec<u32>, f64> =
            seqs.into_iter().zip(rewards).collect();
        Self::new(vocab_size, eos, prompt, horizon, move |y| {
            table.get(y).copied().unwrap_or(f64::NAN)
        })
    }

    pub fn reward(&self, response: &[u32]) -> f64 {
        (self.reward)(response)
    }

    pub fn is_complete(&self, prefix: &[u32]) -> bool {
        prefix.len() == self.horizon || prefix.last() == Some(&self.eos)
    }

    /// Number of complete responses.
    pub fn sequence_count(&self) -> u64 {
        let branch = self.vocab_size as u64 - 1;
        let short: u64 = (1..self.horizon).map(|l| branch.pow(l as u32 - 1)).sum();
        short + branch.pow(self.horizon as u32 - 1) * self.vocab_size as u64
    }

    fn check_prefix(&self, prefix: &[u32]) -> Result<()> {
        if prefix.len() > self.horizon {
            return domain(format!("prefix longer than horizon {}", self.horizon));
        }
        if let Some(&t) = prefix.iter().find(|&&t| t as usize >= self.vocab_size) {
            return domain(format!("prefix token {t} outside vocabulary"));
        }
        if prefix.iter().rev().skip(1).any(|&t| t == self.eos) {
            return domain("prefix continues past end-of-sequence");
        }
        Ok(())
    }

    fn context(&self, prefix: &[u32]) -> Vec<u32> {
        let mut c = self.prompt.clone();
        c.extend_from_slice(prefix);
        c
    }
}

pub fn enumerate_sequences(task: &EnumerableTask) -> Result<Vec<Vec<u32>>> {
    enumerate_sequences_capped(task, EnumerableTask::MAX_SEQUENCES)
}

pub fn enumerate_sequences_capped(task: &EnumerableTask, cap: u64) -> Result<Vec<Vec<u32>>> {
    let count = task.sequence_count();
    if count > cap {
        return Err(Error::TooLarge { count, cap });
    }
    fn walk(task: &EnumerableTask, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if task.is_complete(prefix) {
            out.push(prefix.clone());
            return;
        }
        for v in 0..task.vocab_size as u32 {
            prefix.push(v);
            walk(task, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::with_capacity(count as usize);
    walk(task, &mut Vec::new(), &mut out);
    Ok(out)
}

/// Explicit distribution over a task's complete responses, in enumeration order.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDistribution {
    pub sequences: Vec<Vec<u32>>,
    pub logprobs: Vec<f64>,
    /// Log of the unnormalized mass before renormalization (0 for a plain policy).
    pub log_partition: f64,
}

impl SequenceDistribution {
    pub fn probabilities(&self) -> Vec<f64> {
        self.logprobs.iter().map(|l| l.exp()).collect()
    }

    pub fn partition_value(&self) -> f64 {
        self.log_partition.exp()
    }

    pub fn tv(&self, other: &Self) -> Result<f64> {
        total_variation(&self.probabilities(), &other.probabilities())
    }

    /// `P(next = v | prefix)` obtained by marginalizing the joint table.
    pub fn conditional(&self, prefix: &[u32], vocab_size: usize) -> Result<Vec<f64>> {
        let mut mass = vec![f64::NEG_INFINITY; vocab_size];
        let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); vocab_size];
        for (seq, &lp) in self.sequences.iter().zip(&self.logprobs) {
            if seq.len() > prefix.len() && seq.starts_with(prefix) {
                buckets[seq[prefix.len()] as usize].push(lp);
            }
        }
        for (m, b) in mass.iter_mut().zip(&buckets) {
            *m = lse(b);
        }
        let total = lse(&mass);
        if total == f64::NEG_INFINITY {
            return domain("prefix has zero mass or is complete");
        }
        Ok(mass.iter().map(|m| (m - total).exp()).collect())
    }
}

/// The distribution a next-token policy induces over complete responses.
pub fn sequence_distribution(
    policy: &dyn NextTokenPolicy,
    task: &EnumerableTask,
) -> Result<SequenceDistribution> {
    if policy.vocab_size() != task.vocab_size {
        return domain(format!(
            "policy vocabulary {} differs from task vocabulary {}",
            policy.vocab_size(),
            task.vocab_size
        ));
    }
    fn walk(
        policy: &dyn NextTokenPolicy,
        task: &EnumerableTask,
        prefix: &mut Vec<u32>,
        acc: f64,
        seqs: &mut Vec<Vec<u32>>,
        lps: &mut Vec<f64>,
    ) -> Result<()> {
        if task.is_complete(prefix) {
            seqs.push(prefix.clone());
            lps.push(acc);
            return Ok(());
        }
        let lp = policy.next_logprobs(&task.context(prefix))?;
        for (v, l) in lp.iter().enumerate().take(task.vocab_size) {
            prefix.push(v as u32);
            walk(policy, task, prefix, acc + l, seqs, lps)?;
            prefix.pop();
        }
        Ok(())
    }
    let count = task.sequence_count();
    if count > EnumerableTask::MAX_SEQUENCES {
        return Err(Error::TooLarge {
            count,
            cap: EnumerableTask::MAX_SEQUENCES,
        });
    }
    let mut sequences = Vec::new();
    let mut logprobs = Vec::new();
    walk(
        policy,
        task,
        &mut Vec::new(),
        0.0,
        &mut sequences,
        &mut logprobs,
    )?;
    Ok(SequenceDistribution {
        sequences,
        logprobs,
        log_partition: 0.0,
    })
}

fn rewards_of(task: &EnumerableTask, sequences: &[Vec<u32>]) -> Result<Vec<f64>> {
    sequences
        .iter()
        .map(|s| {
            let r = task.reward(s);
            if r.is_finite() {
                Ok(r)
            } else {
                domain(format!("non-finite reward {r} for sequence {s:?}"))
            }
        })
        .collect()
}

/// `π(y) ∝ ref(y) · exp(temp · R(y))`, normalized in log space.
pub fn gibbs_policy(
    reference: &SequenceDistribution,
    task: &EnumerableTask,
    temp: f64,
) -> Result<SequenceDistribution> {
    if !(temp >= 0.0) || !temp.is_finite() {
        return domain(format!(
            "temperature coefficient must be finite and >= 0, got {temp}"
        ));
    }
    if let Some(i) = reference
        .logprobs
        .iter()
        .position(|&l| l == f64::NEG_INFINITY)
    {
        return domain(format!(
            "reference assigns zero mass to sequence {:?}",
            reference.sequences[i]
        ));
    }
    let rewards = rewards_of(task, &reference.sequences)?;
    let scores: Vec<f64> = reference
        .logprobs
        .iter()
        .zip(&rewards)
        .map(|(lp, r)| lp + temp * r)
        .collect();
    let log_z = lse(&scores);
    Ok(SequenceDistribution {
        sequences: reference.sequences.clone(),
        logprobs: scores.iter().map(|s| s - log_z).collect(),
        log_partition: log_z,
    })
}

pub fn gibbs_from_policy(
    policy: &dyn NextTokenPolicy,
    task: &EnumerableTask,
    temp: f64,
) -> Result<SequenceDistribution> {
    gibbs_policy(&sequence_distribution(policy, task)?, task, temp)
}

/// `E_π[R] − KL(π ‖ ref) / η` by exact summation.
pub fn kl_rl_objective(
    pi: &[f64],
    reference: &SequenceDistribution,
    task: &EnumerableTask,
    eta: f64,
) -> Result<f64> {
    if !(eta > 0.0) {
        return domain(format!("eta must be positive, got {eta}"));
    }
    let rewards = rewards_of(task, &reference.sequences)?;
    if pi.len() != rewards.len() {
        return Err(Error::Shape {
            expected: rewards.len(),
            found: pi.len(),
        });
    }
    let expected: f64 = pi.iter().zip(&rewards).map(|(p, r)| p * r).sum();
    let kl = kl_divergence(pi, &reference.probabilities())?;
    Ok(expected - kl / eta)
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimalityReport {
    pub trials: usize,
    pub violations: usize,
    /// Largest `J(π) − J(π*)` observed (negative when π* always wins).
    pub max_excess: f64,
    /// `|J(π*) − ln Z / η|`.
    pub identity_error: f64,
    pub counterexample: Option<Vec<f64>>,
    pub passed: bool,
}

/// Randomized check that the Gibbs distribution maximizes the objective.
/// Alternatives are `softmax(log π* + σ·ξ)` with `ξ` standard normal and σ
/// drawn per trial from `[0.01, 2]`.
pub fn verify_gibbs_optimality<R: Rng + ?Sized>(
    task: &EnumerableTask,
    reference: &SequenceDistribution,
    eta: f64,
    trials: usize,
    rng: &mut R,
) -> Result<OptimalityReport> {
    if trials == 0 {
        return domain("at least one trial is required");
    }
    let optimum = gibbs_policy(reference, task, eta)?;
    let p_star = optimum.probabilities();
    let j_star = kl_rl_objective(&p_star, reference, task, eta)?;
    let identity_error = (j_star - optimum.log_partition / eta).abs();

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut violations = 0;
    let mut max_excess = f64::NEG_INFINITY;
    let mut counterexample = None;
    for _ in 0..trials {
        let sigma = rng.gen_range(0.01..2.0);
        let z: Vec<f64> = optimum
            .logprobs
            .iter()
            .map(|l| l + sigma * normal.sample(rng))
            .collect();
        let pi: Vec<f64> = log_softmax_unchecked(&z)
            .into_iter()
            .map(f64::exp)
            .collect();
        let j = kl_rl_objective(&pi, reference, task, eta)?;
        let excess = j - j_star;
        max_excess = max_excess.max(excess);
        if excess > 1e-9 {
            violations += 1;
            counterexample.get_or_insert(pi);
        }
    }
    Ok(OptimalityReport {
        trials,
        violations,
        max_excess,
        identity_error,
        counterexample,
        passed: violations == 0 && identity_error <= 1e-9,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    pub eta: f64,
    pub lambda: f64,
    pub beta: f64,
    /// TV between the composed two-stage optimum and the global optimum.
    pub tv: f64,
    pub passed: bool,
}

/// Composes a `β = η − λ` Gibbs stage with a `λ` stage and compares against
/// the global `η` Gibbs optimum.
pub fn consistency_check(
    base: &SequenceDistribution,
    task: &EnumerableTask,
    eta: f64,
    lambda: f64,
) -> Result<ConsistencyReport> {
    if !(0.0 < lambda && lambda < eta) {
        return domain(format!(
            "need 0 < lambda < eta, got lambda {lambda}, eta {eta}"
        ));
    }
    let beta = eta - lambda;
    let stage1 = gibbs_policy(base, task, beta)?;
    let stage2 = gibbs_policy(&stage1, task, lambda)?;
    let global = gibbs_policy(base, task, eta)?;
    let tv = stage2.tv(&global)?;
    Ok(ConsistencyReport {
        eta,
        lambda,
        beta,
        tv,
        passed: tv <= 1e-10,
    })
}

/// `Q*(prefix) = log Σ_completions π(completion | prefix) · exp(β · R)`.
pub fn soft_q(
    policy: &dyn NextTokenPolicy,
    task: &EnumerableTask,
    prefix: &[u32],
    beta: f64,
) -> Result<f64> {
    task.check_prefix(prefix)?;
    if policy.vocab_size() != task.vocab_size {
        return domain("policy and task vocabularies differ");
    }
    fn q(
        policy: &dyn NextTokenPolicy,
        task: &EnumerableTask,
        prefix: &mut Vec<u32>,
        beta: f64,
    ) -> Result<f64> {
        if task.is_complete(prefix) {
            let r = task.reward(prefix);
            if !r.is_finite() {
                return domain(format!("non-finite reward for {prefix:?}"));
            }
            return Ok(beta * r);
        }
        let lp = policy.next_logprobs(&task.context(prefix))?;
        let mut terms = Vec::with_capacity(task.vocab_size);
        for (v, l) in lp.iter().enumerate() {
            prefix.push(v as u32);
            terms.push(l + q(policy, task, prefix, beta)?);
            prefix.pop();
        }
        Ok(lse(&terms))
    }
    q(policy, task, &mut prefix.to_vec(), beta)
}

/// `A*(token | prefix) = Q*(prefix + token) − Q*(prefix)`.
pub fn soft_advantage(
    policy: &dyn NextTokenPolicy,
    task: &EnumerableTask,
    prefix: &[u32],
    token: u32,
    beta: f64,
) -> Result<f64> {
    task.check_prefix(prefix)?;
    if task.is_complete(prefix) {
        return domain("cannot extend a complete sequence");
    }
    if token as usize >= task.vocab_size {
        return domain(format!("token {token} outside vocabulary"));
    }
    let mut next = prefix.to_vec();
    next.push(token);
    Ok(soft_q(policy, task, &next, beta)? - soft_q(policy, task, prefix, beta)?)
}

/// `π(v | prefix) ∝ π_base(v | prefix) · exp(A*(v | prefix))`.
pub fn exact_token_policy(
    policy: &dyn NextTokenPolicy,
    task: &EnumerableTask,
    prefix: &[u32],
    beta: f64,
) -> Result<Vec<f64>> {
    task.check_prefix(prefix)?;
    if task.is_complete(prefix) {
        return domain("no next token after a complete sequence");
    }
    let lp = policy.next_logprobs(&task.context(prefix))?;
    let q_prefix = soft_q(policy, task, prefix, beta)?;
    let mut scores = Vec::with_capacity(task.vocab_size);
    for (v, l) in lp.iter().enumerate() {
        let mut next = prefix.to_vec();
        next.push(v as u32);
        scores.push(l + soft_q(policy, task, &next, beta)? - q_prefix);
    }
    Ok(log_softmax_unchecked(&scores)
        .into_iter()
        .map(f64::exp)
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct PositionGap {
    pub position: usize,
    pub oracle_token: u32,
    pub oracle_advantage: f64,
    /// Largest exact advantage among non-oracle tokens.
    pub best_other_advantage: f64,
    pub approx_oracle: f64,
    pub approx_other: f64,
    pub error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdvantageGapReport {
    pub beta: f64,
    pub positions: Vec<PositionGap>,
    pub max_abs_error: f64,
}

/// Compares exact soft advantages along an oracle response with the
/// indicator approximation `A ≈ β · 1[y = y*]`.
pub fn advantage_gap_report(
    policy: &dyn NextTokenPolicy,
    task: &EnumerableTask,
    oracle: &[u32],
    beta: f64,
) -> Result<AdvantageGapReport> {
    task.check_prefix(oracle)?;
    if !task.is_complete(oracle) {
        return domain("oracle response is not complete");
    }
    if task.reward(oracle) != 1.0 {
        return domain("oracle response must earn reward 1");
    }
    let mut positions = Vec::with_capacity(oracle.len());
    let mut max_abs_error: f64 = 0.0;
    for t in 0..oracle.len() {
        let prefix = &oracle[..t];
        let mut oracle_advantage = 0.0;
        let mut best_other = f64::NEG_INFINITY;
        let mut error: f64 = 0.0;
        for v in 0..task.vocab_size as u32 {
            let a = soft_advantage(policy, task, prefix, v, beta)?;
            if v == oracle[t] {
                oracle_advantage = a;
                error = error.max((a - beta).abs());
            } else {
                best_other = best_other.max(a);
                error = error.max(a.abs());
            }
        }
        max_abs_error = max_abs_error.max(error);
        positions.push(PositionGap {
            position: t,
            oracle_token: oracle[t],
            oracle_advantage,
            best_other_advantage: best_other,
            approx_oracle: beta,
            approx_other: 0.0,
            error,
        });
    }
    Ok(AdvantageGapReport {
        beta,
        positions,
        max_abs_error,
    })
}

/// Every incomplete prefix of a task, in enumeration order.
pub fn incomplete_prefixes(task: &EnumerableTask) -> Vec<Vec<u32>> {
    fn walk(task: &EnumerableTask, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if task.is_complete(prefix) {
            return;
        }
        out.push(prefix.clone());
        for v in 0..task.vocab_size as u32 {
            prefix.push(v);
            walk(task, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    walk(task, &mut Vec::new(), &mut out);
    out
}

/// One line of the verification suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteCheck {
    pub check: String,
    pub max_error: f64,
    pub pass: bool,
}

fn random_suite_task<R: Rng + ?Sized>(rng: &mut R) -> Result<(EnumerableTask, PolicyModel)> {
    let vocab = rng.gen_range(2..=4);
    let horizon = rng.gen_range(1..=3);
    let eos = rng.gen_range(0..vocab) as u32;
    let prompt: Vec<u32> = (0..rng.gen_range(0..=2))
        .map(|_| rng.gen_range(0..vocab) as u32)
        .collect();
    let count = EnumerableTask::new(vocab, eos, prompt.clone(), horizon, |_| 0.0)?.sequence_count()
        as usize;
    let rewards = if rng.gen_bool(0.5) {
        (0..count).map(|_| rng.gen::<f64>()).collect()
    } else {
        let hit = rng.gen_range(0..count);
        (0..count).map(|i| (i == hit) as u8 as f64).collect()
    };
    let task = EnumerableTask::with_reward_table(vocab, eos, prompt, horizon, rewards)?;
    let mut policy = PolicyModel::Tabular(TabularModel::zeros(vocab, 2)?);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for p in policy.params_mut() {
        *p = normal.sample(rng);
    }
    Ok((task, policy))
}

/// Runs the exact-oracle checks on `tasks` random small tasks: Gibbs
/// optimality, two-stage consistency and token-level exactness.
pub fn verification_suite(seed: u64, tasks: usize) -> Result<Vec<SuiteCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut optimality: f64 = f64::NEG_INFINITY;
    let mut identity: f64 = 0.0;
    let mut consistency: f64 = 0.0;
    let mut exactness: f64 = 0.0;
    for _ in 0..tasks {
        let (task, policy) = random_suite_task(&mut rng)?;
        let base = sequence_distribution(&policy, &task)?;
        let eta = rng.gen_range(0.2..5.0);
        let report = verify_gibbs_optimality(&task, &base, eta, 1000, &mut rng)?;
        optimality = optimality.max(report.max_excess);
        identity = identity.max(report.identity_error);
        for (eta, lambda) in [(2.0, 0.5), (1.0, 0.9), (5.0, 1.0)] {
            consistency = consistency.max(consistency_check(&base, &task, eta, lambda)?.tv);
        }
        for beta in [0.0, 1.0, 5.0] {
            let gibbs = gibbs_policy(&base, &task, beta)?;
            for prefix in incomplete_prefixes(&task) {
                let exact = exact_token_policy(&policy, &task, &prefix, beta)?;
                let cond = gibbs.conditional(&prefix, task.vocab_size)?;
                for (a, b) in exact.iter().zip(&cond) {
                    exactness = exactness.max((a - b).abs());
                }
            }
        }
    }
    let line = |check: &str, max_error: f64, tol: f64| SuiteCheck {
        check: check.to_string(),
        max_error,
        pass: max_error <= tol,
    };
    Ok(vec![
        line("gibbs-optimality", optimality.max(0.0), 1e-9),
        line("log-partition-identity", identity, 1e-9),
        line("two-stage-consistency", consistency, 1e-10),
        line("token-exactness", exactness, 1e-10),
    ])
}
