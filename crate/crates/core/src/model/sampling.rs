use rand::Rng;

use super::{PolicyModel, TokenSequence};
use crate::error::{domain, Result};
use crate::numerics::log_softmax_unchecked;

/// A sampled response together with the log-probabilities the sampling
/// policy (at temperature 1) assigned to each emitted token.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub sequence: TokenSequence,
    pub logprobs: Vec<f64>,
}

/// Draws an index from a normalized probability vector by inverse CDF.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Autoregressive sampling from `softmax(logits / temperature)` until `eos`,
/// `max_len` response tokens, or the model's context is full.
pub fn sample_rollout<R: Rng + ?Sized>(
    model: &PolicyModel,
    prompt: &[u32],
    eos: u32,
    temperature: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<Rollout> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return domain(format!("temperature must be positive, got {temperature}"));
    }
    if max_len == 0 {
        return domain("max_len must be at least 1");
    }
    let mut context = prompt.to_vec();
    let mut response = Vec::new();
    let mut logprobs = Vec::new();
    while response.len() < max_len && context.len() < model.context_len() {
        let lp = model.next_logprobs(&context)?;
        let scaled: Vec<f64> = lp.iter().map(|l| l / temperature).collect();
        let probs: Vec<f64> = log_softmax_unchecked(&scaled)
            .into_iter()
            .map(f64::exp)
            .collect();
        let tok = sample_index(&probs, rng) as u32;
        response.push(tok);
        logprobs.push(lp[tok as usize]);
        context.push(tok);
        if tok == eos {
            break;
        }
    }
    Ok(Rollout {
        sequence: TokenSequence::new(prompt.to_vec(), response),
        logprobs,
    })
}

pub fn sample_sequence<R: Rng + ?Sized>(
    model: &PolicyModel,
    prompt: &[u32],
    eos: u32,
    temperature: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<TokenSequence> {
    Ok(sample_rollout(model, prompt, eos, temperature, max_len, rng)?.sequence)
}
