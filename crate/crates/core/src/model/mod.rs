//! Tiny autoregressive policies.
//!
//! Two kinds share one surface: an order-k conditional table used for exact
//! enumeration work, and a pre-norm micro-transformer used for training
//! experiments. Both expose forward logits, a manual reverse pass, sampling and
//! a flat parameter vector.

mod checkpoint;
mod optim;
mod sampling;
mod tabular;
mod transformer;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::numerics::log_softmax_unchecked;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Architecture, Checkpoint, CheckpointManifest, FORMAT_VERSION,
};
pub use optim::{AdamW, AdamWConfig};
pub use sampling::{sample_rollout, sample_sequence, Rollout};
pub use tabular::TabularModel;
pub use transformer::{MicroTransformer, TransformerConfig};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }
}

/// Token alphabet with its special ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: usize,
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
}

impl Vocabulary {
    pub fn new(size: usize, bos: u32, eos: u32, pad: u32) -> Result<Self> {
        if size < 3 {
            return domain(format!("vocabulary size {size} < 3"));
        }
        if bos == eos || bos == pad || eos == pad {
            return domain("special token ids must be distinct");
        }
        if [bos, eos, pad].iter().any(|&id| id as usize >= size) {
            return domain("special token id outside vocabulary");
        }
        Ok(Self {
            size,
            bos,
            eos,
            pad,
        })
    }

    pub fn contains(&self, id: u32) -> bool {
        (id as usize) < self.size
    }
}

/// A prompt and its (possibly partial) response.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
}

impl TokenSequence {
    pub fn new(prompt: Vec<u32>, response: Vec<u32>) -> Self {
        Self { prompt, response }
    }

    pub fn is_complete(&self, eos: u32) -> bool {
        self.response.last() == Some(&eos)
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self
            .prompt
            .iter()
            .chain(&self.response)
            .find(|&&id| id as usize >= vocab_size)
        {
            Some(id) => domain(format!(
                "token id {id} outside vocabulary of size {vocab_size}"
            )),
            None => Ok(()),
        }
    }

    /// Model input for teacher forcing: prompt followed by all response tokens
    /// but the last. Row `t` of the resulting logits predicts `full[t + 1]`.
    pub fn teacher_forced_input(&self) -> Vec<u32> {
        let mut full = self.prompt.clone();
        full.extend_from_slice(&self.response);
        full.pop();
        full
    }

    /// `(row, target)` pairs over the teacher-forced input. With
    /// `include_prompt`, prompt-token predictions are included as well.
    pub fn supervised_positions(&self, include_prompt: bool) -> Result<Vec<(usize, u32)>> {
        if self.prompt.is_empty() {
            return domain("sequence has an empty prompt; nothing to condition on");
        }
        let start = if include_prompt { 1 } else { self.prompt.len() };
        let full: Vec<u32> = self.prompt.iter().chain(&self.response).copied().collect();
        Ok((start..full.len()).map(|i| (i - 1, full[i])).collect())
    }
}

/// Per-call activation record needed by [`PolicyModel::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    pub logits: Matrix,
    inner: TraceInner,
}

#[derive(Debug, Clone)]
enum TraceInner {
    Tabular(Vec<usize>),
    Transformer(Box<transformer::Activations>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyModel {
    Tabular(TabularModel),
    Transformer(MicroTransformer),
}

impl PolicyModel {
    pub fn vocab_size(&self) -> usize {
        match self {
            Self::Tabular(m) => m.vocab_size,
            Self::Transformer(m) => m.config.vocab_size,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Tabular(_) => "tabular",
            Self::Transformer(_) => "micro-transformer",
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Self::Tabular(m) => &m.params,
            Self::Transformer(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Self::Tabular(m) => &mut m.params,
            Self::Transformer(m) => &mut m.params,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Longest accepted input; tabular models are unbounded.
    pub fn context_len(&self) -> usize {
        match self {
            Self::Tabular(_) => usize::MAX,
            Self::Transformer(m) => m.config.context,
        }
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for p in self.params_mut() {
            *p = *p as f32 as f64;
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.context_len() {
            return domain(format!(
                "input of length {} exceeds context length {}",
                tokens.len(),
                self.context_len()
            ));
        }
        let v = self.vocab_size();
        if let Some(id) = tokens.iter().find(|&&id| id as usize >= v) {
            return domain(format!("token id {id} outside vocabulary of size {v}"));
        }
        Ok(())
    }

    /// Logits for every position; row `t` conditions on `tokens[..=t]`.
    pub fn forward_logits(&self, tokens: &[u32]) -> Result<Matrix> {
        Ok(self.forward_trace(tokens)?.logits)
    }

    pub fn forward_trace(&self, tokens: &[u32]) -> Result<Trace> {
        self.check_tokens(tokens)?;
        Ok(match self {
            Self::Tabular(m) => {
                let (logits, rows) = m.forward(tokens);
                Trace {
                    logits,
                    inner: TraceInner::Tabular(rows),
                }
            }
            Self::Transformer(m) => {
                let acts = m.forward(tokens);
                Trace {
                    logits: acts.logits.clone(),
                    inner: TraceInner::Transformer(Box::new(acts)),
                }
            }
        })
    }

    /// Exact reverse-mode gradient of `Σ_{t,v} dlogits[t,v] · logits[t,v]`
    /// with respect to the parameters.
    pub fn backward(&self, trace: &Trace, dlogits: &Matrix) -> Result<Vec<f64>> {
        if dlogits.rows != trace.logits.rows {
            return Err(Error::Shape {
                expected: trace.logits.rows,
                found: dlogits.rows,
            });
        }
        if dlogits.cols != trace.logits.cols {
            return Err(Error::Shape {
                expected: trace.logits.cols,
                found: dlogits.cols,
            });
        }
        let mut grads = vec![0.0; self.num_params()];
        match (self, &trace.inner) {
            (Self::Tabular(m), TraceInner::Tabular(rows)) => m.backward(rows, dlogits, &mut grads),
            (Self::Transformer(m), TraceInner::Transformer(acts)) => {
                m.backward(acts, dlogits, &mut grads)
            }
            _ => {
                return Err(Error::Unsupported(
                    "trace was produced by a different model kind".into(),
                ))
            }
        }
        Ok(grads)
    }

    /// Last-layer activations feeding the logits projection, one row per position.
    pub fn hidden_states(&self, tokens: &[u32]) -> Result<Matrix> {
        match self {
            Self::Tabular(_) => Err(Error::Unsupported(
                "hidden states are only defined for micro-transformers".into(),
            )),
            Self::Transformer(m) => {
                self.check_tokens(tokens)?;
                Ok(m.forward(tokens).hidden())
            }
        }
    }

    /// Next-token log-probabilities after `context`.
    pub fn next_logprobs(&self, context: &[u32]) -> Result<Vec<f64>> {
        match self {
            Self::Tabular(m) => {
                self.check_tokens(context)?;
                Ok(log_softmax_unchecked(m.row(m.row_index(context))))
            }
            Self::Transformer(_) => {
                if context.is_empty() {
                    return domain("a micro-transformer needs at least one context token");
                }
                let logits = self.forward_logits(context)?;
                Ok(log_softmax_unchecked(logits.row(logits.rows - 1)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_invariants() {
        assert!(Vocabulary::new(3, 0, 1, 2).is_ok());
        assert!(Vocabulary::new(2, 0, 1, 1).is_err());
        assert!(Vocabulary::new(4, 0, 0, 2).is_err());
        assert!(Vocabulary::new(4, 0, 1, 7).is_err());
    }

    #[test]
    fn supervised_positions_follow_mask() {
        let seq = TokenSequence::new(vec![1, 5, 6], vec![7, 2]);
        assert_eq!(seq.teacher_forced_input(), vec![1, 5, 6, 7]);
        assert_eq!(
            seq.supervised_positions(false).unwrap(),
            vec![(2, 7), (3, 2)]
        );
        assert_eq!(
            seq.supervised_positions(true).unwrap(),
            vec![(0, 5), (1, 6), (2, 7), (3, 2)]
        );
        assert!(TokenSequence::new(vec![], vec![2])
            .supervised_positions(false)
            .is_err());
    }
}
