use super::Matrix;
use crate::error::{domain, Result};

/// Order-k conditional logit table.
///
/// The row for a context is addressed by its last `order` tokens; slots that
/// reach before the start of the input are encoded as 0 and token `id` as
/// `id + 1`, so the empty context has its own row. With `order` at least the
/// longest context the table represents an arbitrary prefix-conditional policy.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel {
    pub vocab_size: usize,
    pub order: usize,
    pub params: Vec<f64>,
}

impl TabularModel {
    /// Hard cap on table size; guards against accidental `(V + 1)^k` blowups.
    pub const MAX_PARAMS: usize = 1 << 24;

    pub fn zeros(vocab_size: usize, order: usize) -> Result<Self> {
        if vocab_size == 0 {
            return domain("tabular model needs a nonempty vocabulary");
        }
        let rows = (vocab_size + 1)
            .checked_pow(order as u32)
            .filter(|r| r.saturating_mul(vocab_size) <= Self::MAX_PARAMS);
        match rows {
            Some(rows) => Ok(Self {
                vocab_size,
                order,
                params: vec![0.0; rows * vocab_size],
            }),
            None => domain(format!(
                "tabular table for vocab {vocab_size}, order {order} exceeds {} parameters",
                Self::MAX_PARAMS
            )),
        }
    }

    pub fn from_params(vocab_size: usize, order: usize, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(vocab_size, order)?;
        if params.len() != m.params.len() {
            return Err(crate::Error::Shape {
                expected: m.params.len(),
                found: params.len(),
            });
        }
        m.params = params;
        Ok(m)
    }

    /// Maximum-likelihood table from counts: `logit = ln(count + pseudo_count)`.
    /// Every observed position `t` of each sequence contributes one count to
    /// the row addressed by `seq[..t]`.
    pub fn fit_counts(
        vocab_size: usize,
        order: usize,
        corpus: &[Vec<u32>],
        pseudo_count: f64,
    ) -> Result<Self> {
        if pseudo_count <= 0.0 {
            return domain("pseudo_count must be positive to keep logits finite");
        }
        let mut m = Self::zeros(vocab_size, order)?;
        let mut counts = vec![0.0; m.params.len()];
        for seq in corpus {
            for t in 0..seq.len() {
                let next = seq[t] as usize;
                if next >= vocab_size {
                    return domain(format!("token id {next} outside vocabulary"));
                }
                let r = m.row_index(&seq[..t]);
                counts[r * vocab_size + next] += 1.0;
            }
        }
        for (p, c) in m.params.iter_mut().zip(counts) {
            *p = (c + pseudo_count).ln();
        }
        Ok(m)
    }

    pub fn num_rows(&self) -> usize {
        self.params.len() / self.vocab_size
    }

    pub fn row_index(&self, context: &[u32]) -> usize {
        let base = self.vocab_size + 1;
        let mut index = 0;
        let mut scale = 1;
        for k in 0..self.order {
            let slot = match context.len().checked_sub(k + 1) {
                Some(pos) => context[pos] as usize + 1,
                None => 0,
            };
            index += slot * scale;
            scale *= base;
        }
        index
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.params[index * self.vocab_size..(index + 1) * self.vocab_size]
    }

    pub fn row_mut(&mut self, index: usize) -> &mut [f64] {
        let v = self.vocab_size;
        &mut self.params[index * v..(index + 1) * v]
    }

    pub(super) fn forward(&self, tokens: &[u32]) -> (Matrix, Vec<usize>) {
        let mut logits = Matrix::zeros(tokens.len(), self.vocab_size);
        let rows: Vec<usize> = (0..tokens.len())
            .map(|t| self.row_index(&tokens[..=t]))
            .collect();
        for (t, &r) in rows.iter().enumerate() {
            logits.row_mut(t).copy_from_slice(self.row(r));
        }
        (logits, rows)
    }

    pub(super) fn backward(&self, rows: &[usize], dlogits: &Matrix, grads: &mut [f64]) {
        let v = self.vocab_size;
        for (t, &r) in rows.iter().enumerate() {
            for (g, d) in grads[r * v..(r + 1) * v].iter_mut().zip(dlogits.row(t)) {
                *g += d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PolicyModel;
    use crate::numerics::softmax;
    use std::collections::HashMap;

    #[test]
    fn zero_table_is_uniform() {
        let m = PolicyModel::Tabular(TabularModel::zeros(5, 2).unwrap());
        let logits = m.forward_logits(&[0, 3, 4, 1]).unwrap();
        for row in logits.iter_rows() {
            for p in softmax(row).unwrap() {
                assert!((p - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn row_index_distinguishes_start_padding() {
        let m = TabularModel::zeros(3, 2).unwrap();
        assert_eq!(m.row_index(&[]), 0);
        assert_ne!(m.row_index(&[0]), m.row_index(&[0, 0]));
        assert_eq!(m.row_index(&[2, 1, 0]), m.row_index(&[1, 0]));
        assert!(m.row_index(&[2, 2]) < m.num_rows());
    }

    #[test]
    fn bigram_counts_match_empirical_conditionals() {
        let corpus = vec![vec![0, 1, 2, 1], vec![0, 1, 1, 2], vec![1, 2, 2, 0]];
        let m = TabularModel::fit_counts(3, 1, &corpus, 1e-12).unwrap();
        // Independent tally keyed by the previous token (None = sequence start).
        let mut table: HashMap<Option<u32>, [f64; 3]> = HashMap::new();
        for seq in &corpus {
            for t in 0..seq.len() {
                let prev = t.checked_sub(1).map(|p| seq[p]);
                table.entry(prev).or_insert([0.0; 3])[seq[t] as usize] += 1.0;
            }
        }
        let model = PolicyModel::Tabular(m);
        for (prev, counts) in table {
            let context: Vec<u32> = prev.into_iter().collect();
            let total: f64 = counts.iter().sum();
            let probs: Vec<f64> = model
                .next_logprobs(&context)
                .unwrap()
                .iter()
                .map(|l| l.exp())
                .collect();
            for (p, c) in probs.iter().zip(counts) {
                assert!(
                    (p - c / total).abs() < 1e-9,
                    "{prev:?}: {probs:?} vs {counts:?}"
                );
            }
        }
    }

    #[test]
    fn oversized_table_is_refused() {
        assert!(TabularModel::zeros(30, 8).is_err());
    }
}
