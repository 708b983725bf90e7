//! Diagnostics comparing checkpoints and scoring samples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::{Matrix, PolicyModel, TokenSequence};
use crate::numerics::{kl_logspace, log_softmax_unchecked, softmax_unchecked, total_variation};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_PASS_KS: [usize; 4] = [1, 2, 4, 8];
pub const DEFAULT_OVERLAP_KS: [usize; 5] = [1, 5, 10, 50, 100];

/// Unbiased estimate of `P(at least one of k draws without replacement is
/// correct)` given `c` correct out of `n`: `1 − C(n−c, k) / C(n, k)`.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64> {
    if c > n {
        return domain(format!("correct count {c} exceeds sample count {n}"));
    }
    if k == 0 || k > n {
        return domain(format!("k = {k} must lie in [1, n = {n}]"));
    }
    if n - c < k {
        return Ok(1.0);
    }
    // ln[C(n−c, k) / C(n, k)] = Σ_{i<k} ln((n−c−i) / (n−i))
    let log_ratio: f64 = (0..k)
        .map(|i| ((n - c - i) as f64 / (n - i) as f64).ln())
        .sum();
    Ok((1.0 - log_ratio.exp()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAtKReport {
    pub schema_version: u32,
    /// `(n, c)` per prompt.
    pub per_prompt: Vec<(u64, u64)>,
    pub ks: Vec<usize>,
    /// Mean estimate across prompts for each k.
    pub estimates: BTreeMap<usize, f64>,
}

impl PassAtKReport {
    pub fn new(per_prompt: Vec<(u64, u64)>, ks: &[usize]) -> Result<Self> {
        if per_prompt.is_empty() {
            return domain("pass@k report needs at least one prompt");
        }
        let mut estimates = BTreeMap::new();
        for &k in ks {
            let mut acc = 0.0;
            for &(n, c) in &per_prompt {
                acc += pass_at_k(n, c, k as u64)?;
            }
            estimates.insert(k, acc / per_prompt.len() as f64);
        }
        let mut ks = ks.to_vec();
        ks.sort_unstable();
        ks.dedup();
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            per_prompt,
            ks,
            estimates,
        })
    }

    pub fn at(&self, k: usize) -> Option<f64> {
        self.estimates.get(&k).copied()
    }
}

/// Indices of the `k` largest entries; ties go to the smaller index.
pub fn top_k(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn topk_overlap(p: &[f64], q: &[f64], k: usize) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            expected: p.len(),
            found: q.len(),
        });
    }
    if k == 0 || k > p.len() {
        return domain(format!("k = {k} outside [1, {}]", p.len()));
    }
    let a = top_k(p, k);
    let b = top_k(q, k);
    Ok(a.iter().filter(|i| b.contains(i)).count() as f64 / k as f64)
}

fn check_pair(a: &PolicyModel, b: &PolicyModel, eval_set: &[TokenSequence]) -> Result<()> {
    if a.vocab_size() != b.vocab_size() {
        return domain(format!(
            "vocabulary mismatch: {} vs {}",
            a.vocab_size(),
            b.vocab_size()
        ));
    }
    if eval_set.is_empty() {
        return domain("empty evaluation set");
    }
    Ok(())
}

/// Teacher-forced next-token log-probabilities of both models at every
/// response position, sequence by sequence.
fn paired_rows(
    a: &PolicyModel,
    b: &PolicyModel,
    eval_set: &[TokenSequence],
    mut visit: impl FnMut(&[f64], &[f64]) -> Result<()>,
) -> Result<usize> {
    check_pair(a, b, eval_set)?;
    let mut count = 0;
    for seq in eval_set {
        let input = seq.teacher_forced_input();
        let la = a.forward_logits(&input)?;
        let lb = b.forward_logits(&input)?;
        for (row, _) in seq.supervised_positions(false)? {
            visit(
                &log_softmax_unchecked(la.row(row)),
                &log_softmax_unchecked(lb.row(row)),
            )?;
            count += 1;
        }
    }
    if count == 0 {
        return domain("evaluation set has no response positions");
    }
    Ok(count)
}

/// Mean `KL(a ‖ b)` over response positions under teacher forcing.
pub fn model_kl(a: &PolicyModel, b: &PolicyModel, eval_set: &[TokenSequence]) -> Result<f64> {
    let mut acc = 0.0;
    let n = paired_rows(a, b, eval_set, |la, lb| {
        acc += kl_logspace(la, lb);
        Ok(())
    })?;
    Ok(acc / n as f64)
}

/// Mean total variation over response positions under teacher forcing.
pub fn mean_tv(a: &PolicyModel, b: &PolicyModel, eval_set: &[TokenSequence]) -> Result<f64> {
    let mut acc = 0.0;
    let n = paired_rows(a, b, eval_set, |la, lb| {
        let pa: Vec<f64> = la.iter().map(|l| l.exp()).collect();
        let pb: Vec<f64> = lb.iter().map(|l| l.exp()).collect();
        acc += total_variation(&pa, &pb)?;
        Ok(())
    })?;
    Ok(acc / n as f64)
}

/// Mean top-k overlap over response positions for each k (clipped to the
/// vocabulary size; duplicates after clipping are dropped).
pub fn mean_topk_overlap(
    a: &PolicyModel,
    b: &PolicyModel,
    eval_set: &[TokenSequence],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let v = a.vocab_size();
    let grid: Vec<usize> = ks.iter().map(|&k| k.clamp(1, v)).collect();
    let mut acc: BTreeMap<usize, f64> = grid.iter().map(|&k| (k, 0.0)).collect();
    let n = paired_rows(a, b, eval_set, |la, lb| {
        let (pa, pb) = (softmax_unchecked(la), softmax_unchecked(lb));
        for (k, total) in acc.iter_mut() {
            *total += topk_overlap(&pa, &pb, *k)?;
        }
        Ok(())
    })?;
    Ok(acc.into_iter().map(|(k, s)| (k, s / n as f64)).collect())
}

/// Cosine similarity and Euclidean distance between two vectors.
pub fn pooled_similarity(u: &[f64], v: &[f64]) -> Result<(f64, f64)> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            expected: u.len(),
            found: v.len(),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return domain("cosine similarity of a zero vector");
    }
    let l2 = u
        .iter()
        .zip(v)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(((dot / (nu * nv)).clamp(-1.0, 1.0), l2))
}

fn pooled_hidden(model: &PolicyModel, seq: &TokenSequence) -> Result<Vec<f64>> {
    let hidden: Matrix = model.hidden_states(&seq.teacher_forced_input())?;
    let rows = seq.supervised_positions(false)?;
    if rows.is_empty() {
        return domain("sequence has no response positions");
    }
    let mut pooled = vec![0.0; hidden.cols];
    for (row, _) in &rows {
        for (p, h) in pooled.iter_mut().zip(hidden.row(*row)) {
            *p += h;
        }
    }
    pooled.iter_mut().for_each(|p| *p /= rows.len() as f64);
    Ok(pooled)
}

/// Mean cosine and mean L2 between last-layer states mean-pooled over the
/// response positions of each sequence.
pub fn rep_similarity(
    a: &PolicyModel,
    b: &PolicyModel,
    eval_set: &[TokenSequence],
) -> Result<(f64, f64)> {
    check_pair(a, b, eval_set)?;
    match (a, b) {
        (PolicyModel::Transformer(x), PolicyModel::Transformer(y))
            if x.config.width != y.config.width =>
        {
            return domain(format!(
                "width mismatch: {} vs {}",
                x.config.width, y.config.width
            ))
        }
        (PolicyModel::Transformer(_), PolicyModel::Transformer(_)) => {}
        _ => {
            return Err(Error::Unsupported(
                "representation similarity needs two micro-transformers".into(),
            ))
        }
    }
    let mut cos = 0.0;
    let mut l2 = 0.0;
    for seq in eval_set {
        let (c, d) = pooled_similarity(&pooled_hidden(a, seq)?, &pooled_hidden(b, seq)?)?;
        cos += c;
        l2 += d;
    }
    let n = eval_set.len() as f64;
    Ok((cos / n, l2 / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(earlier ‖ later)`.
    EarlierToLater,
    /// `KL(later ‖ earlier)`.
    LaterToEarlier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub schema_version: u32,
    pub stage: String,
    pub kl_direction: KlDirection,
    pub cosine: Option<f64>,
    pub l2: Option<f64>,
    pub kl: f64,
    pub mean_tv: f64,
    pub topk_overlap: BTreeMap<usize, f64>,
}

pub fn consistency_report(
    stage: &str,
    earlier: &PolicyModel,
    later: &PolicyModel,
    eval_set: &[TokenSequence],
    direction: KlDirection,
    ks: &[usize],
) -> Result<ConsistencyReport> {
    let kl = match direction {
        KlDirection::EarlierToLater => model_kl(earlier, later, eval_set)?,
        KlDirection::LaterToEarlier => model_kl(later, earlier, eval_set)?,
    };
    let (cosine, l2) = match rep_similarity(earlier, later, eval_set) {
        Ok((c, d)) => (Some(c), Some(d)),
        Err(Error::Unsupported(_)) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(ConsistencyReport {
        schema_version: SCHEMA_VERSION,
        stage: stage.to_string(),
        kl_direction: direction,
        cosine,
        l2,
        kl,
        mean_tv: mean_tv(earlier, later, eval_set)?,
        topk_overlap: mean_topk_overlap(earlier, later, eval_set, ks)?,
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// One (β, seed) cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub seed: u64,
    pub status: String,
    pub pass_at_1: Option<f64>,
    pub pass_at_8: Option<f64>,
    pub final_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMedian {
    pub beta: f64,
    pub completed: usize,
    pub pass_at_1: Option<f64>,
    pub pass_at_8: Option<f64>,
    pub final_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub schema_version: u32,
    pub rows: Vec<SweepRow>,
    pub medians: Vec<SweepMedian>,
}

impl SweepTable {
    /// Per-β medians over completed rows, in order of first appearance.
    pub fn from_rows(rows: Vec<SweepRow>) -> Self {
        let mut betas: Vec<f64> = Vec::new();
        for r in &rows {
            if !betas.iter().any(|b| b.to_bits() == r.beta.to_bits()) {
                betas.push(r.beta);
            }
        }
        let medians = betas
            .into_iter()
            .map(|beta| {
                let ok: Vec<&SweepRow> = rows
                    .iter()
                    .filter(|r| r.beta.to_bits() == beta.to_bits() && r.status == "ok")
                    .collect();
                let col = |f: fn(&SweepRow) -> Option<f64>| {
                    median(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
                };
                SweepMedian {
                    beta,
                    completed: ok.len(),
                    pass_at_1: col(|r| r.pass_at_1),
                    pass_at_8: col(|r| r.pass_at_8),
                    final_reward: col(|r| r.final_reward),
                }
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            rows,
            medians,
        }
    }

    /// Cell rows followed by one `median` row per β.
    pub fn to_csv(&self) -> String {
        let f = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("kind,beta,seed,status,pass_at_1,pass_at_8,final_reward\n");
        for r in &self.rows {
            out.push_str(&format!(
                "cell,{},{},{},{},{},{}\n",
                r.beta,
                r.seed,
                r.status.replace(',', ";"),
                f(r.pass_at_1),
                f(r.pass_at_8),
                f(r.final_reward)
            ));
        }
        for m in &self.medians {
            out.push_str(&format!(
                "median,{},,completed={},{},{},{}\n",
                m.beta,
                m.completed,
                f(m.pass_at_1),
                f(m.pass_at_8),
                f(m.final_reward)
            ));
        }
        out
    }
}
