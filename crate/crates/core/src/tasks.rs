//! Synthetic verifiable tasks.
//!
//! Three families (modular addition, digit sorting, parenthesis balance) are
//! written in a small fixed symbol table. An instance is a text prompt ending
//! in `=` and a response whose answer segment follows the last `|` when a
//! scratchpad is present. Generation uses only integer arithmetic on a
//! seeded ChaCha stream, so datasets are reproducible across platforms.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{domain, Error, Result};
use crate::model::{TokenSequence, Vocabulary};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const SYMBOLS: &str = "0123456789+=(),|TF-";
const FIRST_SYMBOL: u32 = 3;
pub const VOCAB_SIZE: usize = FIRST_SYMBOL as usize + SYMBOLS.len();

pub fn vocabulary() -> Vocabulary {
    Vocabulary::new(VOCAB_SIZE, BOS, EOS, PAD).expect("fixed symbol table is valid")
}

pub fn symbol_id(c: char) -> Option<u32> {
    SYMBOLS.find(c).map(|i| FIRST_SYMBOL + i as u32)
}

pub fn id_symbol(id: u32) -> Option<char> {
    id.checked_sub(FIRST_SYMBOL)
        .and_then(|i| SYMBOLS.chars().nth(i as usize))
}

fn encode_text(text: &str, offset: usize) -> Result<Vec<u32>> {
    text.chars()
        .enumerate()
        .map(|(i, c)| {
            symbol_id(c).ok_or(Error::UnknownSymbol {
                symbol: c,
                position: offset + i,
            })
        })
        .collect()
}

fn decode_ids(ids: &[u32]) -> Result<String> {
    ids.iter()
        .map(|&id| {
            id_symbol(id)
                .ok_or_else(|| Error::Domain(format!("token id {id} is not a text symbol")))
        })
        .collect()
}

/// `BOS + prompt` and `response + EOS`. Positions in errors index the
/// concatenated text `prompt + response`.
pub fn encode(prompt: &str, response: &str) -> Result<TokenSequence> {
    let mut p = vec![BOS];
    p.extend(encode_text(prompt, 0)?);
    let mut r = encode_text(response, prompt.chars().count())?;
    r.push(EOS);
    Ok(TokenSequence::new(p, r))
}

pub fn encode_prompt(prompt: &str) -> Result<Vec<u32>> {
    let mut p = vec![BOS];
    p.extend(encode_text(prompt, 0)?);
    Ok(p)
}

/// Inverse of [`encode`]. The response must end in EOS.
pub fn decode(seq: &TokenSequence) -> Result<(String, String)> {
    let prompt = match seq.prompt.split_first() {
        Some((&BOS, rest)) => rest,
        _ => return domain("prompt must start with BOS"),
    };
    let response = match seq.response.split_last() {
        Some((&EOS, rest)) => rest,
        _ => return domain("response must end with EOS"),
    };
    Ok((decode_ids(prompt)?, decode_ids(response)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum TaskFamily {
    ModAddition { modulus: u32, operands: u32 },
    DigitSort { length: u32 },
    ParenthesisBalance { length: u32 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainStyle {
    #[default]
    Direct,
    WithScratchpad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(flatten)]
    pub family: TaskFamily,
    #[serde(default)]
    pub chain_style: ChainStyle,
}

/// A generated instance with its oracle demonstration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub sequence: TokenSequence,
    pub answer: String,
    /// Index of the instance within its family's enumeration.
    pub seed_index: u64,
}

impl TaskSpec {
    pub fn new(family: TaskFamily, chain_style: ChainStyle) -> Result<Self> {
        let spec = Self {
            family,
            chain_style,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mod_addition(modulus: u32, operands: u32) -> Self {
        Self {
            family: TaskFamily::ModAddition { modulus, operands },
            chain_style: ChainStyle::Direct,
        }
    }

    pub fn with_style(mut self, chain_style: ChainStyle) -> Self {
        self.chain_style = chain_style;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            TaskFamily::ModAddition { modulus, operands } => {
                if !(2..=1000).contains(&modulus) || !(2..=8).contains(&operands) {
                    return domain("mod-addition needs modulus in [2, 1000] and 2..=8 operands");
                }
            }
            TaskFamily::DigitSort { length } => {
                if !(1..=12).contains(&length) {
                    return domain("digit-sort length must be in [1, 12]");
                }
            }
            TaskFamily::ParenthesisBalance { length } => {
                if !(1..=16).contains(&length) {
                    return domain("parenthesis length must be in [1, 16]");
                }
            }
        }
        Ok(())
    }

    pub fn family_name(&self) -> &'static str {
        match self.family {
            TaskFamily::ModAddition { .. } => "mod-addition",
            TaskFamily::DigitSort { .. } => "digit-sort",
            TaskFamily::ParenthesisBalance { .. } => "parenthesis-balance",
        }
    }

    /// Number of distinct prompts in the family.
    pub fn capacity(&self) -> u64 {
        let pow = |b: u64, e: u32| b.checked_pow(e).unwrap_or(u64::MAX);
        match self.family {
            TaskFamily::ModAddition { modulus, operands } => pow(modulus as u64, operands),
            TaskFamily::DigitSort { length } => pow(10, length),
            TaskFamily::ParenthesisBalance { length } => pow(2, length),
        }
    }

    /// Prompt text of the instance with enumeration index `index`.
    pub fn prompt_text(&self, index: u64) -> String {
        let mut out = String::new();
        match self.family {
            TaskFamily::ModAddition { modulus, operands } => {
                let mut rest = index;
                let terms: Vec<String> = (0..operands)
                    .map(|_| {
                        let t = rest % modulus as u64;
                        rest /= modulus as u64;
                        t.to_string()
                    })
                    .collect();
                out.push_str(&terms.join("+"));
            }
            TaskFamily::DigitSort { length } => {
                let mut rest = index;
                for _ in 0..length {
                    out.push(char::from(b'0' + (rest % 10) as u8));
                    rest /= 10;
                }
            }
            TaskFamily::ParenthesisBalance { length } => {
                for i in 0..length {
                    out.push(if index >> i & 1 == 0 { '(' } else { ')' });
                }
            }
        }
        out.push('=');
        out
    }

    /// Oracle response text (scratchpad included when configured) and the
    /// answer segment, or `None` when the prompt is not a well-formed member
    /// of this family.
    pub fn solve(&self, prompt: &str) -> Option<(String, String)> {
        let body = prompt.strip_suffix('=')?;
        let (answer, steps) = match self.family {
            TaskFamily::ModAddition { modulus, operands } => {
                let terms: Vec<u64> = body
                    .split('+')
                    .map(|t| {
                        let canonical = !t.is_empty()
                            && t.bytes().all(|b| b.is_ascii_digit())
                            && (t == "0" || !t.starts_with('0'));
                        canonical.then(|| t.parse::<u64>().ok()).flatten()
                    })
                    .collect::<Option<_>>()?;
                if terms.len() != operands as usize || terms.iter().any(|&t| t >= modulus as u64) {
                    return None;
                }
                let mut acc = terms[0];
                let mut steps = Vec::new();
                for t in &terms[1..] {
                    acc = (acc + t) % modulus as u64;
                    steps.push(acc.to_string());
                }
                (acc.to_string(), steps.join(","))
            }
            TaskFamily::DigitSort { length } => {
                if body.len() != length as usize || !body.bytes().all(|b| b.is_ascii_digit()) {
                    return None;
                }
                let mut digits: Vec<u8> = body.bytes().collect();
                digits.sort_unstable();
                let asc = String::from_utf8(digits.clone()).expect("ascii");
                digits.reverse();
                (asc, String::from_utf8(digits).expect("ascii"))
            }
            TaskFamily::ParenthesisBalance { length } => {
                if body.len() != length as usize || !body.chars().all(|c| c == '(' || c == ')') {
                    return None;
                }
                let mut depth = 0i64;
                let mut min_depth = 0i64;
                let mut trace = Vec::new();
                for c in body.chars() {
                    depth += if c == '(' { 1 } else { -1 };
                    min_depth = min_depth.min(depth);
                    trace.push(depth.to_string());
                }
                let ok = depth == 0 && min_depth == 0;
                ((if ok { "T" } else { "F" }).to_string(), trace.join(","))
            }
        };
        let response = match self.chain_style {
            ChainStyle::Direct => answer.clone(),
            ChainStyle::WithScratchpad => format!("{steps}|{answer}"),
        };
        Some((response, answer))
    }

    pub fn instance(&self, index: u64) -> Instance {
        let prompt = self.prompt_text(index);
        let (response, answer) = self
            .solve(&prompt)
            .expect("generated prompts are well formed");
        Instance {
            sequence: encode(&prompt, &response).expect("generated text uses the symbol table"),
            answer,
            seed_index: index,
        }
    }

    /// Longest encoded prompt + response in tokens.
    pub fn max_sequence_len(&self) -> usize {
        let (prompt, response) = match self.family {
            TaskFamily::ModAddition { modulus, operands } => {
                let w = (modulus - 1).to_string().len();
                let prompt = operands as usize * (w + 1);
                let steps = (operands as usize - 1) * (w + 1);
                (prompt, steps + w)
            }
            TaskFamily::DigitSort { length } => (length as usize + 1, 2 * length as usize + 1),
            TaskFamily::ParenthesisBalance { length } => {
                let w = (length as usize).to_string().len() + 1;
                (length as usize + 1, length as usize * (w + 1) + 1)
            }
        };
        let response = match self.chain_style {
            ChainStyle::Direct => match self.family {
                TaskFamily::ModAddition { modulus, .. } => (modulus - 1).to_string().len(),
                TaskFamily::DigitSort { length } => length as usize,
                TaskFamily::ParenthesisBalance { .. } => 1,
            },
            ChainStyle::WithScratchpad => response,
        };
        1 + prompt + response + 1
    }

    /// Ground-truth answer for an encoded prompt.
    pub fn ground_truth(&self, prompt: &[u32]) -> Option<String> {
        let text = decode_ids(prompt.strip_prefix(&[BOS])?).ok()?;
        self.solve(&text).map(|(_, answer)| answer)
    }
}

/// Answer segment of a decoded response: the text after the last `|`.
pub fn answer_segment(response: &str) -> &str {
    response.rsplit('|').next().unwrap_or(response)
}

/// 1 if the response is complete and its answer segment matches the ground
/// truth, otherwise 0. Never fails.
pub fn verify(spec: &TaskSpec, prompt: &[u32], response: &[u32]) -> f64 {
    let Some(truth) = spec.ground_truth(prompt) else {
        return 0.0;
    };
    let Some((&EOS, body)) = response.split_last() else {
        return 0.0;
    };
    match decode_ids(body) {
        Ok(text) if answer_segment(&text) == truth => 1.0,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub sft: usize,
    pub rl: usize,
    pub validation: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.sft + self.rl + self.validation
    }
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            sft: 2000,
            rl: 2000,
            validation: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplits {
    pub spec: TaskSpec,
    pub sizes: SplitSizes,
    pub seed: u64,
    pub sft: Vec<Instance>,
    pub rl: Vec<Instance>,
    pub validation: Vec<Instance>,
}

impl DatasetSplits {
    pub fn rl_prompts(&self) -> Vec<Vec<u32>> {
        self.rl.iter().map(|i| i.sequence.prompt.clone()).collect()
    }

    pub fn sequences(split: &[Instance]) -> Vec<TokenSequence> {
        split.iter().map(|i| i.sequence.clone()).collect()
    }

    pub fn all_prompts(&self) -> HashSet<Vec<u32>> {
        self.sft
            .iter()
            .chain(&self.rl)
            .chain(&self.validation)
            .map(|i| i.sequence.prompt.clone())
            .collect()
    }
}

/// `count` distinct indices in `[0, capacity)`, in draw order.
fn distinct_indices(rng: &mut ChaCha8Rng, capacity: u64, count: usize) -> Vec<u64> {
    if capacity <= (1 << 20) || capacity <= 4 * count as u64 {
        let mut all: Vec<u64> = (0..capacity).collect();
        let (chosen, _) = all.partial_shuffle(rng, count);
        return chosen.to_vec();
    }
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let i = rng.gen_range(0..capacity);
        if seen.insert(i) {
            out.push(i);
        }
    }
    out
}

pub fn generate_dataset(spec: &TaskSpec, sizes: SplitSizes, seed: u64) -> Result<DatasetSplits> {
    spec.validate()?;
    let capacity = spec.capacity();
    let requested = sizes.total() as u64;
    if requested > capacity {
        return Err(Error::Infeasible {
            requested,
            capacity,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = distinct_indices(&mut rng, capacity, sizes.total()).into_iter();
    let mut take = |n: usize| -> Vec<Instance> {
        indices.by_ref().take(n).map(|i| spec.instance(i)).collect()
    };
    let sft = take(sizes.sft);
    let rl = take(sizes.rl);
    let validation = take(sizes.validation);
    let splits = DatasetSplits {
        spec: *spec,
        sizes,
        seed,
        sft,
        rl,
        validation,
    };
    if splits.all_prompts().len() != sizes.total() {
        return Err(Error::Rejected("generated splits share a prompt".into()));
    }
    Ok(splits)
}

/// Pretraining corpus for the base model: `count` instances drawn from
/// `specs` in rotation, avoiding every prompt in `exclude`. A fraction
/// `corrupt_per_mille / 1000` of answers is replaced by another answer from
/// the corpus so the base stays imperfect.
pub fn pretraining_corpus(
    specs: &[TaskSpec],
    count: usize,
    corrupt_per_mille: u32,
    seed: u64,
    exclude: &HashSet<Vec<u32>>,
) -> Result<Vec<TokenSequence>> {
    if specs.is_empty() {
        return domain("pretraining corpus needs at least one task spec");
    }
    if corrupt_per_mille > 1000 {
        return domain("corruption rate above 1000 per mille");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba5e);
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut out: Vec<TokenSequence> = Vec::with_capacity(count);
    let mut misses = 0u64;
    while out.len() < count {
        let spec = &specs[out.len() % specs.len()];
        let inst = spec.instance(rng.gen_range(0..spec.capacity()));
        let prompt = inst.sequence.prompt.clone();
        if exclude.contains(&prompt) || !seen.insert(prompt) {
            misses += 1;
            if misses > 100 * count as u64 + 10_000 {
                return Err(Error::Infeasible {
                    requested: count as u64,
                    capacity: out.len() as u64,
                });
            }
            continue;
        }
        out.push(inst.sequence);
    }
    // Swap responses among corrupted items; with a single corrupted item, shift
    // its answer by one symbol instead.
    let corrupt: Vec<usize> = (0..out.len())
        .filter(|_| rng.gen_range(0..1000) < corrupt_per_mille)
        .collect();
    if corrupt.len() >= 2 {
        let first = out[corrupt[0]].response.clone();
        for w in corrupt.windows(2) {
            out[w[0]].response = out[w[1]].response.clone();
        }
        out[*corrupt.last().expect("nonempty")].response = first;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub split: String,
    pub prompt_tokens: Vec<u32>,
    pub response_tokens: Vec<u32>,
    pub answer_text: String,
    pub family: String,
    pub seed_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub spec: TaskSpec,
    pub sizes: SplitSizes,
    pub seed: u64,
    pub content_sha256: String,
}

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const DATASET_MANIFEST: &str = "dataset_manifest.json";

pub fn to_jsonl(splits: &DatasetSplits) -> Result<String> {
    let mut out = String::new();
    for (name, split) in [
        ("sft", &splits.sft),
        ("rl", &splits.rl),
        ("validation", &splits.validation),
    ] {
        for inst in split {
            let rec = DatasetRecord {
                split: name.into(),
                prompt_tokens: inst.sequence.prompt.clone(),
                response_tokens: inst.sequence.response.clone(),
                answer_text: inst.answer.clone(),
                family: splits.spec.family_name().into(),
                seed_index: inst.seed_index,
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn content_hash(splits: &DatasetSplits) -> Result<String> {
    Ok(hex::encode(Sha256::digest(to_jsonl(splits)?.as_bytes())))
}

pub fn write_dataset(dir: &Path, splits: &DatasetSplits) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let body = to_jsonl(splits)?;
    let manifest = DatasetManifest {
        schema_version: 1,
        spec: splits.spec,
        sizes: splits.sizes,
        seed: splits.seed,
        content_sha256: hex::encode(Sha256::digest(body.as_bytes())),
    };
    fs::write(dir.join(DATASET_FILE), body)?;
    fs::write(
        dir.join(DATASET_MANIFEST),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<DatasetSplits> {
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(DATASET_MANIFEST))?)?;
    let body = fs::read_to_string(dir.join(DATASET_FILE))?;
    let digest = hex::encode(Sha256::digest(body.as_bytes()));
    if digest != manifest.content_sha256 {
        return Err(Error::Rejected(format!(
            "dataset hash mismatch: manifest {}, file {digest}",
            manifest.content_sha256
        )));
    }
    let mut splits = DatasetSplits {
        spec: manifest.spec,
        sizes: manifest.sizes,
        seed: manifest.seed,
        sft: Vec::new(),
        rl: Vec::new(),
        validation: Vec::new(),
    };
    for line in body.lines() {
        let rec: DatasetRecord = serde_json::from_str(line)?;
        let inst = Instance {
            sequence: TokenSequence::new(rec.prompt_tokens, rec.response_tokens),
            answer: rec.answer_text,
            seed_index: rec.seed_index,
        };
        match rec.split.as_str() {
            "sft" => splits.sft.push(inst),
            "rl" => splits.rl.push(inst),
            "validation" => splits.validation.push(inst),
            other => return Err(Error::Rejected(format!("unknown split {other:?}"))),
        }
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn families() -> Vec<TaskSpec> {
        let mut out = Vec::new();
        for style in [ChainStyle::Direct, ChainStyle::WithScratchpad] {
            out.push(TaskSpec::mod_addition(10, 2).with_style(style));
            out.push(TaskSpec::mod_addition(97, 3).with_style(style));
            out.push(TaskSpec::new(TaskFamily::DigitSort { length: 5 }, style).unwrap());
            out.push(TaskSpec::new(TaskFamily::ParenthesisBalance { length: 8 }, style).unwrap());
        }
        out
    }

    #[test]
    fn symbol_table_layout() {
        assert_eq!(VOCAB_SIZE, 22);
        assert_eq!(symbol_id('0'), Some(3));
        assert_eq!(symbol_id('9'), Some(12));
        assert_eq!(symbol_id('+'), Some(13));
        assert_eq!(symbol_id('='), Some(14));
        assert_eq!(symbol_id('-'), Some(21));
        assert_eq!(id_symbol(2), None);
    }

    #[test]
    fn encode_examples() {
        let seq = encode("3+4=", "7").unwrap();
        assert_eq!(seq.prompt, vec![BOS, 6, 13, 7, 14]);
        assert_eq!(seq.response, vec![10, EOS]);
        assert_eq!(encode("3+4=", "").unwrap().response, vec![EOS]);
        match encode("3+x=", "7") {
            Err(Error::UnknownSymbol {
                symbol: 'x',
                position: 2,
            }) => {}
            other => panic!("{other:?}"),
        }
        match encode("3=", "a") {
            Err(Error::UnknownSymbol {
                symbol: 'a',
                position: 2,
            }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for spec in families() {
            for _ in 0..125 {
                let inst = spec.instance(rng.gen_range(0..spec.capacity()));
                let (p, r) = decode(&inst.sequence).unwrap();
                assert_eq!(encode(&p, &r).unwrap(), inst.sequence);
            }
        }
    }

    #[test]
    fn solutions() {
        let add = TaskSpec::mod_addition(10, 3);
        assert_eq!(add.solve("3+4+5=").unwrap(), ("2".into(), "2".into()));
        let pad = add.with_style(ChainStyle::WithScratchpad);
        assert_eq!(pad.solve("3+4+5=").unwrap().0, "7,2|2");
        assert!(add.solve("3+4=").is_none());
        assert!(add.solve("03+4+5=").is_none());

        let sort = TaskSpec::new(
            TaskFamily::DigitSort { length: 4 },
            ChainStyle::WithScratchpad,
        )
        .unwrap();
        assert_eq!(
            sort.solve("5213=").unwrap(),
            ("5321|1235".into(), "1235".into())
        );

        let par = TaskSpec::new(
            TaskFamily::ParenthesisBalance { length: 4 },
            ChainStyle::WithScratchpad,
        )
        .unwrap();
        assert_eq!(
            par.solve("(())=").unwrap(),
            ("1,2,1,0|T".into(), "T".into())
        );
        assert_eq!(
            par.solve("())(=").unwrap(),
            ("1,0,-1,0|F".into(), "F".into())
        );
    }

    #[test]
    fn verifier_examples() {
        let spec = TaskSpec::mod_addition(10, 2);
        let prompt = encode_prompt("3+4=").unwrap();
        assert_eq!(
            verify(&spec, &prompt, &encode("", "7").unwrap().response),
            1.0
        );
        assert_eq!(
            verify(&spec, &prompt, &encode("", "6").unwrap().response),
            0.0
        );
        assert_eq!(verify(&spec, &prompt, &[10]), 0.0);
        assert_eq!(verify(&spec, &prompt, &[]), 0.0);
        assert_eq!(verify(&spec, &prompt, &[BOS, EOS]), 0.0);
        assert_eq!(verify(&spec, &[BOS, 13, 14], &[10, EOS]), 0.0);
    }

    #[test]
    fn demonstrations_pass_verifier() {
        for spec in families() {
            let d = generate_dataset(
                &spec,
                SplitSizes {
                    sft: 30,
                    rl: 30,
                    validation: 10,
                },
                3,
            )
            .unwrap();
            for inst in d.sft.iter().chain(&d.rl).chain(&d.validation) {
                assert_eq!(
                    verify(&spec, &inst.sequence.prompt, &inst.sequence.response),
                    1.0
                );
                assert!(
                    inst.sequence.prompt.len() + inst.sequence.response.len()
                        <= spec.max_sequence_len()
                );
            }
        }
    }

    #[test]
    fn dataset_examples() {
        let spec = TaskSpec::mod_addition(10, 3);
        let sizes = SplitSizes {
            sft: 100,
            rl: 100,
            validation: 20,
        };
        let a = generate_dataset(&spec, sizes, 11).unwrap();
        let b = generate_dataset(&spec, sizes, 11).unwrap();
        assert_eq!(to_jsonl(&a).unwrap(), to_jsonl(&b).unwrap());
        assert_eq!(a.all_prompts().len(), 220);
        assert_ne!(
            to_jsonl(&a).unwrap(),
            to_jsonl(&generate_dataset(&spec, sizes, 12).unwrap()).unwrap()
        );

        let small = TaskSpec::mod_addition(10, 2);
        match generate_dataset(
            &small,
            SplitSizes {
                sft: 10_000,
                rl: 0,
                validation: 0,
            },
            0,
        ) {
            Err(Error::Infeasible {
                requested: 10_000,
                capacity: 100,
            }) => {}
            other => panic!("{other:?}"),
        }
        // Exhausting the space exactly is allowed.
        let full = generate_dataset(
            &small,
            SplitSizes {
                sft: 50,
                rl: 40,
                validation: 10,
            },
            0,
        )
        .unwrap();
        assert_eq!(full.all_prompts().len(), 100);
    }

    #[test]
    fn sparse_space_uses_rejection_sampling() {
        let spec = TaskSpec::new(TaskFamily::DigitSort { length: 12 }, ChainStyle::Direct).unwrap();
        let d = generate_dataset(
            &spec,
            SplitSizes {
                sft: 50,
                rl: 50,
                validation: 5,
            },
            1,
        )
        .unwrap();
        assert_eq!(d.all_prompts().len(), 105);
    }

    #[test]
    fn files_round_trip_and_detect_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let spec = TaskSpec::mod_addition(13, 2).with_style(ChainStyle::WithScratchpad);
        let d = generate_dataset(
            &spec,
            SplitSizes {
                sft: 20,
                rl: 10,
                validation: 5,
            },
            9,
        )
        .unwrap();
        let manifest = write_dataset(dir.path(), &d).unwrap();
        assert_eq!(manifest.content_sha256, content_hash(&d).unwrap());
        assert_eq!(read_dataset(dir.path()).unwrap(), d);
        let first = fs::read_to_string(dir.path().join(DATASET_FILE)).unwrap();
        assert!(first
            .lines()
            .next()
            .unwrap()
            .contains("\"family\":\"mod-addition\""));
        fs::write(
            dir.path().join(DATASET_FILE),
            first.replace("\"rl\"", "\"sft\""),
        )
        .unwrap();
        assert!(read_dataset(dir.path()).is_err());
    }

    #[test]
    fn spec_json_shape() {
        let spec = TaskSpec::mod_addition(10, 2);
        let json = serde_json::to_value(spec).unwrap();
        assert_eq!(json["family"], "mod-addition");
        assert_eq!(json["modulus"], 10);
        assert_eq!(json["chain_style"], "direct");
        let back: TaskSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn pretraining_corpus_avoids_excluded_prompts() {
        let spec = TaskSpec::mod_addition(10, 3);
        let d = generate_dataset(
            &spec,
            SplitSizes {
                sft: 100,
                rl: 100,
                validation: 20,
            },
            2,
        )
        .unwrap();
        let exclude = d.all_prompts();
        let easy = TaskSpec::mod_addition(10, 2);
        let corpus = pretraining_corpus(&[spec, easy], 160, 100, 4, &exclude).unwrap();
        assert_eq!(corpus.len(), 160);
        assert!(corpus.iter().all(|s| !exclude.contains(&s.prompt)));
        let wrong = corpus
            .iter()
            .filter(|s| {
                let task = if s.prompt.len() == 5 { easy } else { spec };
                verify(&task, &s.prompt, &s.response) == 0.0
            })
            .count();
        assert!(wrong > 3 && wrong < 40, "{wrong}");
        assert_eq!(
            corpus,
            pretraining_corpus(&[spec, easy], 160, 100, 4, &exclude).unwrap()
        );
        assert!(matches!(
            pretraining_corpus(&[easy], 101, 0, 4, &HashSet::new()),
            Err(Error::Infeasible { .. })
        ));
    }
}
