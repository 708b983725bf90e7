//! End-to-end experiment runner: data generation, base pretraining,
//! SFT-stage training, GRPO, evaluation and reports.
//!
//! A run writes into one output directory:
//!
//! ```text
//! run_manifest.json
//! data/{dataset.jsonl, dataset_manifest.json}
//! checkpoints/{base, sft, rl}/
//! metrics/{base, sft, rl}.jsonl
//! reports/{eval_*.json, consistency_*.json}
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::analysis::{self, KlDirection, PassAtKReport, SweepRow, SweepTable};
use crate::error::{domain, Error, Result};
use crate::gift::{objective_loss, teacher_logprobs, LossOptions, Normalization, Objective};
use crate::metrics::{config_hash, derive_seed, MetricsContext, MetricsRecord};
use crate::model::{
    load_checkpoint, sample_rollout, save_checkpoint, AdamW, AdamWConfig, Matrix, MicroTransformer,
    PolicyModel, TokenSequence, TransformerConfig,
};
use crate::rl::{task_reward, train_rl, RlConfig};
use crate::tasks::{self, ChainStyle, DatasetSplits, SplitSizes, TaskFamily, TaskSpec};

pub const MANIFEST_FILE: &str = "run_manifest.json";
const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SftMethod {
    None,
    Sft,
    Gift,
    Entropy,
    LabelSmoothing,
    Kd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub method: SftMethod,
    pub beta: Option<f64>,
    pub eps: Option<f64>,
    pub lambda_h: Option<f64>,
    pub alpha: Option<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    /// 1-based epoch to keep; `None` keeps the validation-loss minimum.
    pub select_epoch: Option<usize>,
    pub mask_prompt: bool,
    pub normalization: Normalization,
    /// Train on the union of the SFT and RL splits.
    pub train_on_union: bool,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            method: SftMethod::Gift,
            beta: Some(5.0),
            eps: None,
            lambda_h: None,
            alpha: None,
            epochs: 6,
            lr: 1e-3,
            batch: 16,
            weight_decay: 0.0,
            select_epoch: None,
            mask_prompt: true,
            normalization: Normalization::TokenMean,
            train_on_union: false,
        }
    }
}

impl SftConfig {
    /// Switches method, keeping only the hyperparameter it uses.
    pub fn with_method(mut self, method: SftMethod, value: Option<f64>) -> Self {
        self.method = method;
        self.beta = None;
        self.eps = None;
        self.lambda_h = None;
        self.alpha = None;
        match method {
            SftMethod::Gift => self.beta = value,
            SftMethod::LabelSmoothing => self.eps = value,
            SftMethod::Entropy => self.lambda_h = value,
            SftMethod::Kd => self.alpha = value,
            SftMethod::None | SftMethod::Sft => {}
        }
        self
    }

    pub fn objective(&self) -> Result<Option<Objective>> {
        let fields = [
            ("beta", self.beta, SftMethod::Gift),
            ("eps", self.eps, SftMethod::LabelSmoothing),
            ("lambda_h", self.lambda_h, SftMethod::Entropy),
            ("alpha", self.alpha, SftMethod::Kd),
        ];
        for (name, value, owner) in fields {
            if value.is_some() != (self.method == owner) {
                return Err(Error::Config(format!(
                    "sft.{name} must be set exactly when sft.method is {owner:?}, method is {:?}",
                    self.method
                )));
            }
        }
        let obj = match self.method {
            SftMethod::None => return Ok(None),
            SftMethod::Sft => Objective::Nll,
            SftMethod::Gift => Objective::Gift {
                beta: self.beta.unwrap_or_default(),
            },
            SftMethod::Entropy => Objective::EntropyReg {
                lambda_h: self.lambda_h.unwrap_or_default(),
            },
            SftMethod::LabelSmoothing => Objective::LabelSmoothing {
                eps: self.eps.unwrap_or_default(),
            },
            SftMethod::Kd => Objective::Distill {
                alpha: self.alpha.unwrap_or_default(),
            },
        };
        obj.validate()?;
        Ok(Some(obj))
    }

    fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch: self.batch,
            weight_decay: self.weight_decay,
            select_epoch: self.select_epoch,
            opts: LossOptions {
                mask_prompt: self.mask_prompt,
                normalization: self.normalization,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    pub corpus_size: usize,
    /// Fraction of corpus answers swapped for wrong ones, per mille.
    pub corrupt_per_mille: u32,
    /// Mix in an easier variant of the task family.
    pub include_easier: bool,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    /// Directory for reusing pretrained bases across runs.
    pub cache_dir: Option<PathBuf>,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            corpus_size: 1500,
            corrupt_per_mille: 150,
            include_easier: true,
            epochs: 15,
            lr: 3e-3,
            batch: 16,
            weight_decay: 0.0,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub temperature: f64,
    pub samples: usize,
    pub ks: Vec<usize>,
    pub overlap_ks: Vec<usize>,
    pub max_prompts: Option<usize>,
    pub kl_direction: KlDirection,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            samples: 8,
            ks: analysis::DEFAULT_PASS_KS.to_vec(),
            overlap_ks: analysis::DEFAULT_OVERLAP_KS.to_vec(),
            max_prompts: None,
            kl_direction: KlDirection::EarlierToLater,
        }
    }
}

fn default_task() -> TaskSpec {
    TaskSpec::mod_addition(10, 4).with_style(ChainStyle::WithScratchpad)
}

fn default_model() -> TransformerConfig {
    TransformerConfig {
        vocab_size: tasks::VOCAB_SIZE,
        context: 64,
        width: 32,
        heads: 2,
        layers: 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Seed for data splits and the base model; defaults to `seed`.
    #[serde(default)]
    pub data_seed: Option<u64>,
    #[serde(default = "default_task")]
    pub task: TaskSpec,
    #[serde(default)]
    pub sizes: SplitSizes,
    #[serde(default = "default_model")]
    pub model: TransformerConfig,
    #[serde(default)]
    pub base: BaseConfig,
    #[serde(default)]
    pub sft: SftConfig,
    #[serde(default)]
    pub rl: RlConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            data_seed: None,
            task: default_task(),
            sizes: SplitSizes::default(),
            model: default_model(),
            base: BaseConfig::default(),
            sft: SftConfig::default(),
            rl: RlConfig {
                max_new_tokens: default_task().max_sequence_len(),
                ..RlConfig::default()
            },
            eval: EvalConfig::default(),
            output_dir: None,
        }
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        if self.model.vocab_size != tasks::VOCAB_SIZE {
            return Err(Error::Config(format!(
                "model.vocab_size must equal the task vocabulary size {}",
                tasks::VOCAB_SIZE
            )));
        }
        if self.model.context < self.task.max_sequence_len() {
            return Err(Error::Config(format!(
                "model.context {} is shorter than the longest task sequence {}",
                self.model.context,
                self.task.max_sequence_len()
            )));
        }
        self.sft.objective()?;
        if self.sft.batch == 0 || self.base.batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if let Some(e) = self.sft.select_epoch {
            if e == 0 || e > self.sft.epochs {
                return Err(Error::Config(format!(
                    "sft.select_epoch {e} outside 1..={}",
                    self.sft.epochs
                )));
            }
        }
        self.rl.validate()?;
        if self.eval.samples == 0
            || self
                .eval
                .ks
                .iter()
                .any(|&k| k == 0 || k > self.eval.samples)
        {
            return Err(Error::Config("eval.ks must lie in 1..=eval.samples".into()));
        }
        if self.sizes.validation == 0 {
            return Err(Error::Config(
                "the validation split must be nonempty".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Applies `key.path=value` overrides. Values parse as JSON, falling back
    /// to a plain string. The key must already exist in the serialized config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let parsed =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut value;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            }
            *slot = parsed;
        }
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hash of everything that affects results (output locations excluded).
    pub fn content_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = None;
        c.base.cache_dir = None;
        config_hash(&c)
    }
}

/// Easier variant of a family for base pretraining.
pub fn easier_task(spec: &TaskSpec) -> TaskSpec {
    let family = match spec.family {
        TaskFamily::ModAddition { modulus, operands } => TaskFamily::ModAddition {
            modulus,
            operands: operands.saturating_sub(1).max(2),
        },
        TaskFamily::DigitSort { length } => TaskFamily::DigitSort {
            length: length.saturating_sub(1).max(1),
        },
        TaskFamily::ParenthesisBalance { length } => TaskFamily::ParenthesisBalance {
            length: length.saturating_sub(2).max(2),
        },
    };
    TaskSpec {
        family,
        chain_style: spec.chain_style,
    }
}

pub type Sink<'a> = &'a mut dyn FnMut(&MetricsRecord) -> Result<()>;

pub fn discard(_: &MetricsRecord) -> Result<()> {
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub select_epoch: Option<usize>,
    pub opts: LossOptions,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PolicyModel,
    /// 1-based; 0 when no epoch ran.
    pub selected_epoch: usize,
    pub val_losses: Vec<f64>,
    pub steps: u64,
}

fn stage_tag(stage: &str) -> u64 {
    stage.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn objective_value(
    model: &PolicyModel,
    data: &[TokenSequence],
    teacher: Option<&[Matrix]>,
    objective: Objective,
    opts: LossOptions,
) -> Result<f64> {
    Ok(objective_loss(model, data, objective, teacher, opts)?.loss)
}

/// Minibatch AdamW on `objective`. `teacher` supplies base rows for
/// objectives that need them. After each epoch the validation loss of the
/// same objective is recorded and used for checkpoint selection.
#[allow(clippy::too_many_arguments)]
pub fn train_supervised(
    init: &PolicyModel,
    train: &[TokenSequence],
    val: &[TokenSequence],
    objective: Objective,
    teacher: Option<&PolicyModel>,
    lc: &LoopConfig,
    ctx: &MetricsContext,
    sink: Sink,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return domain("empty training set");
    }
    if lc.batch == 0 {
        return domain("batch size must be positive");
    }
    let teacher = if objective.needs_teacher() {
        Some(teacher.ok_or_else(|| Error::Domain("objective needs a base model".into()))?)
    } else {
        None
    };
    let train_rows = teacher
        .map(|t| teacher_logprobs(t, train, lc.opts))
        .transpose()?;
    let val_rows = match teacher {
        Some(t) if !val.is_empty() => Some(teacher_logprobs(t, val, lc.opts)?),
        _ => None,
    };

    let mut model = init.clone();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: lc.lr,
            weight_decay: lc.weight_decay,
            ..Default::default()
        },
        model.num_params(),
    );
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut val_losses = Vec::new();
    let mut step = 0u64;
    let tag = stage_tag(&ctx.stage);
    for epoch in 1..=lc.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            ctx.seed,
            &[tag, epoch as u64],
        )));
        for chunk in order.chunks(lc.batch) {
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| train[i].clone()).collect();
            let rows: Option<Vec<Matrix>> = train_rows
                .as_ref()
                .map(|r| chunk.iter().map(|&i| r[i].clone()).collect());
            let out = objective_loss(&model, &batch, objective, rows.as_deref(), lc.opts)?;
            if !out.loss.is_finite() {
                return Err(Error::Rejected(format!(
                    "non-finite training loss at step {step}"
                )));
            }
            opt.apply(&mut model, &out.grads)?;
            step += 1;
            sink(&ctx.record(step, [("loss", out.loss), ("epoch", epoch as f64)]))?;
        }
        let val_loss = if val.is_empty() {
            f64::NAN
        } else {
            objective_value(&model, val, val_rows.as_deref(), objective, lc.opts)?
        };
        val_losses.push(val_loss);
        sink(&ctx.record(step, [("val_loss", val_loss), ("epoch", epoch as f64)]))?;
        let keep = match lc.select_epoch {
            Some(e) => e == epoch,
            None => best
                .as_ref()
                .is_none_or(|(b, _, _)| val_loss < *b || b.is_nan()),
        };
        if keep {
            best = Some((val_loss, epoch, model.params().to_vec()));
        }
    }
    let selected_epoch = match best {
        Some((_, e, params)) => {
            model.params_mut().copy_from_slice(&params);
            e
        }
        None => 0,
    };
    Ok(TrainOutcome {
        model,
        selected_epoch,
        val_losses,
        steps: step,
    })
}

pub fn generate_data(cfg: &ExperimentConfig) -> Result<DatasetSplits> {
    tasks::generate_dataset(&cfg.task, cfg.sizes, cfg.data_seed())
}

/// Pretrains the base model on a corpus disjoint from every split.
pub fn pretrain_base(
    cfg: &ExperimentConfig,
    data: &DatasetSplits,
    sink: Sink,
) -> Result<PolicyModel> {
    let seed = cfg.data_seed();
    let mut specs = vec![cfg.task];
    if cfg.base.include_easier && easier_task(&cfg.task) != cfg.task {
        specs.push(easier_task(&cfg.task));
    }
    let corpus = tasks::pretraining_corpus(
        &specs,
        cfg.base.corpus_size,
        cfg.base.corrupt_per_mille,
        seed,
        &data.all_prompts(),
    )?;
    let init = PolicyModel::Transformer(MicroTransformer::init(cfg.model, seed)?);
    let lc = LoopConfig {
        epochs: cfg.base.epochs,
        lr: cfg.base.lr,
        batch: cfg.base.batch,
        weight_decay: cfg.base.weight_decay,
        select_epoch: Some(cfg.base.epochs).filter(|&e| e > 0),
        opts: LossOptions {
            mask_prompt: false,
            normalization: Normalization::TokenMean,
        },
    };
    let ctx = MetricsContext::new("base", seed, cfg.content_hash()?);
    let mut model =
        train_supervised(&init, &corpus, &[], Objective::Nll, None, &lc, &ctx, sink)?.model;
    model.round_to_f32();
    Ok(model)
}

fn base_cache_key(cfg: &ExperimentConfig) -> Result<String> {
    let mut base = cfg.base.clone();
    base.cache_dir = None;
    config_hash(&(cfg.task, cfg.sizes, cfg.data_seed(), cfg.model, base))
}

/// [`pretrain_base`], reusing `base.cache_dir/<key>` when present.
pub fn pretrain_base_cached(
    cfg: &ExperimentConfig,
    data: &DatasetSplits,
    sink: Sink,
) -> Result<PolicyModel> {
    let Some(dir) = &cfg.base.cache_dir else {
        return pretrain_base(cfg, data, sink);
    };
    let path = dir.join(base_cache_key(cfg)?);
    if path.join("manifest.json").exists() {
        return Ok(load_checkpoint(&path)?.model);
    }
    let model = pretrain_base(cfg, data, sink)?;
    save_checkpoint(&path, &model, Some(tasks::vocabulary()), cfg.data_seed())?;
    Ok(model)
}

/// The SFT-stage training set: the SFT split, or SFT ∪ RL for direct SFT.
pub fn sft_training_set(cfg: &ExperimentConfig, data: &DatasetSplits) -> Vec<TokenSequence> {
    let mut set = DatasetSplits::sequences(&data.sft);
    if cfg.sft.train_on_union {
        set.extend(DatasetSplits::sequences(&data.rl));
    }
    set
}

/// Runs the configured SFT-stage method from `base`; `None` when the method
/// is `none`.
pub fn sft_stage(
    cfg: &ExperimentConfig,
    base: &PolicyModel,
    data: &DatasetSplits,
    sink: Sink,
) -> Result<Option<TrainOutcome>> {
    let Some(objective) = cfg.sft.objective()? else {
        return Ok(None);
    };
    let ctx = MetricsContext::new("sft", cfg.seed, cfg.content_hash()?);
    let mut out = train_supervised(
        base,
        &sft_training_set(cfg, data),
        &DatasetSplits::sequences(&data.validation),
        objective,
        Some(base),
        &cfg.sft.loop_config(),
        &ctx,
        sink,
    )?;
    out.model.round_to_f32();
    Ok(Some(out))
}

pub fn rl_stage(
    cfg: &ExperimentConfig,
    init: &PolicyModel,
    data: &DatasetSplits,
    sink: Sink,
) -> Result<Option<crate::rl::RlOutcome>> {
    if cfg.rl.epochs == 0 {
        return Ok(None);
    }
    let ctx = MetricsContext::new("rl", cfg.seed, cfg.content_hash()?);
    let reward = task_reward(cfg.task);
    let mut out = train_rl(
        init,
        init,
        tasks::vocabulary(),
        &data.rl_prompts(),
        &cfg.rl,
        &reward,
        &ctx,
        sink,
    )?;
    out.model.round_to_f32();
    Ok(Some(out))
}

pub fn greedy_decode(
    model: &PolicyModel,
    prompt: &[u32],
    eos: u32,
    max_len: usize,
) -> Result<Vec<u32>> {
    let mut context = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len && context.len() < model.context_len() {
        let lp = model.next_logprobs(&context)?;
        let tok = analysis::top_k(&lp, 1)[0] as u32;
        out.push(tok);
        context.push(tok);
        if tok == eos {
            break;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub label: String,
    pub prompts: usize,
    pub temperature: f64,
    pub greedy_accuracy: f64,
    pub pass_at_k: PassAtKReport,
}

impl EvalReport {
    pub fn pass_at(&self, k: usize) -> Option<f64> {
        self.pass_at_k.at(k)
    }
}

/// Greedy accuracy and pass@k on `prompts`; sample streams depend only on
/// `seed` and the prompt index, so different models see common random numbers.
pub fn evaluate(
    model: &PolicyModel,
    spec: &TaskSpec,
    prompts: &[Vec<u32>],
    cfg: &EvalConfig,
    seed: u64,
    label: &str,
) -> Result<EvalReport> {
    let prompts = &prompts[..cfg
        .max_prompts
        .map_or(prompts.len(), |m| m.min(prompts.len()))];
    if prompts.is_empty() {
        return domain("no evaluation prompts");
    }
    let max_len = spec.max_sequence_len();
    let mut counts = Vec::with_capacity(prompts.len());
    let mut greedy_hits = 0.0;
    for (i, prompt) in prompts.iter().enumerate() {
        let budget = max_len.saturating_sub(prompt.len()).max(1);
        greedy_hits += tasks::verify(
            spec,
            prompt,
            &greedy_decode(model, prompt, tasks::EOS, budget)?,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stage_tag("eval"), i as u64]));
        let mut correct = 0u64;
        for _ in 0..cfg.samples {
            let r = sample_rollout(model, prompt, tasks::EOS, cfg.temperature, budget, &mut rng)?;
            correct += tasks::verify(spec, prompt, &r.sequence.response) as u64;
        }
        counts.push((cfg.samples as u64, correct));
    }
    Ok(EvalReport {
        schema_version: analysis::SCHEMA_VERSION,
        label: label.to_string(),
        prompts: prompts.len(),
        temperature: cfg.temperature,
        greedy_accuracy: greedy_hits / prompts.len() as f64,
        pass_at_k: PassAtKReport::new(counts, &cfg.ks)?,
    })
}

pub fn validation_prompts(data: &DatasetSplits) -> Vec<Vec<u32>> {
    data.validation
        .iter()
        .map(|i| i.sequence.prompt.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub checkpoint: Option<String>,
    pub params_sha256: Option<String>,
    pub metrics: Option<String>,
    pub wall_clock_secs: f64,
    pub summary: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub code_version: String,
    pub status: RunStatus,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub dataset_hash: Option<String>,
    pub stages: Vec<StageRecord>,
    pub reports: Vec<String>,
    /// Digest of this manifest with wall-clock fields and output paths cleared.
    pub content_hash: Option<String>,
}

impl RunManifest {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            schema_version: MANIFEST_SCHEMA,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            status: RunStatus::Running,
            failed_stage: None,
            error: None,
            config: cfg.clone(),
            config_hash: cfg.content_hash()?,
            dataset_hash: None,
            stages: Vec::new(),
            reports: Vec::new(),
            content_hash: None,
        })
    }

    pub fn compute_content_hash(&self) -> Result<String> {
        let mut m = self.clone();
        m.content_hash = None;
        m.config.output_dir = None;
        m.config.base.cache_dir = None;
        m.stages.iter_mut().for_each(|s| s.wall_clock_secs = 0.0);
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&m)?)))
    }

    pub fn checkpoints(&self) -> Vec<&str> {
        self.stages
            .iter()
            .filter_map(|s| s.checkpoint.as_deref())
            .collect()
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
    }
}

/// Refuses to reuse a directory holding a previous run unless `overwrite`;
/// with `overwrite`, removes only the artifacts a run writes.
pub fn prepare_output_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.join(MANIFEST_FILE).exists() {
        if !overwrite {
            return Err(Error::Rejected(format!(
                "{} already holds a run; pass --overwrite to replace it",
                dir.display()
            )));
        }
        for sub in ["data", "checkpoints", "metrics", "reports"] {
            let p = dir.join(sub);
            if p.is_dir() {
                fs::remove_dir_all(p)?;
            }
        }
        fs::remove_file(dir.join(MANIFEST_FILE))?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Writes metric records as JSON lines.
pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", rec.to_json_line()?)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

fn write_json<T: Serialize>(dir: &Path, rel: &str, value: &T) -> Result<String> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, serde_json::to_string_pretty(value)?)?;
    Ok(rel.to_string())
}

fn save_stage_checkpoint(
    dir: &Path,
    name: &str,
    model: &PolicyModel,
    seed: u64,
) -> Result<(String, String)> {
    let rel = format!("checkpoints/{name}");
    let m = save_checkpoint(&dir.join(&rel), model, Some(tasks::vocabulary()), seed)?;
    Ok((rel, m.params_sha256))
}

/// Runs one stage with timing, a metric stream and failure bookkeeping.
fn run_stage<T>(
    dir: &Path,
    manifest: &mut RunManifest,
    name: &str,
    with_metrics: bool,
    body: impl FnOnce(Sink) -> Result<T>,
) -> Result<(T, usize)> {
    let start = Instant::now();
    let rel = format!("metrics/{name}.jsonl");
    let result = if with_metrics {
        let mut writer = JsonlWriter::create(&dir.join(&rel))?;
        let r = body(&mut |rec: &MetricsRecord| writer.write(rec));
        writer.finish()?;
        r
    } else {
        body(&mut discard)
    };
    match result {
        Ok(v) => {
            manifest.stages.push(StageRecord {
                name: name.to_string(),
                checkpoint: None,
                params_sha256: None,
                metrics: with_metrics.then_some(rel),
                wall_clock_secs: start.elapsed().as_secs_f64(),
                summary: BTreeMap::new(),
            });
            Ok((v, manifest.stages.len() - 1))
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.failed_stage = Some(name.to_string());
            manifest.error = Some(e.to_string());
            manifest.write(dir)?;
            Err(Error::Rejected(format!("stage {name} failed: {e}")))
        }
    }
}

/// Full pipeline into `dir`. The manifest is written before the first stage
/// and finalized after the last.
pub fn run_pipeline(cfg: &ExperimentConfig, dir: &Path, overwrite: bool) -> Result<RunManifest> {
    cfg.validate()?;
    prepare_output_dir(dir, overwrite)?;
    let mut manifest = RunManifest::new(cfg)?;
    manifest.write(dir)?;

    let (data, _) = run_stage(dir, &mut manifest, "data", false, |_| {
        let data = generate_data(cfg)?;
        tasks::write_dataset(&dir.join("data"), &data)?;
        Ok(data)
    })?;
    manifest.dataset_hash = Some(tasks::content_hash(&data)?);

    let (base, idx) = run_stage(dir, &mut manifest, "base", true, |sink| {
        pretrain_base_cached(cfg, &data, sink)
    })?;
    let (ckpt, sha) = save_stage_checkpoint(dir, "base", &base, cfg.data_seed())?;
    manifest.stages[idx].checkpoint = Some(ckpt);
    manifest.stages[idx].params_sha256 = Some(sha);
    manifest.write(dir)?;

    let eval_prompts = validation_prompts(&data);
    let val_set = DatasetSplits::sequences(&data.validation);
    let mut current = base.clone();

    if cfg.sft.method != SftMethod::None {
        let (out, idx) = run_stage(dir, &mut manifest, "sft", true, |sink| {
            sft_stage(cfg, &base, &data, sink)
        })?;
        let out = out.expect("method is not none");
        let (ckpt, sha) = save_stage_checkpoint(dir, "sft", &out.model, cfg.seed)?;
        let stage = &mut manifest.stages[idx];
        stage.checkpoint = Some(ckpt);
        stage.params_sha256 = Some(sha);
        stage
            .summary
            .insert("selected_epoch".into(), out.selected_epoch as f64);
        if let Some(v) = out.val_losses.get(out.selected_epoch.wrapping_sub(1)) {
            stage.summary.insert("val_loss".into(), *v);
        }
        let report = analysis::consistency_report(
            "base→sft",
            &base,
            &out.model,
            &val_set,
            cfg.eval.kl_direction,
            &cfg.eval.overlap_ks,
        )?;
        manifest.reports.push(write_json(
            dir,
            "reports/consistency_base_sft.json",
            &report,
        )?);
        current = out.model;
        manifest.write(dir)?;
    }

    let pre_rl = current.clone();
    let pre_rl_label = if cfg.sft.method == SftMethod::None {
        "base"
    } else {
        "sft"
    };
    let (eval, _) = run_stage(
        dir,
        &mut manifest,
        &format!("eval-{pre_rl_label}"),
        false,
        |_| {
            evaluate(
                &pre_rl,
                &cfg.task,
                &eval_prompts,
                &cfg.eval,
                cfg.seed,
                pre_rl_label,
            )
        },
    )?;
    manifest.reports.push(write_json(
        dir,
        &format!("reports/eval_{pre_rl_label}.json"),
        &eval,
    )?);

    if cfg.rl.epochs > 0 {
        let (out, idx) = run_stage(dir, &mut manifest, "rl", true, |sink| {
            rl_stage(cfg, &pre_rl, &data, sink)
        })?;
        let out = out.expect("rl epochs > 0");
        let (ckpt, sha) = save_stage_checkpoint(dir, "rl", &out.model, cfg.seed)?;
        let stage = &mut manifest.stages[idx];
        stage.checkpoint = Some(ckpt);
        stage.params_sha256 = Some(sha);
        if let Some(last) = out.metrics.last() {
            stage.summary.insert(
                "final_mean_reward".into(),
                last.get("mean_reward").unwrap_or(f64::NAN),
            );
        }
        stage
            .summary
            .insert("steps".into(), out.metrics.len() as f64);
        let label = format!("{pre_rl_label}→rl");
        let report = analysis::consistency_report(
            &label,
            &pre_rl,
            &out.model,
            &val_set,
            cfg.eval.kl_direction,
            &cfg.eval.overlap_ks,
        )?;
        manifest.reports.push(write_json(
            dir,
            &format!("reports/consistency_{pre_rl_label}_rl.json"),
            &report,
        )?);
        current = out.model;
        let (eval, _) = run_stage(dir, &mut manifest, "eval-rl", false, |_| {
            evaluate(
                &current,
                &cfg.task,
                &eval_prompts,
                &cfg.eval,
                cfg.seed,
                "rl",
            )
        })?;
        manifest
            .reports
            .push(write_json(dir, "reports/eval_rl.json", &eval)?);
    }

    manifest.status = RunStatus::Completed;
    manifest.content_hash = Some(manifest.compute_content_hash()?);
    manifest.write(dir)?;
    Ok(manifest)
}

/// Result of one in-memory SFT → RL → eval cell.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub sft: Option<TrainOutcome>,
    pub pre_rl_eval: EvalReport,
    pub final_model: PolicyModel,
    pub final_eval: Option<EvalReport>,
    pub final_reward: Option<f64>,
}

/// The stages after base pretraining, without touching the filesystem.
pub fn run_cell(
    cfg: &ExperimentConfig,
    base: &PolicyModel,
    data: &DatasetSplits,
) -> Result<CellOutcome> {
    cfg.validate()?;
    let prompts = validation_prompts(data);
    let sft = sft_stage(cfg, base, data, &mut discard)?;
    let pre_rl = sft
        .as_ref()
        .map_or_else(|| base.clone(), |o| o.model.clone());
    let label = if sft.is_some() { "sft" } else { "base" };
    let pre_rl_eval = evaluate(&pre_rl, &cfg.task, &prompts, &cfg.eval, cfg.seed, label)?;
    let (final_model, final_eval, final_reward) = match rl_stage(cfg, &pre_rl, data, &mut discard)?
    {
        Some(out) => {
            let eval = evaluate(&out.model, &cfg.task, &prompts, &cfg.eval, cfg.seed, "rl")?;
            let reward = out.metrics.last().and_then(|m| m.get("mean_reward"));
            (out.model, Some(eval), reward)
        }
        None => (pre_rl, None, None),
    };
    Ok(CellOutcome {
        sft,
        pre_rl_eval,
        final_model,
        final_eval,
        final_reward,
    })
}

/// GIFT → RL → eval for every (β, seed). Data and base come from
/// `cfg.data_seed()` and are shared by all cells; a failing cell is recorded
/// and the sweep continues.
pub fn sweep_beta(cfg: &ExperimentConfig, betas: &[f64], seeds: &[u64]) -> Result<SweepTable> {
    cfg.validate()?;
    let data = generate_data(cfg)?;
    let base = pretrain_base_cached(cfg, &data, &mut discard)?;
    let mut rows = Vec::new();
    for &beta in betas {
        for &seed in seeds {
            let mut cell = cfg.clone();
            cell.seed = seed;
            cell.data_seed = Some(cfg.data_seed());
            cell.sft = cell.sft.clone().with_method(SftMethod::Gift, Some(beta));
            let row = match run_cell(&cell, &base, &data) {
                Ok(out) => {
                    let eval = out.final_eval.as_ref().unwrap_or(&out.pre_rl_eval);
                    SweepRow {
                        beta,
                        seed,
                        status: "ok".into(),
                        pass_at_1: eval.pass_at(1),
                        pass_at_8: eval.pass_at(8),
                        final_reward: out.final_reward,
                    }
                }
                Err(e) => SweepRow {
                    beta,
                    seed,
                    status: format!("failed: {e}"),
                    pass_at_1: None,
                    pass_at_8: None,
                    final_reward: None,
                },
            };
            rows.push(row);
        }
    }
    Ok(SweepTable::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(seed);
        cfg.task = TaskSpec::mod_addition(10, 2);
        cfg.sizes = SplitSizes {
            sft: 24,
            rl: 16,
            validation: 8,
        };
        cfg.model = TransformerConfig {
            vocab_size: tasks::VOCAB_SIZE,
            context: 8,
            width: 8,
            heads: 2,
            layers: 1,
        };
        cfg.base.corpus_size = 40;
        cfg.base.epochs = 1;
        cfg.base.include_easier = false;
        cfg.sft.epochs = 2;
        cfg.sft.batch = 8;
        cfg.rl.max_steps = Some(2);
        cfg.rl.batch_prompts = 2;
        cfg.rl.group_size = 4;
        cfg.rl.max_new_tokens = 3;
        cfg.eval.samples = 8;
        cfg.eval.max_prompts = Some(4);
        cfg
    }

    #[test]
    fn config_json_and_overrides() {
        let cfg = ExperimentConfig::new(3);
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        assert!(
            ExperimentConfig::from_json(r#"{"task": {"family": "digit-sort", "length": 3}}"#)
                .is_err()
        );
        let minimal = ExperimentConfig::from_json(r#"{"seed": 4}"#).unwrap();
        assert_eq!(minimal.seed, 4);

        let o = cfg
            .with_overrides(&[
                "sft.epochs=2".into(),
                "sft.method=sft".into(),
                "sft.beta=null".into(),
                "rl.kl_coeff=0.5".into(),
            ])
            .unwrap();
        assert_eq!(o.sft.epochs, 2);
        assert_eq!(o.sft.method, SftMethod::Sft);
        assert_eq!(o.rl.kl_coeff, 0.5);
        o.validate().unwrap();
        assert!(cfg.with_overrides(&["sft.nope=1".into()]).is_err());
        assert!(cfg.with_overrides(&["sft.epochs".into()]).is_err());
    }

    #[test]
    fn method_fields_present_iff_selected() {
        let mut cfg = ExperimentConfig::new(0);
        cfg.sft.method = SftMethod::Sft;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.sft = cfg.sft.clone().with_method(SftMethod::Sft, None);
        cfg.validate().unwrap();
        cfg.sft.method = SftMethod::Kd;
        assert!(cfg.validate().is_err());
        cfg.sft.alpha = Some(0.5);
        cfg.validate().unwrap();
        cfg.model.vocab_size = 30;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_hash_ignores_output_locations() {
        let mut a = ExperimentConfig::new(1);
        let h = a.content_hash().unwrap();
        a.output_dir = Some("/tmp/x".into());
        a.base.cache_dir = Some("/tmp/cache".into());
        assert_eq!(a.content_hash().unwrap(), h);
        a.seed = 2;
        assert_ne!(a.content_hash().unwrap(), h);
    }

    #[test]
    fn selection_picks_requested_or_best_epoch() {
        let cfg = tiny_config(5);
        let data = generate_data(&cfg).unwrap();
        let base = pretrain_base(&cfg, &data, &mut discard).unwrap();
        let mut c = cfg.clone();
        c.sft = c.sft.clone().with_method(SftMethod::Sft, None);
        c.sft.epochs = 3;
        let out = sft_stage(&c, &base, &data, &mut discard).unwrap().unwrap();
        let best = out
            .val_losses
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i + 1)
            .unwrap();
        assert_eq!(out.selected_epoch, best);
        c.sft.select_epoch = Some(2);
        assert_eq!(
            sft_stage(&c, &base, &data, &mut discard)
                .unwrap()
                .unwrap()
                .selected_epoch,
            2
        );
    }

    #[test]
    fn zero_gain_gift_stays_at_base() {
        let cfg = tiny_config(6);
        let data = generate_data(&cfg).unwrap();
        let base = pretrain_base(&cfg, &data, &mut discard).unwrap();
        let mut c = cfg.clone();
        c.sft = c.sft.clone().with_method(SftMethod::Gift, Some(0.0));
        let out = sft_stage(&c, &base, &data, &mut discard).unwrap().unwrap();
        let tv = analysis::mean_tv(
            &base,
            &out.model,
            &DatasetSplits::sequences(&data.validation),
        )
        .unwrap();
        assert!(tv < 0.01, "{tv}");
    }

    #[test]
    fn greedy_and_eval_are_deterministic() {
        let cfg = tiny_config(7);
        let data = generate_data(&cfg).unwrap();
        let base = pretrain_base(&cfg, &data, &mut discard).unwrap();
        let p = validation_prompts(&data);
        let a = evaluate(&base, &cfg.task, &p, &cfg.eval, 1, "base").unwrap();
        assert_eq!(
            a,
            evaluate(&base, &cfg.task, &p, &cfg.eval, 1, "base").unwrap()
        );
        assert_eq!(a.prompts, 4);
        let g = greedy_decode(&base, &p[0], tasks::EOS, 3).unwrap();
        assert!(!g.is_empty() && g.len() <= 3);
    }

    #[test]
    fn pipeline_writes_manifest_and_guards_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(8);
        cfg.rl.epochs = 0;
        let m = run_pipeline(&cfg, dir.path(), false).unwrap();
        assert_eq!(m.status, RunStatus::Completed);
        assert_eq!(m.checkpoints(), vec!["checkpoints/base", "checkpoints/sft"]);
        assert!(dir.path().join("metrics/sft.jsonl").exists());
        assert!(!dir.path().join("metrics/rl.jsonl").exists());
        assert_eq!(RunManifest::read(dir.path()).unwrap(), m);
        assert!(matches!(
            run_pipeline(&cfg, dir.path(), false),
            Err(Error::Rejected(_))
        ));
        let again = run_pipeline(&cfg, dir.path(), true).unwrap();
        assert_eq!(again.content_hash, m.content_hash);
    }

    #[test]
    fn base_cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(9);
        cfg.base.cache_dir = Some(dir.path().to_path_buf());
        let data = generate_data(&cfg).unwrap();
        let fresh = pretrain_base_cached(&cfg, &data, &mut discard).unwrap();
        let cached = pretrain_base_cached(&cfg, &data, &mut discard).unwrap();
        assert_eq!(fresh, cached);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn single_beta_sweep_matches_cell() {
        let cfg = tiny_config(10);
        let table = sweep_beta(&cfg, &[3.0], &[10]).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.medians.len(), 1);
        let data = generate_data(&cfg).unwrap();
        let base = pretrain_base(&cfg, &data, &mut discard).unwrap();
        let mut c = cfg.clone();
        c.sft = c.sft.clone().with_method(SftMethod::Gift, Some(3.0));
        let out = run_cell(&c, &base, &data).unwrap();
        let eval = out.final_eval.unwrap();
        assert_eq!(table.rows[0].pass_at_1, eval.pass_at(1));
        assert_eq!(table.rows[0].pass_at_8, eval.pass_at(8));
    }

    #[test]
    fn five_by_five_sweep_bookkeeping() {
        let mut cfg = tiny_config(12);
        cfg.rl.max_steps = Some(1);
        cfg.sft.epochs = 1;
        let table = sweep_beta(&cfg, &[1.0, 5.0, 10.0, 20.0, 50.0], &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(table.rows.len(), 25);
        assert_eq!(table.medians.len(), 5);
        assert!(table.rows.iter().all(|r| r.status == "ok"));
        assert_eq!(table.to_csv().lines().count(), 1 + 25 + 5);
    }

    #[test]
    fn failing_cell_is_recorded() {
        let mut cfg = tiny_config(11);
        cfg.sft.lr = 1e-3;
        // A negative β is rejected when the cell runs; the sweep carries on.
        let table = sweep_beta(&cfg, &[-1.0, 2.0], &[1]).unwrap();
        assert!(table.rows[0].status.starts_with("failed"));
        assert_eq!(table.rows[1].status, "ok");
    }

    #[test]
    fn grpo_reward_rises_from_sft_init() {
        // A validation-selected but imperfect SFT init: few demonstrations on
        // a partly trained base.
        let mut cfg = ExperimentConfig::new(0);
        cfg.data_seed = Some(31);
        cfg.sizes = SplitSizes {
            sft: 60,
            rl: 300,
            validation: 60,
        };
        cfg.base.epochs = 11;
        cfg.sft = cfg.sft.clone().with_method(SftMethod::Sft, None);
        cfg.rl.max_steps = Some(200);
        cfg.rl.batch_prompts = 4;
        cfg.validate().unwrap();
        let data = generate_data(&cfg).unwrap();
        let base = pretrain_base(&cfg, &data, &mut discard).unwrap();
        let init = sft_stage(&cfg, &base, &data, &mut discard)
            .unwrap()
            .unwrap()
            .model;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let gains: Vec<f64> = (1..=5)
            .map(|seed| {
                let mut c = cfg.clone();
                c.seed = seed;
                let out = rl_stage(&c, &init, &data, &mut discard).unwrap().unwrap();
                let r: Vec<f64> = out
                    .metrics
                    .iter()
                    .filter_map(|m| m.get("mean_reward"))
                    .collect();
                assert_eq!(r.len(), 200);
                // Per-step batch rewards are noisy; compare 20-step windows.
                mean(&r[180..]) - mean(&r[..20])
            })
            .collect();
        let m = analysis::median(&gains).unwrap();
        assert!(m >= 0.05, "median reward gain {m:.3} from {gains:?}");
    }
}
