//! The operational pipeline: fine-tune, QAT fine-tune (collapsible),
//! quantize, evaluate — with optional selective kurtosis regularization.
//!
//! Training is one logical thread of control: each step builds a tape over
//! the batch, adds the task loss and (when active) the lambda-weighted
//! kurtosis penalty over the included weight tensors, and applies one
//! SGD-with-momentum update. The inclusion mask is frozen from the
//! kurtosis report taken at the start of each training phase; excluded
//! tensors receive exactly zero regularizer gradient every step.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::kure::{self, KureMode, KurtosisReport};
use crate::model::{
    self, forward_int8, forward_on_tape, generate_pretrained_like, init_random, HeavySite,
    ModelConfig, ModelParams, ParamNodes, QatState, QuantizedModel,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Labeling rule of the synthetic classification task. Labels are a
/// deterministic function of the tokens, so Bayes accuracy is 1.0 and any
/// deficit is attributable to the model or its quantization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum TaskRule {
    /// Class = token class (`token % num_classes`) with the most hits;
    /// ties break toward the lowest class index.
    MajorityToken,
    /// Class 1 iff `first` is immediately followed by `second` somewhere.
    ContainsPattern { first: usize, second: usize },
}

/// Synthetic token-sequence classification task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticTask {
    pub vocab: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub rule: TaskRule,
}

impl SyntheticTask {
    pub fn new(cfg: &ModelConfig, rule: TaskRule) -> Self {
        SyntheticTask {
            vocab: cfg.vocab,
            seq_len: cfg.seq_len,
            num_classes: cfg.num_classes,
            rule,
        }
    }

    /// Deterministic label for a token sequence.
    pub fn label(&self, tokens: &[usize]) -> usize {
        match self.rule {
            TaskRule::MajorityToken => {
                let mut counts = alloc::vec![0usize; self.num_classes];
                for &t in tokens {
                    counts[t % self.num_classes] += 1;
                }
                let mut best = 0;
                for (c, &n) in counts.iter().enumerate() {
                    if n > counts[best] {
                        best = c;
                    }
                }
                best
            }
            TaskRule::ContainsPattern { first, second } => {
                let hit = tokens.windows(2).any(|w| w[0] == first && w[1] == second);
                usize::from(hit)
            }
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> (Vec<usize>, usize) {
        let tokens: Vec<usize> = (0..self.seq_len).map(|_| rng.next_index(self.vocab)).collect();
        let label = self.label(&tokens);
        (tokens, label)
    }

    pub fn gen_set(&self, rng: &mut Rng, n: usize) -> Vec<(Vec<usize>, usize)> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// Training hyperparameters and regularizer policy.
///
/// Every field has a default, so config files may specify any subset;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub steps: usize,
    pub lambda: f32,
    pub kure_mode: KureMode,
    pub kure_target: f32,
    pub exclusion_threshold: f32,
    pub exclusion_patterns: Vec<String>,
    pub qat_enabled: bool,
    pub collapse_stages: bool,
    pub seed: u64,
    /// Kurtosis report / histogram cadence in steps.
    pub report_every: usize,
    /// Held-out evaluation set size (generated from seed + 1).
    pub eval_examples: usize,
    /// Tensors to snapshot as histograms at the report cadence.
    pub hist_tensors: Vec<String>,
    /// EMA decay of the activation calibrators.
    pub act_decay: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            batch_size: 20,
            steps: 2000,
            lambda: 0.5,
            kure_mode: KureMode::TargetDeviation,
            kure_target: kure::UNIFORM_KURTOSIS,
            exclusion_threshold: 100.0,
            exclusion_patterns: Vec::new(),
            qat_enabled: true,
            collapse_stages: true,
            seed: 42,
            report_every: 100,
            eval_examples: 2000,
            hist_tensors: Vec::new(),
            act_decay: 0.99,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::BadParam {
                what: "lambda",
                value: self.lambda as f64,
            });
        }
        for (what, v) in [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("report_every", self.report_every),
            ("eval_examples", self.eval_examples),
        ] {
            if v == 0 {
                return Err(Error::BadParam { what, value: 0.0 });
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::BadParam {
                what: "lr",
                value: self.lr as f64,
            });
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::BadParam {
                what: "momentum",
                value: self.momentum as f64,
            });
        }
        Ok(())
    }
}

/// Pipeline stages, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Finetune,
    QatFinetune,
    Quantize,
    Evaluate,
}

impl Stage {
    pub fn parse(s: &str) -> Option<Stage> {
        match s {
            "finetune" => Some(Stage::Finetune),
            "qat_finetune" => Some(Stage::QatFinetune),
            "quantize" => Some(Stage::Quantize),
            "evaluate" => Some(Stage::Evaluate),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Finetune => "finetune",
            Stage::QatFinetune => "qat_finetune",
            Stage::Quantize => "quantize",
            Stage::Evaluate => "evaluate",
        }
    }
}

/// Initial parameters for a run.
#[derive(Clone, Debug)]
pub enum InitSpec {
    /// Planted heavy-tailed model shaped like a pretrained checkpoint.
    PretrainedLike {
        heavy_site: HeavySite,
        dof: f32,
        scale: f32,
    },
    /// Plain random initialization.
    Random,
    /// Explicit parameters (e.g. loaded from a checkpoint), optionally with
    /// persisted activation calibration.
    Params {
        params: ModelParams,
        act_absmax: BTreeMap<String, f32>,
    },
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec::PretrainedLike {
            heavy_site: HeavySite::FfnFc2,
            dof: 2.5,
            scale: 1e-3,
        }
    }
}

/// Everything a pipeline run needs.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rule: TaskRule,
    pub init: InitSpec,
}

/// Loss components of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub task_loss: f32,
    pub kure_loss: f32,
    pub total_loss: f32,
}

/// SGD with momentum over the named parameter tensors.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// `v <- momentum * v + g; w <- w - lr * v` for every reached tensor.
    pub fn apply(
        &mut self,
        params: &mut ModelParams,
        pn: &ParamNodes,
        tape: &Tape,
        grads: &crate::autodiff::Gradients,
    ) -> Result<()> {
        for (name, id) in pn.iter() {
            if !grads.reached(id) {
                continue;
            }
            let g = grads.wrt(tape, id);
            let v = self
                .velocity
                .entry(String::from(name))
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let w = params.get_mut(name)?;
            for ((vi, gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *wi -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

/// One optimizer update over a batch. Returns the loss components; the
/// regularizer runs in the configured mode over the tensors the report
/// marks as included.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut ModelParams,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    qat: &mut QatState,
    opt: &mut Sgd,
    batch: &[(Vec<usize>, usize)],
    report: &KurtosisReport,
    step: usize,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::BadParam {
            what: "batch size",
            value: 0.0,
        });
    }
    let mut tape = Tape::new();
    let pn = ParamNodes::register(&mut tape, params);
    qat.begin_forward();

    let mut acc: Option<NodeId> = None;
    for (tokens, label) in batch {
        let logits = forward_on_tape(&mut tape, &pn, model_cfg, tokens, qat)?;
        let ce = tape.cross_entropy(logits, *label)?;
        acc = Some(match acc {
            None => ce,
            Some(prev) => tape.add(prev, ce)?,
        });
    }
    let task = tape.scale(acc.expect("non-empty batch"), 1.0 / batch.len() as f32);

    let mut kure_node = None;
    if cfg.lambda > 0.0 {
        let mut masked = Vec::new();
        for e in &report.entries {
            masked.push((pn.get(&e.name)?, e.included));
        }
        if let Some(penalty) =
            kure::penalty_node(&mut tape, &masked, cfg.kure_mode, cfg.kure_target, kure::MOMENT_EPS)?
        {
            kure_node = Some(tape.scale(penalty, cfg.lambda));
        }
    }

    let total = match kure_node {
        Some(k) => tape.add(task, k)?,
        None => task,
    };

    let task_loss = tape.value(task).item()?;
    let kure_loss = kure_node.map_or(0.0, |k| tape.value(k).item().unwrap_or(f32::NAN));
    let total_loss = tape.value(total).item()?;
    if !total_loss.is_finite() {
        return Err(Error::Divergence {
            step,
            task_loss,
            kure_loss,
        });
    }

    let grads = tape.backward(total)?;
    opt.apply(params, &pn, &tape, &grads)?;
    Ok(StepStats {
        task_loss,
        kure_loss,
        total_loss,
    })
}

/// Evaluation numeric format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Fp32,
    Int8,
}

fn argmax(t: &Tensor) -> usize {
    let mut best = 0;
    for (i, &v) in t.data().iter().enumerate() {
        if v > t.data()[best] {
            best = i;
        }
    }
    best
}

/// Deterministic accuracy over a fixed dataset.
///
/// INT8 evaluation requires a quantized model with calibrated activation
/// scales; passing none is a state error.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    dataset: &[(Vec<usize>, usize)],
    precision: Precision,
    quantized: Option<&QuantizedModel>,
) -> Result<f32> {
    if dataset.is_empty() {
        return Err(Error::BadParam {
            what: "evaluation set size",
            value: 0.0,
        });
    }
    let mut correct = 0usize;
    match precision {
        Precision::Fp32 => {
            let mut qat = QatState::disabled();
            for (tokens, label) in dataset {
                let logits = model::forward(params, cfg, tokens, &mut qat)?;
                if argmax(&logits) == *label {
                    correct += 1;
                }
            }
        }
        Precision::Int8 => {
            let qm = quantized.ok_or_else(|| Error::MissingCalibration {
                site: String::from("quantized model"),
            })?;
            for (tokens, label) in dataset {
                let logits = forward_int8(qm, cfg, tokens)?;
                if argmax(&logits) == *label {
                    correct += 1;
                }
            }
        }
    }
    Ok(correct as f32 / dataset.len() as f32)
}

/// One histogram bin: `[left, right)` except the last bin, which is closed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub left: f32,
    pub right: f32,
    pub count: u64,
}

/// Equal-width histogram spanning the observed min/max.
pub fn histogram(t: &Tensor, bins: usize) -> Vec<HistBin> {
    assert!(bins > 0, "histogram needs at least one bin");
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in t.data() {
        min = min.min(v);
        max = max.max(v);
    }
    if !min.is_finite() || !max.is_finite() {
        min = 0.0;
        max = 0.0;
    }
    if min == max {
        // Degenerate range: widen so counts land somewhere sensible.
        min -= 0.5;
        max += 0.5;
    }
    let width = (max - min) / bins as f32;
    let mut out: Vec<HistBin> = (0..bins)
        .map(|i| HistBin {
            left: min + width * i as f32,
            right: if i + 1 == bins { max } else { min + width * (i + 1) as f32 },
            count: 0,
        })
        .collect();
    for &v in t.data() {
        let idx = (((v - min) / width) as usize).min(bins - 1);
        out[idx].count += 1;
    }
    out
}

/// Kurtosis report taken at a given global step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KurtosisSnapshot {
    pub step: usize,
    pub report: KurtosisReport,
}

/// Histogram of one tensor at a given global step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramSnapshot {
    pub tensor: String,
    pub step: usize,
    pub bins: Vec<HistBin>,
}

/// Everything a run produces, serializable as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stages: Vec<String>,
    pub task_loss: Vec<f32>,
    pub kure_loss: Vec<f32>,
    pub total_loss: Vec<f32>,
    pub kurtosis_snapshots: Vec<KurtosisSnapshot>,
    pub histograms: Vec<HistogramSnapshot>,
    pub final_fp32_accuracy: Option<f32>,
    pub final_int8_accuracy: Option<f32>,
}

impl RunRecord {
    /// Mean `|K - target|` over included tensors per snapshot.
    pub fn deviation_series(&self, target: f32) -> Vec<(usize, f32)> {
        self.kurtosis_snapshots
            .iter()
            .map(|s| (s.step, s.report.mean_abs_deviation(target)))
            .collect()
    }
}

/// Trained artifacts of a pipeline run.
pub struct PipelineResult {
    pub record: RunRecord,
    pub params: ModelParams,
    pub qat: QatState,
    pub quantized: Option<QuantizedModel>,
}

fn validate_stages(stages: &[Stage]) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::BadParam {
            what: "stage list (empty)",
            value: 0.0,
        });
    }
    for w in stages.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::BadParam {
                what: "stage order",
                value: 0.0,
            });
        }
    }
    Ok(())
}

fn build_init(cfg: &ExperimentConfig, qat: &mut QatState) -> Result<ModelParams> {
    let mut rng = Rng::new(cfg.train.seed);
    match &cfg.init {
        InitSpec::PretrainedLike {
            heavy_site,
            dof,
            scale,
        } => generate_pretrained_like(&mut rng, &cfg.model, *heavy_site, *dof, *scale),
        InitSpec::Random => init_random(&mut rng, &cfg.model),
        InitSpec::Params { params, act_absmax } => {
            for (site, absmax) in act_absmax {
                qat.restore_site(site, *absmax)?;
            }
            Ok(params.clone())
        }
    }
}

struct Recorder<'a> {
    record: RunRecord,
    cfg: &'a ExperimentConfig,
}

impl Recorder<'_> {
    /// Snapshot current kurtosis stats, flagged with the active training
    /// mask (not re-thresholded), plus histograms of the watched tensors.
    fn snapshot(&mut self, step: usize, params: &ModelParams, mask: &BTreeMap<String, bool>) {
        if let Some(last) = self.record.kurtosis_snapshots.last() {
            if last.step == step {
                return;
            }
        }
        let t = &self.cfg.train;
        let mut report = kure::kurtosis_report(
            params,
            t.exclusion_threshold,
            &t.exclusion_patterns,
            t.lambda,
            t.kure_mode,
            t.kure_target,
        );
        for e in &mut report.entries {
            if let Some(&included) = mask.get(&e.name) {
                e.included = included;
            }
        }
        self.record.kurtosis_snapshots.push(KurtosisSnapshot { step, report });
        for name in &t.hist_tensors {
            if let Ok(tensor) = params.get(name) {
                self.record.histograms.push(HistogramSnapshot {
                    tensor: name.clone(),
                    step,
                    bins: histogram(tensor, 64),
                });
            }
        }
    }
}

/// Runs the requested subset of the pipeline, in order.
///
/// With `collapse_stages` set and both training stages requested, the task
/// fine-tune and QAT fine-tune merge into a single phase carrying the full
/// step budget, QAT instrumentation, and the regularizer. Sequential
/// stages split the budget evenly; the regularizer rides with the QAT
/// phase. The held-out evaluation set comes from `seed + 1`, the batch
/// stream from `seed + 2`.
pub fn run_pipeline(cfg: &ExperimentConfig, stages: &[Stage]) -> Result<PipelineResult> {
    validate_stages(stages)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let t = &cfg.train;

    let task = SyntheticTask::new(&cfg.model, cfg.rule);
    let mut qat = QatState::new(t.act_decay)?;
    qat.enabled = false;
    let mut params = build_init(cfg, &mut qat)?;
    let eval_set = task.gen_set(&mut Rng::new(t.seed.wrapping_add(1)), t.eval_examples);
    let mut train_rng = Rng::new(t.seed.wrapping_add(2));
    let mut opt = Sgd::new(t.lr, t.momentum);

    let mut recorder = Recorder {
        record: RunRecord {
            stages: stages.iter().map(|s| s.name().to_string()).collect(),
            task_loss: Vec::new(),
            kure_loss: Vec::new(),
            total_loss: Vec::new(),
            kurtosis_snapshots: Vec::new(),
            histograms: Vec::new(),
            final_fp32_accuracy: None,
            final_int8_accuracy: None,
        },
        cfg,
    };

    // Phases: (qat on, kure on, steps).
    let wants_ft = stages.contains(&Stage::Finetune);
    let wants_qat = stages.contains(&Stage::QatFinetune);
    let mut phases: Vec<(bool, bool, usize)> = Vec::new();
    if wants_ft && wants_qat && t.collapse_stages {
        phases.push((t.qat_enabled, true, t.steps));
    } else {
        if wants_ft {
            let steps = if wants_qat { t.steps / 2 } else { t.steps };
            phases.push((false, false, steps));
        }
        if wants_qat {
            let steps = if wants_ft { t.steps - t.steps / 2 } else { t.steps };
            phases.push((t.qat_enabled, true, steps));
        }
    }

    let mut global_step = 0usize;
    for (qat_on, kure_on, phase_steps) in phases {
        qat.enabled = qat_on;
        qat.set_training(true);

        // Selection policy: mask frozen from the report at phase start.
        let report = kure::kurtosis_report(
            &params,
            t.exclusion_threshold,
            &t.exclusion_patterns,
            t.lambda,
            t.kure_mode,
            t.kure_target,
        );
        let mask: BTreeMap<String, bool> = report
            .entries
            .iter()
            .map(|e| (e.name.clone(), e.included))
            .collect();
        recorder.snapshot(global_step, &params, &mask);

        let mut phase_cfg = t.clone();
        if !kure_on {
            phase_cfg.lambda = 0.0;
        }
        for _ in 0..phase_steps {
            let batch: Vec<(Vec<usize>, usize)> =
                (0..t.batch_size).map(|_| task.sample(&mut train_rng)).collect();
            let stats = train_step(
                &mut params,
                &cfg.model,
                &phase_cfg,
                &mut qat,
                &mut opt,
                &batch,
                &report,
                global_step,
            )?;
            recorder.record.task_loss.push(stats.task_loss);
            recorder.record.kure_loss.push(stats.kure_loss);
            recorder.record.total_loss.push(stats.total_loss);
            global_step += 1;
            if global_step % t.report_every == 0 {
                recorder.snapshot(global_step, &params, &mask);
            }
        }
        recorder.snapshot(global_step, &params, &mask);
    }

    let mut quantized = None;
    if stages.contains(&Stage::Quantize) {
        qat.set_training(false);
        quantized = Some(QuantizedModel::from_params(&params, &qat));
    }

    if stages.contains(&Stage::Evaluate) {
        recorder.record.final_fp32_accuracy = Some(evaluate(
            &params,
            &cfg.model,
            &eval_set,
            Precision::Fp32,
            None,
        )?);
        if let Some(qm) = &quantized {
            recorder.record.final_int8_accuracy = Some(evaluate(
                &params,
                &cfg.model,
                &eval_set,
                Precision::Int8,
                Some(qm),
            )?);
        }
    }

    Ok(PipelineResult {
        record: recorder.record,
        params,
        qat,
        quantized,
    })
}

/// One arm of the A/B comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub name: String,
    pub fp32_accuracy: f32,
    pub int8_accuracy: f32,
    /// Mean `|K - target|` over included tensors at the end of training.
    pub final_kurtosis_deviation: f32,
    pub record: RunRecord,
}

/// Comparison of QAT fine-tuning with and without the selective
/// kurtosis regularizer, with identical seeds and budgets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbRecord {
    pub kure_arm: ArmRecord,
    pub baseline_arm: ArmRecord,
    /// `kure INT8 accuracy - baseline INT8 accuracy`.
    pub int8_gap: f32,
}

fn arm(name: &str, cfg: &ExperimentConfig) -> Result<ArmRecord> {
    let result = run_pipeline(
        cfg,
        &[Stage::QatFinetune, Stage::Quantize, Stage::Evaluate],
    )?;
    let record = result.record;
    let final_dev = record
        .kurtosis_snapshots
        .last()
        .map(|s| s.report.mean_abs_deviation(cfg.train.kure_target))
        .unwrap_or(0.0);
    Ok(ArmRecord {
        name: String::from(name),
        fp32_accuracy: record.final_fp32_accuracy.unwrap_or(0.0),
        int8_accuracy: record.final_int8_accuracy.unwrap_or(0.0),
        final_kurtosis_deviation: final_dev,
        record,
    })
}

/// Runs both arms from identical initializations and budgets; only the
/// regularizer differs (the baseline arm sets lambda to 0).
pub fn ab_experiment(cfg: &ExperimentConfig) -> Result<AbRecord> {
    let kure_arm = arm("qat_selective_kure", cfg)?;
    let mut plain_cfg = cfg.clone();
    plain_cfg.train.lambda = 0.0;
    let baseline_arm = arm("qat_no_kure", &plain_cfg)?;
    let int8_gap = kure_arm.int8_accuracy - baseline_arm.int8_accuracy;
    Ok(AbRecord {
        kure_arm,
        baseline_arm,
        int8_gap,
    })
}
