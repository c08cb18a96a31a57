//! Loss assembly, gradient steps, pretraining and the four prune/fine-tune
//! pipelines.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CloneTask, Corpus, Example};
use crate::error::{Error, Result};
use crate::gates::{
    expected_nonzero_on_tape, gate_on_tape, gate_polarization, mask_l1_on_tape, mask_l1_values, mean_gate, mix,
    step_uniform, Penalty,
};
use crate::model::{forward_on_tape, ForwardOutput, ForwardVars, Gating, Model};
use crate::optim::{Optimizer, OptimizerKind};
use crate::par;
use crate::plan::{sparsity_of, surviving_params, BinaryMasks, GateSet, PrunePlan};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr_weights: f64,
    pub lr_gates: f64,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    /// Batch size for stages that learn masks on the pretraining corpus.
    pub prune_pretrain_batch: usize,
    pub min_stage_steps: usize,
    pub max_stage_steps: usize,
    pub eval_every: usize,
    /// A stage stops once its monitored loss improved by less than
    /// `min_improvement` (relative) over this many steps.
    pub plateau_window: usize,
    pub min_improvement: f64,
    /// End each stage at the evaluated state with the best monitored loss.
    pub restore_best: bool,
    /// Global multiplier on the density term.
    pub reg_weight: f64,
    /// Freeze model weights in stages that only learn masks.
    pub freeze_weights_when_pruning: bool,
    pub aux_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr_weights: 1e-3,
            lr_gates: 1e-2,
            pretrain_steps: 3000,
            pretrain_batch: 16,
            prune_pretrain_batch: 16,
            min_stage_steps: 500,
            max_stage_steps: 2000,
            eval_every: 50,
            plateau_window: 200,
            min_improvement: 0.01,
            restore_best: true,
            reg_weight: 1.0,
            freeze_weights_when_pruning: true,
            aux_weight: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr_weights >= 0.0 && self.lr_gates >= 0.0) {
            return bad("learning rates must be nonnegative");
        }
        if self.pretrain_batch == 0 || self.prune_pretrain_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if self.eval_every == 0 || self.plateau_window == 0 || self.plateau_window % self.eval_every != 0 {
            return bad("plateau_window must be a positive multiple of eval_every");
        }
        if self.min_stage_steps > self.max_stage_steps {
            return bad("min_stage_steps exceeds max_stage_steps");
        }
        if !(self.reg_weight >= 0.0 && self.aux_weight >= 0.0) {
            return bad("loss weights must be nonnegative");
        }
        Ok(())
    }

    /// Caps every stage at `steps` steps.
    pub fn with_stage_steps(mut self, steps: usize) -> Self {
        self.max_stage_steps = steps;
        self.min_stage_steps = self.min_stage_steps.min(steps);
        self
    }
}

/// Terms of the training objective `L_TTS + w · L_reg / λ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_tts: f64,
    pub l_reg: f64,
    pub lambda: f64,
    pub reg_weight: f64,
    pub l_total: f64,
    pub density: f64,
}

impl LossBreakdown {
    pub fn new(l_tts: f64, l_reg: f64, lambda: f64, reg_weight: f64) -> Self {
        Self {
            l_tts,
            l_reg,
            lambda,
            reg_weight,
            l_total: l_tts + reg_weight * l_reg / lambda,
            density: l_reg / lambda,
        }
    }
}

/// How the forward pass is gated.
#[derive(Clone, Debug, PartialEq)]
pub enum Masking {
    /// Ungated forward (every gate fixed at one).
    None,
    /// Sampled hard-concrete gates.
    Learned,
    /// Constant binary masks.
    Frozen(BinaryMasks),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Plain,
    Learned,
    FrozenBinary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageData {
    /// The clone task's support set, used whole every step.
    Support,
    /// Minibatches from the pretraining corpus.
    Pretrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub label: String,
    pub data: StageData,
    pub masks: MaskMode,
    pub train_weights: bool,
    pub train_gates: bool,
    pub regularize: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    Joint,
    FtThenPrune,
    PruneThenFt,
    PrunePretrainThenFt,
}

impl PipelineKind {
    pub const ALL: [PipelineKind; 4] = [
        PipelineKind::Joint,
        PipelineKind::FtThenPrune,
        PipelineKind::PruneThenFt,
        PipelineKind::PrunePretrainThenFt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PipelineKind::Joint => "joint",
            PipelineKind::FtThenPrune => "ft_then_prune",
            PipelineKind::PruneThenFt => "prune_then_ft",
            PipelineKind::PrunePretrainThenFt => "prune_pretrain_then_ft",
        }
    }
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PipelineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::Pipeline(format!("unknown pipeline `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub kind: PipelineKind,
    pub stages: Vec<StageSpec>,
}

impl PipelineSpec {
    pub fn new(kind: PipelineKind, cfg: &TrainConfig) -> Self {
        let train_weights = !cfg.freeze_weights_when_pruning;
        let stage = |label: &str, data, masks, train_weights, regularize| StageSpec {
            label: label.to_string(),
            data,
            masks,
            train_weights,
            train_gates: masks == MaskMode::Learned,
            regularize,
        };
        use MaskMode::*;
        use StageData::*;
        let stages = match kind {
            PipelineKind::Joint => vec![stage("joint", Support, Learned, true, true)],
            PipelineKind::FtThenPrune => vec![
                stage("ft", Support, Plain, true, false),
                stage("prune", Support, Learned, train_weights, true),
            ],
            PipelineKind::PruneThenFt => vec![
                stage("prune", Support, Learned, train_weights, true),
                stage("ft", Support, FrozenBinary, true, false),
            ],
            PipelineKind::PrunePretrainThenFt => vec![
                stage("prune_pretrain", Pretrain, Learned, train_weights, true),
                stage("ft", Support, FrozenBinary, true, false),
            ],
        };
        Self { kind, stages }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Pipeline("pipeline has no stages".into()));
        }
        let mut learned = false;
        for s in &self.stages {
            if s.masks == MaskMode::FrozenBinary && !learned {
                return Err(Error::Pipeline(format!(
                    "stage `{}` freezes binary masks before any stage learned them",
                    s.label
                )));
            }
            if (s.train_gates || s.regularize) && s.masks != MaskMode::Learned {
                return Err(Error::Pipeline(format!(
                    "stage `{}` trains or regularizes gates without learned masks",
                    s.label
                )));
            }
            learned |= s.masks == MaskMode::Learned;
        }
        Ok(())
    }
}

/// Everything a gradient step reads and writes.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model<f32>,
    pub plan: PrunePlan,
    pub gates: GateSet<f32>,
    pub masking: Masking,
    /// Global step counter; seeds the gate noise.
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: Model<f32>, plan: PrunePlan, gates: GateSet<f32>, seed: u64) -> Self {
        Self {
            model,
            plan,
            gates,
            masking: Masking::None,
            step: 0,
            seed,
        }
    }

    /// Binary masks currently in effect for inference.
    pub fn binary_masks(&self) -> BinaryMasks {
        match &self.masking {
            Masking::None => BinaryMasks::all_kept(&self.plan),
            Masking::Learned => self.gates.binarize(&self.plan),
            Masking::Frozen(m) => m.clone(),
        }
    }

    /// Noise-free gate vectors.
    pub fn mean_gates(&self) -> Vec<Option<Tensor<f32>>> {
        self.gates.gates.iter().map(|g| g.as_ref().map(mean_gate)).collect()
    }

    fn step_noise(&self) -> Vec<Option<Vec<f64>>> {
        self.plan
            .dims
            .iter()
            .map(|d| d.enabled.then(|| step_uniform(self.seed, self.step, &d.name, d.extent)))
            .collect()
    }
}

/// What a step may update.
#[derive(Clone, Copy, Debug)]
pub struct StepOptions {
    pub train_weights: bool,
    pub train_gates: bool,
    pub regularize: bool,
    /// Speaker row that trains even when weights are frozen.
    pub speaker_row: Option<usize>,
}

/// `mse(mel_before) + mse(mel_after) + aux_weight · mse(aux)` on the tape.
pub fn tts_loss_on_tape<T: Real>(tape: &mut Tape<T>, out: ForwardVars, ex: &Example, aux_weight: f64) -> Result<Var> {
    let mel = ex.mel_as::<T>();
    let a = tape.mse(out.mel_before, &mel)?;
    let b = tape.mse(out.mel_after, &mel)?;
    let c = tape.mse(out.aux, &ex.aux_as())?;
    let c = tape.scale(c, T::lit(aux_weight));
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

fn mse_f64<T: Real>(a: &Tensor<T>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

/// TTS loss of already computed outputs.
pub fn tts_loss<T: Real>(out: &ForwardOutput<T>, ex: &Example, aux_weight: f64) -> f64 {
    mse_f64(&out.mel_before, &ex.mel) + mse_f64(&out.mel_after, &ex.mel) + aux_weight * mse_f64(&out.aux, &ex.aux)
}

/// Mean TTS loss over `examples`, optionally under fixed gate vectors.
pub fn eval_loss<T: Real>(
    model: &Model<T>,
    plan: &PrunePlan,
    z: Option<&[Option<Tensor<T>>]>,
    examples: &[Example],
    aux_weight: f64,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let losses = par::map_ordered(examples, |ex| {
        let out = match z {
            Some(z) => model.forward_masked(plan, z, &ex.tokens, ex.speaker)?,
            None => model.forward(&ex.tokens, ex.speaker)?,
        };
        Ok(tts_loss(&out, ex, aux_weight))
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / examples.len() as f64)
}

struct ExampleGrads {
    loss: f64,
    weights: Vec<Tensor<f32>>,
    gates: Vec<Tensor<f32>>,
}

fn example_grads(
    state: &TrainState,
    noise: &[Option<Vec<f64>>],
    names: &[String],
    opts: StepOptions,
    ex: &Example,
    aux_weight: f64,
) -> Result<ExampleGrads> {
    let mut tape = Tape::new();
    let vars = state.model.register(&mut tape, |n| names.iter().any(|m| m == n));
    let mut gate_vars = Vec::new();
    let z: Option<Vec<Option<Var>>> = match &state.masking {
        Masking::None => None,
        Masking::Learned => {
            let mut z = Vec::with_capacity(state.plan.dims.len());
            for (g, u) in state.gates.gates.iter().zip(noise) {
                z.push(match (g, u) {
                    (Some(g), Some(u)) => {
                        let la = if opts.train_gates {
                            let v = tape.param(g.log_alpha.clone());
                            gate_vars.push(v);
                            v
                        } else {
                            tape.constant(g.log_alpha.clone())
                        };
                        Some(gate_on_tape(&mut tape, la, u, &g.config)?)
                    }
                    _ => None,
                });
            }
            Some(z)
        }
        Masking::Frozen(m) => Some(state.plan.gate_constants(&mut tape, &m.z())?),
    };
    let gating = z.as_deref().map(|z| Gating { plan: &state.plan, z });
    let out = forward_on_tape(&mut tape, &state.model.config, &vars, gating, &ex.tokens, ex.speaker)?;
    let loss = tts_loss_on_tape(&mut tape, out, ex, aux_weight)?;
    let mut wrt: Vec<Var> = names.iter().map(|n| vars.get(n)).collect::<Result<_>>()?;
    wrt.extend(&gate_vars);
    let mut grads = tape.grad(loss, &wrt)?;
    let gates = grads.split_off(names.len());
    Ok(ExampleGrads {
        loss: tape.scalar(loss).as_f64(),
        weights: grads,
        gates,
    })
}

/// Regularizer value and its gradient per enabled gate.
fn reg_grads(state: &TrainState, noise: &[Option<Vec<f64>>], need_grad: bool) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut tape = Tape::new();
    let mut params = Vec::new();
    let mut z = Vec::with_capacity(state.plan.dims.len());
    for (g, u) in state.gates.gates.iter().zip(noise) {
        z.push(match (g, u) {
            (Some(g), Some(u)) => {
                let la = if need_grad {
                    tape.param(g.log_alpha.clone())
                } else {
                    tape.constant(g.log_alpha.clone())
                };
                params.push(la);
                Some(match g.config.penalty {
                    Penalty::Sampled => gate_on_tape(&mut tape, la, u, &g.config)?,
                    Penalty::Expected => expected_nonzero_on_tape(&mut tape, la, &g.config)?,
                })
            }
            _ => None,
        });
    }
    let l1 = mask_l1_on_tape(&mut tape, &state.plan, &z)?;
    let value = tape.scalar(l1).as_f64();
    let grads = if need_grad { tape.grad(l1, &params)? } else { Vec::new() };
    Ok((value, grads))
}

fn trainable_names(model: &Model<f32>, opts: StepOptions) -> Vec<String> {
    model
        .params
        .keys()
        .filter(|k| opts.train_weights || (opts.speaker_row.is_some() && k.as_str() == "spk_emb"))
        .cloned()
        .collect()
}

/// One optimizer step on `batch`. Gate noise is drawn from
/// `(state.seed, state.step, dimension name)`, then the step counter advances.
pub fn train_step(
    state: &mut TrainState,
    opt: &mut Optimizer<f32>,
    batch: &[&Example],
    opts: StepOptions,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let learned = state.masking == Masking::Learned;
    let opts = StepOptions {
        train_gates: opts.train_gates && learned,
        regularize: opts.regularize && learned,
        ..opts
    };
    let noise = state.step_noise();
    let names = trainable_names(&state.model, opts);
    let per_example = {
        let st = &*state;
        let names = &names;
        let noise = &noise;
        par::map_ordered(batch, |ex| example_grads(st, noise, names, opts, ex, cfg.aux_weight))
    };

    let inv_b = 1.0 / batch.len() as f64;
    let mut l_tts = 0.0;
    let mut weight_grads: Option<Vec<Tensor<f32>>> = None;
    let mut gate_grads: Option<Vec<Tensor<f32>>> = None;
    let accumulate = |acc: &mut Option<Vec<Tensor<f32>>>, g: Vec<Tensor<f32>>| match acc {
        None => *acc = Some(g),
        Some(acc) => {
            for (a, g) in acc.iter_mut().zip(g) {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += *y;
                }
            }
        }
    };
    for r in per_example {
        let r = r?;
        l_tts += r.loss;
        accumulate(&mut weight_grads, r.weights);
        accumulate(&mut gate_grads, r.gates);
    }
    l_tts *= inv_b;

    let lambda = state.plan.lambda as f64;
    let (l_reg, reg) = if opts.regularize {
        reg_grads(state, &noise, opts.train_gates)?
    } else {
        (0.0, Vec::new())
    };
    let breakdown = LossBreakdown::new(l_tts, l_reg, lambda, cfg.reg_weight);
    if !breakdown.l_total.is_finite() {
        return Err(Error::NumericFailure {
            step: state.step as usize,
            detail: format!("{breakdown:?}"),
        });
    }

    let scale = inv_b as f32;
    if let Some(grads) = weight_grads {
        for (name, mut g) in names.iter().zip(grads) {
            g = g.map(|v| v * scale);
            if name == "spk_emb" && !opts.train_weights {
                let row = opts.speaker_row.expect("speaker row selected");
                let d = g.shape()[1];
                for (i, v) in g.data_mut().iter_mut().enumerate() {
                    if i / d != row {
                        *v = 0.0;
                    }
                }
            }
            let p = state.model.params.get_mut(name).expect("registered parameter");
            opt.update(name, p, &g, cfg.lr_weights);
        }
    }
    if opts.train_gates {
        let mut grads = gate_grads.unwrap_or_default().into_iter();
        let mut reg = reg.into_iter();
        let reg_scale = (cfg.reg_weight / lambda) as f32;
        for g in state.gates.gates.iter_mut().flatten() {
            let mut grad = grads.next().expect("gate gradient").map(|v| v * scale);
            if let Some(r) = reg.next() {
                for (x, y) in grad.data_mut().iter_mut().zip(r.data()) {
                    *x += reg_scale * *y;
                }
            }
            opt.update(&format!("gate:{}", g.name), &mut g.log_alpha, &grad, cfg.lr_gates);
        }
    }
    state.step += 1;
    Ok(breakdown)
}

/// Objective on `batch` with this step's gate noise, without updating.
pub fn total_loss(state: &TrainState, batch: &[&Example], reg_enabled: bool, cfg: &TrainConfig) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let noise = state.step_noise();
    let opts = StepOptions {
        train_weights: false,
        train_gates: false,
        regularize: reg_enabled,
        speaker_row: None,
    };
    let losses = par::map_ordered(batch, |ex| example_grads(state, &noise, &[], opts, ex, cfg.aux_weight));
    let mut l_tts = 0.0;
    for l in losses {
        l_tts += l?.loss;
    }
    l_tts /= batch.len() as f64;
    let l_reg = if reg_enabled { reg_grads(state, &noise, false)?.0 } else { 0.0 };
    Ok(LossBreakdown::new(l_tts, l_reg, state.plan.lambda as f64, cfg.reg_weight))
}

/// Per-step log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub pipeline: String,
    pub stage: usize,
    pub label: String,
    pub step: usize,
    pub l_tts: f64,
    pub l_reg: f64,
    pub lambda: f64,
    pub density: f64,
    pub l_total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sparsity_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub polarization: Option<f64>,
}

impl StepRecord {
    fn new(pipeline: &str, stage: usize, label: &str, step: usize, b: &LossBreakdown) -> Self {
        Self {
            pipeline: pipeline.to_string(),
            stage,
            label: label.to_string(),
            step,
            l_tts: b.l_tts,
            l_reg: b.l_reg,
            lambda: b.lambda,
            density: b.density,
            l_total: b.l_total,
            eval_loss: None,
            sparsity_pct: None,
            polarization: None,
        }
    }
}

/// Summary emitted at the end of each stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub pipeline: String,
    pub stage: usize,
    pub label: String,
    pub seed: u64,
    pub steps: usize,
    /// TTS loss on the clone task's held-out items under binary masks.
    pub eval_loss: f64,
    pub sparsity_pct: f64,
    pub params_before: usize,
    pub params_after: usize,
    pub ratio: f64,
    /// Noise-free regularizer over λ.
    pub density: f64,
    /// Fraction of gate probabilities in (0.05, 0.95); absent when no gate
    /// was learned yet.
    pub polarization: Option<f64>,
    /// Dimensions that kept one index only by the keep-at-least-one rule.
    pub forced: Vec<String>,
}

fn sample_batch<'a>(pool: &'a [Example], size: usize, seed: u64, step: u64, tag: &str) -> Vec<&'a Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, step, tag));
    rand::seq::index::sample(&mut rng, pool.len(), size.min(pool.len()))
        .into_iter()
        .map(|i| &pool[i])
        .collect()
}

/// Trains a fresh ungated model on the pretraining corpus.
pub fn pretrain(
    model: Model<f32>,
    plan: PrunePlan,
    gates: GateSet<f32>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    seed: u64,
    mut log: impl FnMut(&StepRecord),
) -> Result<Model<f32>> {
    cfg.validate()?;
    let mut state = TrainState::new(model, plan, gates, seed);
    let mut opt = Optimizer::new(cfg.optimizer);
    let opts = StepOptions {
        train_weights: true,
        train_gates: false,
        regularize: false,
        speaker_row: None,
    };
    for step in 1..=cfg.pretrain_steps {
        let batch = sample_batch(&corpus.train, cfg.pretrain_batch, seed, step as u64, "pretrain.batch");
        let b = train_step(&mut state, &mut opt, &batch, opts, cfg)?;
        let mut rec = StepRecord::new("pretrain", 0, "pretrain", step, &b);
        if step % cfg.eval_every == 0 || step == cfg.pretrain_steps {
            rec.eval_loss = Some(eval_loss(&state.model, &state.plan, None, &corpus.eval, cfg.aux_weight)?);
        }
        log(&rec);
    }
    Ok(state.model)
}

/// Copy of `base` whose speaker row `slot` is the mean of all rows before it.
pub fn init_clone_speaker(base: &Model<f32>, slot: usize) -> Result<Model<f32>> {
    let mut model = base.clone();
    let n = model.config.n_speakers;
    if slot == 0 || slot >= n {
        return Err(Error::UnknownSpeaker { id: slot, count: n });
    }
    let d = model.config.d;
    let table = model.params.get_mut("spk_emb").expect("speaker table");
    let data = table.data_mut();
    for j in 0..d {
        let mean = (0..slot).map(|r| data[r * d + j] as f64).sum::<f64>() / slot as f64;
        data[slot * d + j] = mean as f32;
    }
    Ok(model)
}

/// Result of a pipeline run.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub state: TrainState,
    pub stages: Vec<StageReport>,
}

fn monitor(state: &TrainState, stage: &StageSpec, eval: &[Example], cfg: &TrainConfig) -> Result<f64> {
    match &state.masking {
        Masking::None => eval_loss(&state.model, &state.plan, None, eval, cfg.aux_weight),
        Masking::Frozen(m) => eval_loss(&state.model, &state.plan, Some(&m.z()), eval, cfg.aux_weight),
        Masking::Learned => {
            let z = state.mean_gates();
            let l = eval_loss(&state.model, &state.plan, Some(&z), eval, cfg.aux_weight)?;
            if stage.regularize {
                let density = mask_l1_values(&state.plan, &z)? as f64 / state.plan.lambda as f64;
                Ok(l + cfg.reg_weight * density)
            } else {
                Ok(l)
            }
        }
    }
}

/// Evaluates the state the way a stage report does.
pub fn stage_report(
    state: &TrainState,
    task: &CloneTask,
    cfg: &TrainConfig,
    header: (&str, usize, &str),
    steps: usize,
    gates_learned: bool,
) -> Result<StageReport> {
    let masks = state.binary_masks();
    let z = masks.z::<f32>();
    let eval = match state.masking {
        Masking::None => eval_loss(&state.model, &state.plan, None, &task.eval, cfg.aux_weight)?,
        _ => eval_loss(&state.model, &state.plan, Some(&z), &task.eval, cfg.aux_weight)?,
    };
    let lambda = state.plan.lambda;
    let density_z = match state.masking {
        Masking::Learned => state.mean_gates(),
        _ => z,
    };
    let density = mask_l1_values(&state.plan, &density_z)? as f64 / lambda as f64;
    let after = surviving_params(&state.plan, &masks);
    let polarization = if gates_learned && state.gates.iter().next().is_some() {
        Some(gate_polarization(state.gates.iter())?)
    } else {
        None
    };
    Ok(StageReport {
        pipeline: header.0.to_string(),
        stage: header.1,
        label: header.2.to_string(),
        seed: state.seed,
        steps,
        eval_loss: eval,
        sparsity_pct: sparsity_of(&state.plan, &masks),
        params_before: lambda,
        params_after: after,
        ratio: lambda as f64 / after as f64,
        density,
        polarization,
        forced: masks.forced,
    })
}

/// Runs every stage of `spec` starting from `base` (whose speaker row
/// `task.speaker` is re-initialized), logging each step.
#[allow(clippy::too_many_arguments)]
pub fn run_pipeline(
    spec: &PipelineSpec,
    base: &Model<f32>,
    plan: PrunePlan,
    gates: GateSet<f32>,
    pretrain_corpus: &Corpus,
    task: &CloneTask,
    cfg: &TrainConfig,
    seed: u64,
    mut log: impl FnMut(&StepRecord),
) -> Result<PipelineOutput> {
    spec.validate()?;
    cfg.validate()?;
    let model = init_clone_speaker(base, task.speaker)?;
    let mut state = TrainState::new(model, plan, gates, seed);
    let mut reports = Vec::with_capacity(spec.stages.len());
    let pipeline = spec.kind.name();
    let mut gates_learned = false;
    for (si, stage) in spec.stages.iter().enumerate() {
        let stage_no = si + 1;
        state.masking = match stage.masks {
            MaskMode::Plain => Masking::None,
            MaskMode::Learned => Masking::Learned,
            MaskMode::FrozenBinary => Masking::Frozen(state.gates.binarize(&state.plan)),
        };
        gates_learned |= stage.train_gates;
        let opts = StepOptions {
            train_weights: stage.train_weights,
            train_gates: stage.train_gates,
            regularize: stage.regularize,
            speaker_row: Some(task.speaker),
        };
        let (pool, eval, batch_size): (&[Example], &[Example], usize) = match stage.data {
            StageData::Support => (&task.support, &task.eval, task.support.len()),
            StageData::Pretrain => (&pretrain_corpus.train, &pretrain_corpus.eval, cfg.prune_pretrain_batch),
        };
        let mut opt = Optimizer::new(cfg.optimizer);
        let mut history: Vec<(usize, f64)> = Vec::new();
        let mut best: Option<(f64, Model<f32>, GateSet<f32>)> = None;
        let mut steps = 0;
        for step in 1..=cfg.max_stage_steps {
            let batch = match stage.data {
                StageData::Support => pool.iter().collect(),
                StageData::Pretrain => sample_batch(pool, batch_size, seed, state.step, "stage.batch"),
            };
            let b = train_step(&mut state, &mut opt, &batch, opts, cfg)?;
            steps = step;
            let mut rec = StepRecord::new(pipeline, stage_no, &stage.label, step, &b);
            let mut stop = false;
            if step % cfg.eval_every == 0 {
                let m = monitor(&state, stage, eval, cfg)?;
                rec.eval_loss = Some(m);
                rec.sparsity_pct = Some(sparsity_of(&state.plan, &state.binary_masks()));
                if state.masking == Masking::Learned && state.gates.iter().next().is_some() {
                    rec.polarization = Some(gate_polarization(state.gates.iter())?);
                }
                history.push((step, m));
                if cfg.restore_best && best.as_ref().map_or(true, |(b, _, _)| m < *b) {
                    best = Some((m, state.model.clone(), state.gates.clone()));
                }
                if step >= cfg.min_stage_steps && step >= cfg.plateau_window {
                    if let Some(&(_, old)) = history.iter().find(|(s, _)| *s == step - cfg.plateau_window) {
                        let gain = (old - m) / old.abs().max(1e-12);
                        stop = gain < cfg.min_improvement;
                    }
                }
            }
            log(&rec);
            if stop {
                break;
            }
        }
        if let Some((_, model, gates)) = best {
            state.model = model;
            state.gates = gates;
        }
        reports.push(stage_report(
            &state,
            task,
            cfg,
            (pipeline, stage_no, &stage.label),
            steps,
            gates_learned,
        )?);
    }
    Ok(PipelineOutput { state, stages: reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_clone_task, make_synthetic_corpus, CorpusConfig, DataShape};
    use crate::gates::GateConfig;
    use crate::model::ModelSpec;
    use crate::plan::{build_plan, PlanOptions};

    fn setup() -> (TrainState, Corpus, CloneTask) {
        let spec = ModelSpec {
            vocab_size: 12,
            d: 8,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 2,
            d_k: 8,
            d_f: 8,
            adaptor_hidden: 4,
            postnet_hidden: 4,
            n_mel: 4,
            n_speakers: 3,
            ..ModelSpec::default()
        };
        let config = spec.build().unwrap();
        let plan = build_plan(&config, PlanOptions::default()).unwrap();
        let gates = GateSet::new(&plan, &GateConfig::default()).unwrap();
        let model = Model::init(config, 1).unwrap();
        let shape = DataShape {
            vocab_size: 12,
            n_mel: 4,
        };
        let corpus_cfg = CorpusConfig {
            pretrain_speakers: 2,
            samples_per_speaker: 4,
            eval_per_speaker: 2,
            min_len: 3,
            max_len: 6,
            support_size: 3,
            eval_size: 3,
            ..CorpusConfig::default()
        };
        let corpus = make_synthetic_corpus(0, shape, &corpus_cfg).unwrap();
        let task = make_clone_task(0, 5, 2, shape, &corpus_cfg).unwrap();
        (TrainState::new(model, plan, gates, 9), corpus, task)
    }

    fn all(opts_reg: bool) -> StepOptions {
        StepOptions {
            train_weights: true,
            train_gates: true,
            regularize: opts_reg,
            speaker_row: None,
        }
    }

    #[test]
    fn breakdown_arithmetic() {
        let b = LossBreakdown::new(1.5, 250.0, 1000.0, 1.0);
        assert!((b.l_total - b.l_tts - 0.25).abs() < 1e-12);
        assert_eq!(b.density, 0.25);
    }

    #[test]
    fn disabled_regularizer_leaves_tts_loss() {
        let (mut state, _, task) = setup();
        state.masking = Masking::Learned;
        let batch: Vec<_> = task.support.iter().collect();
        let b = total_loss(&state, &batch, false, &TrainConfig::default()).unwrap();
        assert_eq!(b.l_total, b.l_tts);
        assert_eq!(b.l_reg, 0.0);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let (mut state, _, _) = setup();
        let mut opt = Optimizer::adam();
        let r = train_step(&mut state, &mut opt, &[], all(false), &TrainConfig::default());
        assert!(matches!(r, Err(Error::EmptyBatch)));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut state, _, task) = setup();
        state.masking = Masking::Learned;
        let before = (state.model.clone(), state.gates.clone());
        let cfg = TrainConfig {
            lr_weights: 0.0,
            lr_gates: 0.0,
            ..TrainConfig::default()
        };
        let batch: Vec<_> = task.support.iter().collect();
        let b = train_step(&mut state, &mut Optimizer::adam(), &batch, all(true), &cfg).unwrap();
        assert!(b.l_tts > 0.0 && b.l_reg > 0.0);
        assert_eq!(state.model, before.0);
        assert_eq!(state.gates, before.1);
    }

    #[test]
    fn steps_are_reproducible() {
        let run = || {
            let (mut state, _, task) = setup();
            state.masking = Masking::Learned;
            let batch: Vec<_> = task.support.iter().collect();
            let mut opt = Optimizer::adam();
            let mut out = Vec::new();
            for _ in 0..5 {
                out.push(train_step(&mut state, &mut opt, &batch, all(true), &TrainConfig::default()).unwrap());
            }
            (state.model, state.gates, out)
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn frozen_speaker_training_moves_only_its_row() {
        let (mut state, _, task) = setup();
        let before = state.model.clone();
        let batch: Vec<_> = task.support.iter().collect();
        let opts = StepOptions {
            train_weights: false,
            train_gates: false,
            regularize: false,
            speaker_row: Some(2),
        };
        train_step(&mut state, &mut Optimizer::adam(), &batch, opts, &TrainConfig::default()).unwrap();
        for (name, t) in &state.model.params {
            let old = &before.params[name];
            if name == "spk_emb" {
                let d = t.shape()[1];
                assert_eq!(t.data()[..2 * d], old.data()[..2 * d]);
                assert_ne!(t.data()[2 * d..], old.data()[2 * d..]);
            } else {
                assert_eq!(t, old, "{name}");
            }
        }
    }

    #[test]
    fn pipeline_names_round_trip() {
        for k in PipelineKind::ALL {
            assert_eq!(k.name().parse::<PipelineKind>().unwrap(), k);
        }
        let err = "both".parse::<PipelineKind>().unwrap_err().to_string();
        for k in PipelineKind::ALL {
            assert!(err.contains(k.name()));
        }
    }

    #[test]
    fn invalid_stage_order_is_rejected() {
        let cfg = TrainConfig::default();
        let mut spec = PipelineSpec::new(PipelineKind::PruneThenFt, &cfg);
        spec.stages.reverse();
        assert!(matches!(spec.validate(), Err(Error::Pipeline(_))));
        for k in PipelineKind::ALL {
            PipelineSpec::new(k, &cfg).validate().unwrap();
        }
    }

    #[test]
    fn clone_speaker_starts_at_mean_row() {
        let (state, _, _) = setup();
        let m = init_clone_speaker(&state.model, 2).unwrap();
        let t = &m.params["spk_emb"];
        let d = t.shape()[1];
        for j in 0..d {
            let mean = (t.data()[j] + t.data()[d + j]) / 2.0;
            assert!((t.data()[2 * d + j] - mean).abs() < 1e-6);
        }
        assert!(init_clone_speaker(&state.model, 3).is_err());
    }

    #[test]
    fn short_pipelines_have_table_shape() {
        let (state, corpus, task) = setup();
        let cfg = TrainConfig::default().with_stage_steps(20);
        let run = |kind| {
            let spec = PipelineSpec::new(kind, &cfg);
            run_pipeline(
                &spec,
                &state.model,
                state.plan.clone(),
                state.gates.clone(),
                &corpus,
                &task,
                &cfg,
                3,
                |_| {},
            )
            .unwrap()
        };
        let ftp = run(PipelineKind::FtThenPrune);
        assert_eq!(ftp.stages.len(), 2);
        assert_eq!(ftp.stages[0].sparsity_pct, 0.0);
        assert_eq!(ftp.stages[0].polarization, None);
        let ptf = run(PipelineKind::PruneThenFt);
        assert_eq!(ptf.stages[0].sparsity_pct, ptf.stages[1].sparsity_pct);
        let joint = run(PipelineKind::Joint);
        assert_eq!(joint.stages.len(), 1);
        assert_eq!(joint.stages[0].label, "joint");
    }

    #[test]
    fn no_pressure_means_no_pruning() {
        let (state, corpus, task) = setup();
        let cfg = TrainConfig {
            reg_weight: 0.0,
            ..TrainConfig::default().with_stage_steps(50)
        };
        let spec = PipelineSpec::new(PipelineKind::Joint, &cfg);
        let out = run_pipeline(&spec, &state.model, state.plan, state.gates, &corpus, &task, &cfg, 1, |_| {}).unwrap();
        assert_eq!(out.stages[0].sparsity_pct, 0.0);
    }

    #[test]
    fn frozen_masks_give_pruned_weights_zero_gradient() {
        let (mut state, _, task) = setup();
        let f = state.plan.dim_by_name("enc.0.ffn_df").unwrap();
        let mut masks = BinaryMasks::all_kept(&state.plan);
        masks.keep[f].as_mut().unwrap()[1] = false;
        state.masking = Masking::Frozen(masks);
        let names = vec!["enc.0.ffn.wu".to_string(), "enc.0.ffn.bu".to_string()];
        let opts = StepOptions {
            train_weights: true,
            train_gates: false,
            regularize: false,
            speaker_row: None,
        };
        let noise = state.step_noise();
        let g = example_grads(&state, &noise, &names, opts, &task.support[0], 0.1).unwrap();
        let (wu, bu) = (&g.weights[0], &g.weights[1]);
        assert_eq!(bu.data()[1], 0.0);
        let cols = wu.shape()[1];
        for r in 0..wu.shape()[0] {
            assert_eq!(wu.data()[r * cols + 1], 0.0);
        }
        assert!(wu.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn plain_gradient_descent_matches_closed_form() {
        // loss = mean((x·w − y)²) for a single linear map, one step
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.0]]).unwrap();
        let y = Tensor::from_rows(&[&[1.0], &[0.0], &[2.0]]).unwrap();
        let mut w = Tensor::from_rows(&[&[0.3], &[-0.2]]).unwrap();
        let mut tape = Tape::<f64>::new();
        let wv = tape.param(w.clone());
        let xv = tape.constant(x.clone());
        let p = tape.matmul(xv, wv).unwrap();
        let loss = tape.mse(p, &y).unwrap();
        let g = tape.grad(loss, &[wv]).unwrap().remove(0);
        Optimizer::sgd().update("w", &mut w, &g, 0.1);

        let mut expected = [0.3, -0.2];
        let r: Vec<f64> = (0..3)
            .map(|i| x.at2(i, 0) * 0.3 + x.at2(i, 1) * -0.2 - y.at2(i, 0))
            .collect();
        for (j, e) in expected.iter_mut().enumerate() {
            let grad: f64 = (0..3).map(|i| 2.0 / 3.0 * x.at2(i, j) * r[i]).sum();
            *e -= 0.1 * grad;
        }
        assert!((w.data()[0] - expected[0]).abs() < 1e-12);
        assert!((w.data()[1] - expected[1]).abs() < 1e-12);
    }
}
