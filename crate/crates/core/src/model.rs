//! A small FastSpeech-2-style acoustic model: token + speaker embeddings with
//! sinusoidal positions, post-norm Transformer encoder and decoder stacks, a
//! convolutional variance adaptor predicting one auxiliary value per
//! position, a linear mel head and a residual convolutional post-net.
//!
//! The parameter layout is declared once in [`param_layout`]; both parameter
//! initialization and the prune plan are derived from it.

use std::fmt;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plan::PrunePlan;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Flat, user-facing model hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub d: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_f: usize,
    pub adaptor_hidden: usize,
    pub adaptor_layers: usize,
    pub postnet_hidden: usize,
    pub kernel_size: usize,
    pub n_mel: usize,
    pub n_speakers: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            d: 32,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 2,
            d_k: 32,
            d_f: 64,
            adaptor_hidden: 32,
            adaptor_layers: 2,
            postnet_hidden: 32,
            kernel_size: 3,
            n_mel: 20,
            // 20 pretraining speakers plus one slot for the cloned speaker
            n_speakers: 21,
        }
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<ModelConfig> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d", self.d),
            ("n_heads", self.n_heads),
            ("d_k", self.d_k),
            ("d_f", self.d_f),
            ("adaptor_hidden", self.adaptor_hidden),
            ("adaptor_layers", self.adaptor_layers),
            ("postnet_hidden", self.postnet_hidden),
            ("kernel_size", self.kernel_size),
            ("n_mel", self.n_mel),
            ("n_speakers", self.n_speakers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::ModelConfig(format!("{name} must be at least 1")));
        }
        if self.d_k % self.n_heads != 0 {
            return Err(Error::ModelConfig(format!(
                "d_k = {} is not divisible by n_heads = {}",
                self.d_k, self.n_heads
            )));
        }
        let head_dim = self.d_k / self.n_heads;
        let block = BlockShape {
            head_dims: vec![head_dim; self.n_heads],
            d_f: self.d_f,
        };
        let config = ModelConfig {
            vocab_size: self.vocab_size,
            d: self.d,
            n_mel: self.n_mel,
            n_speakers: self.n_speakers,
            kernel_size: self.kernel_size,
            encoder: vec![block.clone(); self.n_enc_layers],
            decoder: vec![block; self.n_dec_layers],
            adaptor_hidden: vec![self.adaptor_hidden; self.adaptor_layers],
            postnet_hidden: vec![self.postnet_hidden],
            attn_scale_dim: head_dim,
            pos_channels: (0..self.d).collect(),
            pos_width: self.d,
            ln_eps: LAYER_NORM_EPS,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    /// Per-head attention width; may be empty after compaction.
    pub head_dims: Vec<usize>,
    pub d_f: usize,
}

/// Full architecture description, able to express the uneven extents a
/// compacted model ends up with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub n_mel: usize,
    pub n_speakers: usize,
    pub kernel_size: usize,
    pub encoder: Vec<BlockShape>,
    pub decoder: Vec<BlockShape>,
    pub adaptor_hidden: Vec<usize>,
    pub postnet_hidden: Vec<usize>,
    /// Head width that fixes the attention temperature `1/sqrt(width)`.
    /// Kept at the original value when heads are narrowed.
    pub attn_scale_dim: usize,
    /// Original channel index of each surviving model channel, so the
    /// sinusoidal positions of a narrowed model match the full one.
    pub pos_channels: Vec<usize>,
    /// Channel count of the unpruned model; sets the sinusoid frequencies.
    pub pos_width: usize,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let blocks = self.encoder.iter().chain(&self.decoder);
        let bad = self.vocab_size == 0
            || self.d == 0
            || self.n_mel == 0
            || self.n_speakers == 0
            || self.attn_scale_dim == 0
            || self.kernel_size % 2 == 0
            || self.adaptor_hidden.is_empty()
            || self.postnet_hidden.is_empty()
            || self.adaptor_hidden.iter().chain(&self.postnet_hidden).any(|&h| h == 0)
            || self.pos_channels.len() != self.d
            || self.pos_channels.iter().any(|&c| c >= self.pos_width)
            || !(self.ln_eps > 0.0);
        if bad {
            return Err(Error::ModelConfig(format!("inconsistent extents in {self:?}")));
        }
        for b in blocks {
            if b.d_f == 0 || b.head_dims.iter().any(|&h| h == 0) {
                return Err(Error::ModelConfig(format!("invalid block {b:?}")));
            }
        }
        Ok(())
    }

    pub fn stack(&self, stack: Stack) -> &[BlockShape] {
        match stack {
            Stack::Encoder => &self.encoder,
            Stack::Decoder => &self.decoder,
        }
    }

    pub fn param_count(&self) -> usize {
        param_layout(self).iter().map(|p| p.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stack {
    Encoder,
    Decoder,
}

impl Stack {
    pub fn prefix(self) -> &'static str {
        match self {
            Stack::Encoder => "enc",
            Stack::Decoder => "dec",
        }
    }
}

/// Identity of a prunable dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DimKey {
    ModelD,
    HeadCount(Stack, usize),
    HeadDk(Stack, usize, usize),
    FfnDf(Stack, usize),
    AdaptorHidden(usize),
    PostnetHidden(usize),
}

impl fmt::Display for DimKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DimKey::ModelD => write!(f, "model_d"),
            DimKey::HeadCount(s, l) => write!(f, "{}.{l}.head_count", s.prefix()),
            DimKey::HeadDk(s, l, h) => write!(f, "{}.{l}.h{h}.dk", s.prefix()),
            DimKey::FfnDf(s, l) => write!(f, "{}.{l}.ffn_df", s.prefix()),
            DimKey::AdaptorHidden(i) => write!(f, "adaptor.{i}.hidden"),
            DimKey::PostnetHidden(i) => write!(f, "postnet.{i}.hidden"),
        }
    }
}

/// Location of a per-head tensor, used to renumber heads after compaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadSlot {
    pub stack: Stack,
    pub layer: usize,
    pub head: usize,
    pub part: &'static str,
}

impl HeadSlot {
    pub fn name(&self) -> String {
        head_param_name(self.stack, self.layer, self.head, self.part)
    }
}

pub fn head_param_name(stack: Stack, layer: usize, head: usize, part: &str) -> String {
    format!("{}.{layer}.attn.h{head}.{part}", stack.prefix())
}

/// One parameter tensor and the dimension gating each of its axes.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub axes: Vec<Option<DimKey>>,
    /// Whole-head gate on this tensor's output path, if any.
    pub head: Option<HeadSlot>,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: Vec<usize>, axes: Vec<Option<DimKey>>) -> Self {
        Self {
            name: name.into(),
            shape,
            axes,
            head: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of every parameter tensor of `config`.
pub fn param_layout(config: &ModelConfig) -> Vec<ParamSpec> {
    use DimKey::*;
    let d = config.d;
    let k = config.kernel_size;
    let dd = Some(ModelD);
    let mut out = vec![
        ParamSpec::new("tok_emb", vec![config.vocab_size, d], vec![None, dd]),
        ParamSpec::new("spk_emb", vec![config.n_speakers, d], vec![None, dd]),
    ];
    let block_layout = |out: &mut Vec<ParamSpec>, stack: Stack| {
        for (l, block) in config.stack(stack).iter().enumerate() {
            let p = |s: &str| format!("{}.{l}.{s}", stack.prefix());
            for (h, &w) in block.head_dims.iter().enumerate() {
                let dk = Some(HeadDk(stack, l, h));
                let parts: [(&'static str, Vec<usize>, Vec<Option<DimKey>>); 7] = [
                    ("wq", vec![d, w], vec![dd, dk]),
                    ("bq", vec![w], vec![dk]),
                    ("wk", vec![d, w], vec![dd, dk]),
                    ("bk", vec![w], vec![dk]),
                    ("wv", vec![d, w], vec![dd, dk]),
                    ("bv", vec![w], vec![dk]),
                    ("wo", vec![w, d], vec![dk, dd]),
                ];
                for (part, shape, axes) in parts {
                    let slot = HeadSlot {
                        stack,
                        layer: l,
                        head: h,
                        part,
                    };
                    out.push(ParamSpec {
                        name: slot.name(),
                        shape,
                        axes,
                        head: Some(slot),
                    });
                }
            }
            let f = Some(FfnDf(stack, l));
            out.push(ParamSpec::new(p("attn.bo"), vec![d], vec![dd]));
            out.push(ParamSpec::new(p("ln1.scale"), vec![d], vec![dd]));
            out.push(ParamSpec::new(p("ln1.shift"), vec![d], vec![dd]));
            out.push(ParamSpec::new(p("ffn.wu"), vec![d, block.d_f], vec![dd, f]));
            out.push(ParamSpec::new(p("ffn.bu"), vec![block.d_f], vec![f]));
            out.push(ParamSpec::new(p("ffn.wd"), vec![block.d_f, d], vec![f, dd]));
            out.push(ParamSpec::new(p("ffn.bd"), vec![d], vec![dd]));
            out.push(ParamSpec::new(p("ln2.scale"), vec![d], vec![dd]));
            out.push(ParamSpec::new(p("ln2.shift"), vec![d], vec![dd]));
        }
    };
    block_layout(&mut out, Stack::Encoder);

    let mut prev = (d, dd);
    for (i, &h) in config.adaptor_hidden.iter().enumerate() {
        let a = Some(AdaptorHidden(i));
        out.push(ParamSpec::new(format!("adaptor.conv{i}.w"), vec![k, prev.0, h], vec![None, prev.1, a]));
        out.push(ParamSpec::new(format!("adaptor.conv{i}.b"), vec![h], vec![a]));
        prev = (h, a);
    }
    out.push(ParamSpec::new("adaptor.out.w", vec![prev.0, 1], vec![prev.1, None]));
    out.push(ParamSpec::new("adaptor.out.b", vec![1], vec![None]));
    out.push(ParamSpec::new("adaptor.proj.w", vec![1, d], vec![None, dd]));
    out.push(ParamSpec::new("adaptor.proj.b", vec![d], vec![dd]));

    block_layout(&mut out, Stack::Decoder);

    out.push(ParamSpec::new("out.w", vec![d, config.n_mel], vec![dd, None]));
    out.push(ParamSpec::new("out.b", vec![config.n_mel], vec![None]));

    let mut prev = (config.n_mel, None);
    let n_post = config.postnet_hidden.len();
    for i in 0..=n_post {
        let (width, gate) = if i < n_post {
            (config.postnet_hidden[i], Some(PostnetHidden(i)))
        } else {
            (config.n_mel, None)
        };
        out.push(ParamSpec::new(format!("postnet.conv{i}.w"), vec![k, prev.0, width], vec![None, prev.1, gate]));
        out.push(ParamSpec::new(format!("postnet.conv{i}.b"), vec![width], vec![gate]));
        prev = (width, gate);
    }
    out
}

/// Sinusoidal position table for `len` positions over the configured channels.
pub fn positional_encoding<T: Real>(config: &ModelConfig, len: usize) -> Tensor<T> {
    let full_dim = config.pos_width;
    let mut data = Vec::with_capacity(len * config.d);
    for pos in 0..len {
        for &c in &config.pos_channels {
            let pair = (c / 2) as f64;
            let rate = 1.0 / 10000f64.powf(2.0 * pair / full_dim as f64);
            let angle = pos as f64 * rate;
            data.push(T::lit(if c % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::matrix(len, config.d, data).expect("positive extents")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Model<T> {
    /// Fresh model: matrices ~ N(0, 1/fan_in), embeddings ~ N(0, 0.5²),
    /// biases and shifts zero, norm scales one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        for spec in param_layout(&config) {
            let n = spec.numel();
            let data: Vec<T> = if spec.name.ends_with("_emb") {
                let normal = Normal::new(0.0, 0.5).expect("valid std");
                (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect()
            } else if spec.name.ends_with(".scale") {
                vec![T::one(); n]
            } else if spec.shape.len() == 1 {
                vec![T::zero(); n]
            } else {
                let fan_in: usize = spec.shape[..spec.shape.len() - 1].iter().product();
                let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
                (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect()
            };
            params.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data)?);
        }
        Ok(Self { config, params })
    }

    /// Adds N(0, scale²) noise to every parameter, biases and norms included.
    pub fn perturb(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).expect("valid std");
        for t in self.params.values_mut() {
            for v in t.data_mut() {
                *v += T::lit(normal.sample(&mut rng));
            }
        }
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::ModelConfig(format!("missing parameter `{name}`")))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks parameter names and shapes against the configured layout.
    pub fn validate(&self) -> Result<()> {
        let layout = param_layout(&self.config);
        if layout.len() != self.params.len() {
            return Err(Error::ModelConfig(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                self.params.len()
            )));
        }
        for (spec, (name, t)) in layout.iter().zip(&self.params) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(Error::ModelConfig(format!(
                    "parameter `{name}` {:?} does not match layout `{}` {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// Registers every parameter on the tape: as a differentiable parameter
    /// when `trainable(name)` holds, as a constant otherwise.
    pub fn register(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .map(|(k, v)| {
                    let var = if trainable(k) {
                        tape.param(v.clone())
                    } else {
                        tape.constant(v.clone())
                    };
                    (k.clone(), var)
                })
                .collect(),
        )
    }

    pub fn forward(&self, tokens: &[usize], speaker: usize) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, |_| false);
        let out = forward_on_tape(&mut tape, &self.config, &vars, None, tokens, speaker)?;
        Ok(out.values(&tape))
    }

    /// Forward pass with every gated tensor replaced by `W ⊙ z` and head
    /// outputs scaled by their head gate. `z[dim]` is the gate vector of each
    /// enabled dimension of `plan`.
    pub fn forward_masked(
        &self,
        plan: &PrunePlan,
        z: &[Option<Tensor<T>>],
        tokens: &[usize],
        speaker: usize,
    ) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, |_| false);
        let zv = plan.gate_constants(&mut tape, z)?;
        let out = forward_on_tape(
            &mut tape,
            &self.config,
            &vars,
            Some(Gating { plan, z: &zv }),
            tokens,
            speaker,
        )?;
        Ok(out.values(&tape))
    }
}

/// Parameter name → tape variable.
#[derive(Clone, Debug, Default)]
pub struct ParamVars(pub IndexMap<String, Var>);

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::ModelConfig(format!("missing parameter `{name}`")))
    }
}

/// Gate vectors in effect for one forward pass.
#[derive(Clone, Copy)]
pub struct Gating<'a> {
    pub plan: &'a PrunePlan,
    /// Gate vector per plan dimension; `None` for disabled dimensions.
    pub z: &'a [Option<Var>],
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub mel_before: Var,
    pub mel_after: Var,
    pub aux: Var,
}

impl ForwardVars {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> ForwardOutput<T> {
        ForwardOutput {
            mel_before: tape.value(self.mel_before).clone(),
            mel_after: tape.value(self.mel_after).clone(),
            aux: tape.value(self.aux).clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    pub mel_before: Tensor<T>,
    pub mel_after: Tensor<T>,
    pub aux: Tensor<T>,
}

impl<T: Real> ForwardOutput<T> {
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        Ok(self
            .mel_before
            .max_abs_diff(&other.mel_before)?
            .max(self.mel_after.max_abs_diff(&other.mel_after)?)
            .max(self.aux.max_abs_diff(&other.aux)?))
    }
}

/// Weights of one attention head.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
}

/// `softmax((X W_Q + b_Q)(X W_K + b_K)ᵀ · scale) (X W_V + b_V)`.
pub fn self_attention<T: Real>(tape: &mut Tape<T>, head: &HeadVars, x: Var, scale: T) -> Result<Var> {
    let q = linear(tape, x, head.wq, Some(head.bq))?;
    let k = linear(tape, x, head.wk, Some(head.bk))?;
    let v = linear(tape, x, head.wv, Some(head.bv))?;
    let logits = tape.matmul_bt(q, k)?;
    let logits = tape.scale(logits, scale);
    let attn = tape.softmax_rows(logits)?;
    tape.matmul(attn, v)
}

/// `Σᵢ gᵢ · SelfAtt_i(X) W_O⁽ⁱ⁾ + b_O`, with `gᵢ` the optional head gate.
pub fn mha<T: Real>(
    tape: &mut Tape<T>,
    heads: &[HeadVars],
    head_gate: Option<Var>,
    bo: Var,
    x: Var,
    scale: T,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (i, head) in heads.iter().enumerate() {
        let ctx = self_attention(tape, head, x, scale)?;
        let mut out = tape.matmul(ctx, head.wo)?;
        if let Some(g) = head_gate {
            out = tape.scale_by_elem(out, g, i)?;
        }
        acc = Some(match acc {
            Some(a) => tape.add(a, out)?,
            None => out,
        });
    }
    let acc = match acc {
        Some(a) => a,
        None => {
            let shape = tape.value(x).shape().to_vec();
            tape.constant(Tensor::zeros(&shape))
        }
    };
    tape.add_row(acc, bo)
}

/// `ReLU(X W_U + b_U) W_D + b_D`.
pub fn ffn<T: Real>(tape: &mut Tape<T>, x: Var, wu: Var, bu: Var, wd: Var, bd: Var) -> Result<Var> {
    let h = linear(tape, x, wu, Some(bu))?;
    let h = tape.relu(h);
    linear(tape, h, wd, Some(bd))
}

pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// Zero-padded "same" 1-D convolution over time; `w` is `[kernel, c_in, c_out]`.
pub fn conv1d<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let shape = tape.value(w).shape().to_vec();
    let [k, cin, cout] = shape[..] else {
        return Err(Error::Shape {
            op: "conv1d",
            lhs: shape,
            rhs: vec![],
        });
    };
    let cols = tape.unfold(x, k)?;
    let w2 = tape.reshape(w, &[k * cin, cout])?;
    let y = tape.matmul(cols, w2)?;
    tape.add_row(y, b)
}

/// Weights of one post-norm Transformer block.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub heads: Vec<HeadVars>,
    pub head_gate: Option<Var>,
    pub bo: Var,
    pub ln1: (Var, Var),
    pub wu: Var,
    pub bu: Var,
    pub wd: Var,
    pub bd: Var,
    pub ln2: (Var, Var),
}

/// `X' = LN(MHA(X) + X)`, then `LN(FFN(X') + X')`.
pub fn transformer_block<T: Real>(
    tape: &mut Tape<T>,
    block: &BlockVars,
    x: Var,
    scale: T,
    norm_weights: Option<Var>,
    eps: T,
) -> Result<Var> {
    let a = mha(tape, &block.heads, block.head_gate, block.bo, x, scale)?;
    let r = tape.add(a, x)?;
    let x1 = tape.layer_norm(r, norm_weights, block.ln1.0, block.ln1.1, eps)?;
    let f = ffn(tape, x1, block.wu, block.bu, block.wd, block.bd)?;
    let r = tape.add(f, x1)?;
    tape.layer_norm(r, norm_weights, block.ln2.0, block.ln2.1, eps)
}

struct Builder<'a, T> {
    tape: &'a mut Tape<T>,
    vars: &'a ParamVars,
    gating: Option<Gating<'a>>,
}

impl<T: Real> Builder<'_, T> {
    /// Parameter as seen by the forward pass: `W ⊙ z` when gated.
    fn p(&mut self, name: &str) -> Result<Var> {
        let raw = self.vars.get(name)?;
        let Some(g) = self.gating else { return Ok(raw) };
        let binding = g.plan.binding(name)?;
        let gates: Vec<Option<Var>> = binding
            .axes
            .iter()
            .map(|d| d.and_then(|d| g.z[d]))
            .collect();
        if gates.iter().all(Option::is_none) {
            return Ok(raw);
        }
        self.tape.axis_mask(raw, &gates)
    }

    fn dim_gate(&self, key: DimKey) -> Option<Var> {
        let g = self.gating?;
        g.plan.dim_id(key).and_then(|d| g.z[d])
    }

    fn block(&mut self, config: &ModelConfig, stack: Stack, layer: usize) -> Result<BlockVars> {
        let shape = &config.stack(stack)[layer];
        let mut heads = Vec::with_capacity(shape.head_dims.len());
        for h in 0..shape.head_dims.len() {
            let mut part = |p: &str| self.p(&head_param_name(stack, layer, h, p));
            heads.push(HeadVars {
                wq: part("wq")?,
                bq: part("bq")?,
                wk: part("wk")?,
                bk: part("bk")?,
                wv: part("wv")?,
                bv: part("bv")?,
                wo: part("wo")?,
            });
        }
        let pre = stack.prefix();
        let mut p = |s: &str| self.p(&format!("{pre}.{layer}.{s}"));
        let block = BlockVars {
            heads,
            head_gate: None,
            bo: p("attn.bo")?,
            ln1: (p("ln1.scale")?, p("ln1.shift")?),
            wu: p("ffn.wu")?,
            bu: p("ffn.bu")?,
            wd: p("ffn.wd")?,
            bd: p("ffn.bd")?,
            ln2: (p("ln2.scale")?, p("ln2.shift")?),
        };
        Ok(BlockVars {
            head_gate: if shape.head_dims.is_empty() {
                None
            } else {
                self.dim_gate(DimKey::HeadCount(stack, layer))
            },
            ..block
        })
    }
}

/// Records the full forward pass on `tape`.
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    vars: &ParamVars,
    gating: Option<Gating<'_>>,
    tokens: &[usize],
    speaker: usize,
) -> Result<ForwardVars> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::UnknownToken {
            id,
            vocab: config.vocab_size,
        });
    }
    if speaker >= config.n_speakers {
        return Err(Error::UnknownSpeaker {
            id: speaker,
            count: config.n_speakers,
        });
    }
    let len = tokens.len();
    let mut b = Builder { tape, vars, gating };
    let eps = T::lit(config.ln_eps);
    let scale = T::lit(1.0 / (config.attn_scale_dim as f64).sqrt());
    let zd = b.dim_gate(DimKey::ModelD);

    let tok = b.p("tok_emb")?;
    let mut x = b.tape.gather_rows(tok, tokens)?;
    let pe = b.tape.constant(positional_encoding(config, len));
    let pe = match zd {
        Some(z) => b.tape.mul_row(pe, z)?,
        None => pe,
    };
    x = b.tape.add(x, pe)?;
    let spk = b.p("spk_emb")?;
    let spk = b.tape.gather_rows(spk, &[speaker])?;
    let spk = b.tape.reshape(spk, &[config.d])?;
    x = b.tape.add_row(x, spk)?;

    for layer in 0..config.encoder.len() {
        let block = b.block(config, Stack::Encoder, layer)?;
        x = transformer_block(b.tape, &block, x, scale, zd, eps)?;
    }

    let mut h = x;
    for i in 0..config.adaptor_hidden.len() {
        let w = b.p(&format!("adaptor.conv{i}.w"))?;
        let bias = b.p(&format!("adaptor.conv{i}.b"))?;
        h = conv1d(b.tape, h, w, bias)?;
        h = b.tape.relu(h);
    }
    let (w, bias) = (b.p("adaptor.out.w")?, b.p("adaptor.out.b")?);
    let aux_col = linear(b.tape, h, w, Some(bias))?;
    let (w, bias) = (b.p("adaptor.proj.w")?, b.p("adaptor.proj.b")?);
    let feat = linear(b.tape, aux_col, w, Some(bias))?;
    x = b.tape.add(x, feat)?;
    let aux = b.tape.reshape(aux_col, &[len])?;

    for layer in 0..config.decoder.len() {
        let block = b.block(config, Stack::Decoder, layer)?;
        x = transformer_block(b.tape, &block, x, scale, zd, eps)?;
    }

    let (w, bias) = (b.p("out.w")?, b.p("out.b")?);
    let mel_before = linear(b.tape, x, w, Some(bias))?;

    let mut p = mel_before;
    let n_post = config.postnet_hidden.len();
    for i in 0..=n_post {
        let w = b.p(&format!("postnet.conv{i}.w"))?;
        let bias = b.p(&format!("postnet.conv{i}.b"))?;
        p = conv1d(b.tape, p, w, bias)?;
        if i < n_post {
            p = b.tape.tanh(p);
        }
    }
    let mel_after = b.tape.add(mel_before, p)?;
    Ok(ForwardVars {
        mel_before,
        mel_after,
        aux,
    })
}
