//! Toy transformer encoder with QAT instrumentation on matmul/mul sites.
//!
//! The encoder follows the original post-norm block: multihead
//! self-attention (query/key/value/output projections) and a two-layer
//! feed-forward sublayer, each wrapped in residual-add plus layer norm,
//! with a mean-pool classification head on top. Under QAT every matmul
//! input (the projections, QK^T, probs*V, the output and head projections,
//! the FFN layers) and the score scaling mul pass through fake-quantize;
//! layer norm, softmax, relu, and bias adds stay FP32.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::kure;
use crate::quant::{self, ActCalibrator, QTensor};
use crate::rng::{rand_tensor, Dist, Rng};
use crate::tensor::{self, Tensor};

/// Layer-norm stabilizer used everywhere in the model.
pub const LN_EPS: f32 = 1e-5;

/// Init std for ordinary weight tensors.
pub const INIT_STD: f32 = 0.02;

/// Spike magnitude, in units of body std times sqrt(n), planted into each
/// heavy tensor. One such outlier pins the sample kurtosis near
/// `c^4 * n / (c^2 + 1)^2` (~0.97 n for c = 8) regardless of seed, which
/// keeps the planted tensors above the 1e3 mark at desk tensor sizes.
pub const SPIKE_FACTOR: f32 = 8.0;

/// Encoder stack dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Checks the divisibility and positivity invariants. `num_blocks = 0`
    /// is tolerated for degenerate test configs (block bypass).
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::BadParam {
                what: "d_model/num_heads divisibility",
                value: self.d_model as f64,
            });
        }
        for (what, v) in [
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(Error::BadParam {
                    what,
                    value: 0.0,
                });
            }
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Named collection of weight tensors with stable, canonical names.
///
/// Iteration order is construction order (embed, blocks in order, head),
/// which is also the serialization order, so identical seeds yield
/// bit-identical checkpoints.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor under a unique name.
    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        debug_assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((String::from(name), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingParam {
                name: String::from(name),
            })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingParam {
                name: String::from(name),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Which FFN tensor the generator makes heavy-tailed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeavySite {
    FfnFc1,
    FfnFc2,
}

impl HeavySite {
    fn tensor_name(&self, block: usize) -> String {
        match self {
            HeavySite::FfnFc1 => format!("block{block}.ffn.fc1.w"),
            HeavySite::FfnFc2 => format!("block{block}.ffn.fc2.w"),
        }
    }

    /// Glob matching every per-block tensor at this site.
    pub fn pattern(&self) -> &'static str {
        match self {
            HeavySite::FfnFc1 => "*.ffn.fc1.w",
            HeavySite::FfnFc2 => "*.ffn.fc2.w",
        }
    }
}

fn insert_block_params(params: &mut ModelParams, rng: &mut Rng, cfg: &ModelConfig, i: usize) -> Result<()> {
    let d = cfg.d_model;
    let dist = Dist::Normal {
        mean: 0.0,
        std: INIT_STD,
    };
    for part in ["query", "key", "value", "out"] {
        params.insert(
            &format!("block{i}.attn.{part}.w"),
            rand_tensor(rng, &[d, d], dist)?,
        );
        params.insert(&format!("block{i}.attn.{part}.b"), Tensor::zeros(&[d]));
    }
    params.insert(&format!("block{i}.ln1.gain"), Tensor::full(&[d], 1.0));
    params.insert(&format!("block{i}.ln1.bias"), Tensor::zeros(&[d]));
    params.insert(
        &format!("block{i}.ffn.fc1.w"),
        rand_tensor(rng, &[d, cfg.d_ff], dist)?,
    );
    params.insert(&format!("block{i}.ffn.fc1.b"), Tensor::zeros(&[cfg.d_ff]));
    params.insert(
        &format!("block{i}.ffn.fc2.w"),
        rand_tensor(rng, &[cfg.d_ff, d], dist)?,
    );
    params.insert(&format!("block{i}.ffn.fc2.b"), Tensor::zeros(&[d]));
    params.insert(&format!("block{i}.ln2.gain"), Tensor::full(&[d], 1.0));
    params.insert(&format!("block{i}.ln2.bias"), Tensor::zeros(&[d]));
    Ok(())
}

/// Fresh random parameters: normal(0, 0.02) weights, zero biases, unit gains.
pub fn init_random(rng: &mut Rng, cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let dist = Dist::Normal {
        mean: 0.0,
        std: INIT_STD,
    };
    let mut params = ModelParams::new();
    params.insert("embed.w", rand_tensor(rng, &[cfg.vocab, cfg.d_model], dist)?);
    for i in 0..cfg.num_blocks {
        insert_block_params(&mut params, rng, cfg, i)?;
    }
    params.insert(
        "head.w",
        rand_tensor(rng, &[cfg.d_model, cfg.num_classes], dist)?,
    );
    params.insert("head.b", Tensor::zeros(&[cfg.num_classes]));
    Ok(params)
}

/// Parameters shaped like a pretrained checkpoint: ordinary tensors are
/// normal(0, 0.02) while the designated FFN tensor in every block is drawn
/// heavy-tailed (Student-t body, one planted extreme outlier), so each
/// heavy tensor lands above 1e3 sample kurtosis at desk tensor sizes.
pub fn generate_pretrained_like(
    rng: &mut Rng,
    cfg: &ModelConfig,
    heavy_site: HeavySite,
    heavy_dof: f32,
    heavy_scale: f32,
) -> Result<ModelParams> {
    let mut params = init_random(rng, cfg)?;
    for i in 0..cfg.num_blocks {
        let name = heavy_site.tensor_name(i);
        let shape = params.get(&name)?.shape().to_vec();
        let mut heavy = rand_tensor(
            rng,
            &shape,
            Dist::StudentT {
                dof: heavy_dof,
                scale: heavy_scale,
            },
        )?;
        let stats = kure::tensor_stats(&heavy, kure::MOMENT_EPS)?;
        let n = heavy.numel();
        let spike = SPIKE_FACTOR * stats.std * libm::sqrtf(n as f32);
        let pos = rng.next_index(n);
        let sign = if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
        heavy.data_mut()[pos] = sign * spike;
        *params.get_mut(&name)? = heavy;
    }
    Ok(params)
}

/// QAT instrumentation: on/off switch plus one activation calibrator per
/// quantized site. Weight scales are recomputed from the live weights at
/// every fake-quantize, so they are not stored here.
#[derive(Clone, Debug)]
pub struct QatState {
    pub enabled: bool,
    training: bool,
    decay: f32,
    calibrators: BTreeMap<String, ActCalibrator>,
    fq_nodes: usize,
}

impl QatState {
    /// Enabled state with EMA activation calibrators (decay 0.99 default).
    pub fn new(decay: f32) -> Result<Self> {
        // Validate eagerly so a bad decay fails here, not mid-training.
        ActCalibrator::new(decay)?;
        Ok(QatState {
            enabled: true,
            training: true,
            decay,
            calibrators: BTreeMap::new(),
            fq_nodes: 0,
        })
    }

    /// Instrumentation fully off: forward is the plain FP32 forward.
    pub fn disabled() -> Self {
        QatState {
            enabled: false,
            training: false,
            decay: 1.0,
            calibrators: BTreeMap::new(),
            fq_nodes: 0,
        }
    }

    /// In training mode calibrators update from every observed activation;
    /// otherwise stored scales are used as-is (frozen).
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    /// Resets the per-forward fake-quantize node counter.
    pub fn begin_forward(&mut self) {
        self.fq_nodes = 0;
    }

    /// Fake-quantize nodes inserted since the last [`Self::begin_forward`].
    pub fn fq_count(&self) -> usize {
        self.fq_nodes
    }

    /// Calibrated activation scales, keyed by site name.
    pub fn act_scales(&self) -> BTreeMap<String, f32> {
        self.calibrators
            .iter()
            .map(|(k, c)| (k.clone(), c.scale()))
            .collect()
    }

    /// Persisted running max-abs per site (for checkpointing).
    pub fn act_absmax(&self) -> BTreeMap<String, f32> {
        self.calibrators
            .iter()
            .map(|(k, c)| (k.clone(), c.running_absmax()))
            .collect()
    }

    /// Restores a calibrator from a persisted running max.
    pub fn restore_site(&mut self, site: &str, running_absmax: f32) -> Result<()> {
        self.calibrators.insert(
            String::from(site),
            ActCalibrator::from_absmax(running_absmax, self.decay)?,
        );
        Ok(())
    }

    fn fq_act(&mut self, tape: &mut Tape, x: NodeId, site: &str) -> Result<NodeId> {
        if !self.enabled {
            return Ok(x);
        }
        let scale = if self.training {
            let c = self
                .calibrators
                .entry(String::from(site))
                .or_insert(ActCalibrator::new(self.decay)?);
            c.observe(tape.value(x));
            c.scale()
        } else {
            self.calibrators
                .get(site)
                .ok_or_else(|| Error::MissingCalibration {
                    site: String::from(site),
                })?
                .scale()
        };
        self.fq_nodes += 1;
        tape.fake_quant(x, scale)
    }

    fn fq_weight(&mut self, tape: &mut Tape, w: NodeId) -> Result<NodeId> {
        if !self.enabled {
            return Ok(w);
        }
        let scale = quant::compute_scale_maxabs(tape.value(w));
        self.fq_nodes += 1;
        tape.fake_quant(w, scale)
    }
}

/// Parameter tensors registered as tape leaves for one training step.
pub struct ParamNodes {
    pairs: Vec<(String, NodeId)>,
}

impl ParamNodes {
    /// Registers every parameter tensor on the tape, preserving order.
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Self {
        let pairs = params
            .iter()
            .map(|(name, t)| (String::from(name), tape.leaf(t.clone())))
            .collect();
        ParamNodes { pairs }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.pairs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::MissingParam {
                name: String::from(name),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.pairs.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

/// Multihead self-attention sublayer with residual add and layer norm.
pub fn attention_block(
    tape: &mut Tape,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    block: usize,
    x: NodeId,
    qat: &mut QatState,
) -> Result<NodeId> {
    let dh = cfg.d_head();
    let seq = tape.value(x).shape()[0];

    let x_in = qat.fq_act(tape, x, &format!("block{block}.attn.in"))?;
    let proj = |tape: &mut Tape, qat: &mut QatState, part: &str| -> Result<NodeId> {
        let w = pn.get(&format!("block{block}.attn.{part}.w"))?;
        let b = pn.get(&format!("block{block}.attn.{part}.b"))?;
        let w_q = qat.fq_weight(tape, w)?;
        let y = tape.matmul(x_in, w_q)?;
        tape.add(y, b)
    };
    let q = proj(tape, qat, "query")?;
    let k = proj(tape, qat, "key")?;
    let v = proj(tape, qat, "value")?;

    let q_in = qat.fq_act(tape, q, &format!("block{block}.attn.q"))?;
    let k_in = qat.fq_act(tape, k, &format!("block{block}.attn.k"))?;
    let v_in = qat.fq_act(tape, v, &format!("block{block}.attn.v"))?;

    // Score scaling is the model's elementwise-mul site; the constant
    // operand quantizes exactly (it maps to +-127 on its own grid).
    let inv_sqrt = 1.0 / libm::sqrtf(dh as f32);
    let scale_leaf = tape.leaf(Tensor::full(&[seq, seq], inv_sqrt));
    let scale_in = qat.fq_weight(tape, scale_leaf)?;

    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = tape.col_slice(q_in, h * dh, dh)?;
        let kh = tape.col_slice(k_in, h * dh, dh)?;
        let vh = tape.col_slice(v_in, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores_in = qat.fq_act(tape, scores, &format!("block{block}.attn.scores"))?;
        let scaled = tape.mul(scores_in, scale_in)?;
        let probs = tape.softmax_rows(scaled)?;
        let probs_in = qat.fq_act(tape, probs, &format!("block{block}.attn.probs"))?;
        heads.push(tape.matmul(probs_in, vh)?);
    }
    let cat = tape.col_concat(&heads)?;
    let cat_in = qat.fq_act(tape, cat, &format!("block{block}.attn.concat"))?;
    let w_out = pn.get(&format!("block{block}.attn.out.w"))?;
    let w_out_q = qat.fq_weight(tape, w_out)?;
    let out = tape.matmul(cat_in, w_out_q)?;
    let out = tape.add(out, pn.get(&format!("block{block}.attn.out.b"))?)?;

    let res = tape.add(x, out)?;
    tape.layer_norm(
        res,
        pn.get(&format!("block{block}.ln1.gain"))?,
        pn.get(&format!("block{block}.ln1.bias"))?,
        LN_EPS,
    )
}

/// Two-layer feed-forward sublayer with residual add and layer norm.
pub fn ffn_block(
    tape: &mut Tape,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    block: usize,
    x: NodeId,
    qat: &mut QatState,
) -> Result<NodeId> {
    let _ = cfg;
    let x_in = qat.fq_act(tape, x, &format!("block{block}.ffn.in"))?;
    let w1 = pn.get(&format!("block{block}.ffn.fc1.w"))?;
    let w1_q = qat.fq_weight(tape, w1)?;
    let h = tape.matmul(x_in, w1_q)?;
    let h = tape.add(h, pn.get(&format!("block{block}.ffn.fc1.b"))?)?;
    let a = tape.relu(h);
    let a_in = qat.fq_act(tape, a, &format!("block{block}.ffn.hidden"))?;
    let w2 = pn.get(&format!("block{block}.ffn.fc2.w"))?;
    let w2_q = qat.fq_weight(tape, w2)?;
    let out = tape.matmul(a_in, w2_q)?;
    let out = tape.add(out, pn.get(&format!("block{block}.ffn.fc2.b"))?)?;

    let res = tape.add(x, out)?;
    tape.layer_norm(
        res,
        pn.get(&format!("block{block}.ln2.gain"))?,
        pn.get(&format!("block{block}.ln2.bias"))?,
        LN_EPS,
    )
}

/// Full forward: embedding, encoder blocks, mean-pool, linear head.
/// Returns the `[1, num_classes]` logits node.
pub fn forward_on_tape(
    tape: &mut Tape,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    tokens: &[usize],
    qat: &mut QatState,
) -> Result<NodeId> {
    let embed = pn.get("embed.w")?;
    let mut x = tape.gather(embed, tokens)?;
    for i in 0..cfg.num_blocks {
        x = attention_block(tape, pn, cfg, i, x, qat)?;
        x = ffn_block(tape, pn, cfg, i, x, qat)?;
    }
    let pooled = tape.mean_rows(x)?;
    let pooled_in = qat.fq_act(tape, pooled, "head.in")?;
    let w = qat.fq_weight(tape, pn.get("head.w")?)?;
    let logits = tape.matmul(pooled_in, w)?;
    tape.add(logits, pn.get("head.b")?)
}

/// One-shot forward returning logit values (builds a scratch tape).
pub fn forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    tokens: &[usize],
    qat: &mut QatState,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pn = ParamNodes::register(&mut tape, params);
    qat.begin_forward();
    let logits = forward_on_tape(&mut tape, &pn, cfg, tokens, qat)?;
    Ok(tape.value(logits).clone())
}

/// Expected fake-quantize node count for one forward pass:
/// per block 14 + 2 * num_heads, plus 2 for the head site.
pub fn expected_fq_count(cfg: &ModelConfig) -> usize {
    cfg.num_blocks * (14 + 2 * cfg.num_heads) + 2
}

/// INT8-quantized model: per-tensor INT8 weights plus frozen activation
/// scales from QAT calibration.
#[derive(Clone, Debug)]
pub struct QuantizedModel {
    pub weights: Vec<(String, QTensor)>,
    pub act_scales: BTreeMap<String, f32>,
}

impl QuantizedModel {
    /// Quantizes every parameter tensor with its max-abs scale and captures
    /// the calibrated activation scales.
    pub fn from_params(params: &ModelParams, qat: &QatState) -> Self {
        let weights = params
            .iter()
            .map(|(name, t)| {
                let scale = quant::compute_scale_maxabs(t);
                let q = quant::quantize(t, scale).expect("max-abs scale is positive");
                (String::from(name), q)
            })
            .collect();
        QuantizedModel {
            weights,
            act_scales: qat.act_scales(),
        }
    }

    fn qweight(&self, name: &str) -> Result<&QTensor> {
        self.weights
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, q)| q)
            .ok_or_else(|| Error::MissingParam {
                name: String::from(name),
            })
    }

    fn deq(&self, name: &str) -> Result<Tensor> {
        Ok(quant::dequantize(self.qweight(name)?))
    }

    fn act_scale(&self, site: &str) -> Result<f32> {
        self.act_scales
            .get(site)
            .copied()
            .ok_or_else(|| Error::MissingCalibration {
                site: String::from(site),
            })
    }
}

/// True INT8 forward: weights stay INT8, every matmul runs through
/// [`quant::int8_matmul`] with INT32 accumulation, activations are
/// quantized at the calibrated site scales. Layer norm, softmax, relu and
/// bias adds run in FP32 on dequantized values.
pub fn forward_int8(qm: &QuantizedModel, cfg: &ModelConfig, tokens: &[usize]) -> Result<Tensor> {
    let embed = qm.deq("embed.w")?;
    let (vocab, d) = embed.dims2("embed")?;
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &tok in tokens {
        if tok >= vocab {
            return Err(Error::TokenOutOfRange { token: tok, vocab });
        }
        data.extend_from_slice(&embed.data()[tok * d..(tok + 1) * d]);
    }
    let mut x = Tensor::new(alloc::vec![tokens.len(), d], data)?;

    for i in 0..cfg.num_blocks {
        x = attention_block_int8(qm, cfg, i, &x)?;
        x = ffn_block_int8(qm, cfg, i, &x)?;
    }

    let pooled = tensor::mean_rows(&x)?;
    let pooled_q = quant::quantize(&pooled, qm.act_scale("head.in")?)?;
    let logits = quant::int8_matmul(&pooled_q, qm.qweight("head.w")?)?;
    tensor::add(&logits, &qm.deq("head.b")?)
}

fn attention_block_int8(
    qm: &QuantizedModel,
    cfg: &ModelConfig,
    block: usize,
    x: &Tensor,
) -> Result<Tensor> {
    let dh = cfg.d_head();
    let x_q = quant::quantize(x, qm.act_scale(&format!("block{block}.attn.in"))?)?;
    let proj = |part: &str| -> Result<Tensor> {
        let y = quant::int8_matmul(&x_q, qm.qweight(&format!("block{block}.attn.{part}.w"))?)?;
        tensor::add(&y, &qm.deq(&format!("block{block}.attn.{part}.b"))?)
    };
    let q = proj("query")?;
    let k = proj("key")?;
    let v = proj("value")?;

    let q_q = quant::quantize(&q, qm.act_scale(&format!("block{block}.attn.q"))?)?;
    let k_q = quant::quantize(&k, qm.act_scale(&format!("block{block}.attn.k"))?)?;
    let v_q = quant::quantize(&v, qm.act_scale(&format!("block{block}.attn.v"))?)?;

    // Mul site: the constant operand round-trips its own grid exactly.
    let inv_sqrt = 1.0 / libm::sqrtf(dh as f32);
    let c_fq = quant::fake_quant(
        &Tensor::scalar(inv_sqrt),
        quant::compute_scale_maxabs(&Tensor::scalar(inv_sqrt)),
    )?
    .data()[0];

    let scores_scale = qm.act_scale(&format!("block{block}.attn.scores"))?;
    let probs_scale = qm.act_scale(&format!("block{block}.attn.probs"))?;
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = q_q.col_slice(h * dh, dh)?;
        let kh = k_q.col_slice(h * dh, dh)?;
        let vh = v_q.col_slice(h * dh, dh)?;
        let scores = quant::int8_matmul(&qh, &kh.transpose()?)?;
        let scores_q = quant::quantize(&scores, scores_scale)?;
        let scaled = tensor::scale(&quant::dequantize(&scores_q), c_fq);
        let probs = tensor::softmax_rows(&scaled)?;
        let probs_q = quant::quantize(&probs, probs_scale)?;
        heads.push(quant::int8_matmul(&probs_q, &vh)?);
    }
    let parts: Vec<&Tensor> = heads.iter().collect();
    let cat = tensor::col_concat(&parts)?;
    let cat_q = quant::quantize(&cat, qm.act_scale(&format!("block{block}.attn.concat"))?)?;
    let out = quant::int8_matmul(&cat_q, qm.qweight(&format!("block{block}.attn.out.w"))?)?;
    let out = tensor::add(&out, &qm.deq(&format!("block{block}.attn.out.b"))?)?;

    let res = tensor::add(x, &out)?;
    tensor::layer_norm(
        &res,
        &qm.deq(&format!("block{block}.ln1.gain"))?,
        &qm.deq(&format!("block{block}.ln1.bias"))?,
        LN_EPS,
    )
}

fn ffn_block_int8(
    qm: &QuantizedModel,
    cfg: &ModelConfig,
    block: usize,
    x: &Tensor,
) -> Result<Tensor> {
    let _ = cfg;
    let x_q = quant::quantize(x, qm.act_scale(&format!("block{block}.ffn.in"))?)?;
    let h = quant::int8_matmul(&x_q, qm.qweight(&format!("block{block}.ffn.fc1.w"))?)?;
    let h = tensor::add(&h, &qm.deq(&format!("block{block}.ffn.fc1.b"))?)?;
    let a = tensor::relu(&h);
    let a_q = quant::quantize(&a, qm.act_scale(&format!("block{block}.ffn.hidden"))?)?;
    let out = quant::int8_matmul(&a_q, qm.qweight(&format!("block{block}.ffn.fc2.w"))?)?;
    let out = tensor::add(&out, &qm.deq(&format!("block{block}.ffn.fc2.b"))?)?;

    let res = tensor::add(x, &out)?;
    tensor::layer_norm(
        &res,
        &qm.deq(&format!("block{block}.ln2.gain"))?,
        &qm.deq(&format!("block{block}.ln2.bias"))?,
        LN_EPS,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kure::{kurtosis_report, KureMode, UNIFORM_KURTOSIS};

    fn desk_cfg() -> ModelConfig {
        ModelConfig {
            num_blocks: 2,
            d_model: 32,
            num_heads: 4,
            d_ff: 64,
            vocab: 16,
            seq_len: 12,
            num_classes: 4,
        }
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            num_blocks: 1,
            d_model: 8,
            num_heads: 1,
            d_ff: 8,
            vocab: 8,
            seq_len: 4,
            num_classes: 3,
        }
    }

    #[test]
    fn config_validation() {
        assert!(desk_cfg().validate().is_ok());
        let mut bad = desk_cfg();
        bad.num_heads = 5;
        assert!(bad.validate().is_err());
        let mut zero = desk_cfg();
        zero.vocab = 0;
        assert!(zero.validate().is_err());
    }

    #[test]
    fn canonical_names_and_counts() {
        let cfg = desk_cfg();
        let params = init_random(&mut Rng::new(1), &cfg).unwrap();
        // Per block: 4 attention weight matrices and 2 FFN weight matrices.
        for i in 0..cfg.num_blocks {
            let attn: usize = ["query", "key", "value", "out"]
                .iter()
                .filter(|p| params.get(&format!("block{i}.attn.{p}.w")).is_ok())
                .count();
            assert_eq!(attn, 4);
            assert!(params.get(&format!("block{i}.ffn.fc1.w")).is_ok());
            assert!(params.get(&format!("block{i}.ffn.fc2.w")).is_ok());
        }
        assert!(params.get("embed.w").is_ok());
        assert!(params.get("head.w").is_ok());
        // 16 tensors per block, embed + head pair.
        assert_eq!(params.len(), 3 + 16 * cfg.num_blocks);
        assert!(matches!(
            params.get("block9.attn.query.w"),
            Err(Error::MissingParam { .. })
        ));
    }

    /// Identity-weight attention with one head and one key reduces to
    /// layer_norm(2x), bitwise.
    #[test]
    fn attention_single_key_identity() {
        let cfg = ModelConfig {
            num_blocks: 1,
            d_model: 4,
            num_heads: 1,
            d_ff: 4,
            vocab: 4,
            seq_len: 1,
            num_classes: 2,
        };
        let mut params = init_random(&mut Rng::new(2), &cfg).unwrap();
        for part in ["query", "key", "value", "out"] {
            *params.get_mut(&format!("block0.attn.{part}.w")).unwrap() = Tensor::eye(4);
        }
        let x = Tensor::new(alloc::vec![1, 4], alloc::vec![0.0, 1.0, 0.0, 0.0]).unwrap();

        let mut tape = Tape::new();
        let pn = ParamNodes::register(&mut tape, &params);
        let xid = tape.leaf(x.clone());
        let out = attention_block(&mut tape, &pn, &cfg, 0, xid, &mut QatState::disabled()).unwrap();

        let expected = tensor::layer_norm(
            &tensor::scale(&x, 2.0),
            params.get("block0.ln1.gain").unwrap(),
            params.get("block0.ln1.bias").unwrap(),
            LN_EPS,
        )
        .unwrap();
        assert_eq!(tape.value(out), &expected);
    }

    #[test]
    fn attention_zero_weights_passes_residual() {
        let cfg = tiny_cfg();
        let mut params = init_random(&mut Rng::new(3), &cfg).unwrap();
        for part in ["query", "key", "value", "out"] {
            *params.get_mut(&format!("block0.attn.{part}.w")).unwrap() =
                Tensor::zeros(&[cfg.d_model, cfg.d_model]);
        }
        let x = rand_tensor(
            &mut Rng::new(4),
            &[cfg.seq_len, cfg.d_model],
            Dist::Normal { mean: 0.0, std: 1.0 },
        )
        .unwrap();
        let mut tape = Tape::new();
        let pn = ParamNodes::register(&mut tape, &params);
        let xid = tape.leaf(x.clone());
        let out = attention_block(&mut tape, &pn, &cfg, 0, xid, &mut QatState::disabled()).unwrap();
        let expected = tensor::layer_norm(
            &x,
            params.get("block0.ln1.gain").unwrap(),
            params.get("block0.ln1.bias").unwrap(),
            LN_EPS,
        )
        .unwrap();
        assert_eq!(tape.value(out), &expected);
    }

    #[test]
    fn ffn_identity_and_relu_kill() {
        let cfg = tiny_cfg(); // d_ff == d_model so identity weights fit
        let mut params = init_random(&mut Rng::new(5), &cfg).unwrap();
        *params.get_mut("block0.ffn.fc1.w").unwrap() = Tensor::eye(8);
        *params.get_mut("block0.ffn.fc2.w").unwrap() = Tensor::eye(8);

        let gain = params.get("block0.ln2.gain").unwrap().clone();
        let bias = params.get("block0.ln2.bias").unwrap().clone();

        // Non-negative input: FFN(x) = x, block = layer_norm(2x).
        let x = Tensor::new(
            alloc::vec![1, 8],
            alloc::vec![0.5, 1.0, 0.0, 2.0, 0.25, 3.0, 1.5, 0.75],
        )
        .unwrap();
        let mut tape = Tape::new();
        let pn = ParamNodes::register(&mut tape, &params);
        let xid = tape.leaf(x.clone());
        let out = ffn_block(&mut tape, &pn, &cfg, 0, xid, &mut QatState::disabled()).unwrap();
        let expected =
            tensor::layer_norm(&tensor::scale(&x, 2.0), &gain, &bias, LN_EPS).unwrap();
        assert_eq!(tape.value(out), &expected);

        // All-negative input: relu kills the FFN path, block = layer_norm(x).
        let neg = tensor::scale(&x, -1.0);
        let neg = tensor::add(&neg, &Tensor::full(&[1, 8], -0.1)).unwrap();
        let mut tape2 = Tape::new();
        let pn2 = ParamNodes::register(&mut tape2, &params);
        let nid = tape2.leaf(neg.clone());
        let out2 = ffn_block(&mut tape2, &pn2, &cfg, 0, nid, &mut QatState::disabled()).unwrap();
        let expected2 = tensor::layer_norm(&neg, &gain, &bias, LN_EPS).unwrap();
        assert_eq!(tape2.value(out2), &expected2);
    }

    #[test]
    fn zero_block_forward_is_head_of_pooled_embedding() {
        let mut cfg = tiny_cfg();
        cfg.num_blocks = 0;
        let params = init_random(&mut Rng::new(6), &cfg).unwrap();
        let tokens = [1usize, 3, 5, 7];
        let logits = forward(&params, &cfg, &tokens, &mut QatState::disabled()).unwrap();

        let mut tape = Tape::new();
        let embed = tape.leaf(params.get("embed.w").unwrap().clone());
        let x = tape.gather(embed, &tokens).unwrap();
        let pooled = tape.mean_rows(x).unwrap();
        let w = tape.leaf(params.get("head.w").unwrap().clone());
        let prod = tape.matmul(pooled, w).unwrap();
        let b = tape.leaf(params.get("head.b").unwrap().clone());
        let expected = tape.add(prod, b).unwrap();
        assert_eq!(&logits, tape.value(expected));
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let cfg = desk_cfg();
        let params = init_random(&mut Rng::new(7), &cfg).unwrap();
        let tokens = [3usize, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8];
        let a = forward(&params, &cfg, &tokens, &mut QatState::disabled()).unwrap();
        let b = forward(&params, &cfg, &tokens, &mut QatState::disabled()).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        assert_eq!(a.shape(), &[1, cfg.num_classes]);
        assert!(matches!(
            forward(&params, &cfg, &[99], &mut QatState::disabled()),
            Err(Error::TokenOutOfRange { token: 99, .. })
        ));
    }

    #[test]
    fn every_parameter_receives_task_gradient() {
        let cfg = desk_cfg();
        let params = init_random(&mut Rng::new(8), &cfg).unwrap();
        let mut tape = Tape::new();
        let pn = ParamNodes::register(&mut tape, &params);
        let mut qat = QatState::disabled();
        // Two samples so attention and pooling see varied rows.
        let l1 = forward_on_tape(&mut tape, &pn, &cfg, &[3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8], &mut qat)
            .unwrap();
        let l2 = forward_on_tape(&mut tape, &pn, &cfg, &[0, 2, 4, 6, 8, 10, 12, 14, 1, 3, 5, 7], &mut qat)
            .unwrap();
        let c1 = tape.cross_entropy(l1, 0).unwrap();
        let c2 = tape.cross_entropy(l2, 2).unwrap();
        let both = tape.add(c1, c2).unwrap();
        let loss = tape.scale(both, 0.5);
        let grads = tape.backward(loss).unwrap();
        for (name, id) in pn.iter() {
            let g = grads.wrt(&tape, id);
            let norm: f32 = g.data().iter().map(|v| v * v).sum::<f32>();
            assert!(norm > 0.0, "no gradient reached {name}");
        }
    }

    #[test]
    fn qat_off_is_plain_forward_with_zero_fq_nodes() {
        let cfg = desk_cfg();
        let params = init_random(&mut Rng::new(9), &cfg).unwrap();
        let tokens = [0usize, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];
        let mut qat = QatState::disabled();
        let off = forward(&params, &cfg, &tokens, &mut qat).unwrap();
        assert_eq!(qat.fq_count(), 0);

        // The disabled path must not depend on calibrator state at all.
        let mut qat_with_history = QatState::new(0.99).unwrap();
        let _ = forward(&params, &cfg, &tokens, &mut qat_with_history).unwrap();
        qat_with_history.enabled = false;
        let off2 = forward(&params, &cfg, &tokens, &mut qat_with_history).unwrap();
        assert_eq!(off, off2);
    }

    #[test]
    fn qat_fq_node_count_matches_quantized_op_set() {
        let cfg = desk_cfg();
        let params = init_random(&mut Rng::new(10), &cfg).unwrap();
        let tokens = [3usize, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8];
        let mut qat = QatState::new(0.99).unwrap();
        let _ = forward(&params, &cfg, &tokens, &mut qat).unwrap();
        assert_eq!(qat.fq_count(), expected_fq_count(&cfg));
        assert_eq!(expected_fq_count(&cfg), 2 * (14 + 2 * 4) + 2);
        // One activation calibrator per quantized activation site.
        assert_eq!(qat.act_scales().len(), 9 * cfg.num_blocks + 1);
    }

    #[test]
    fn qat_with_max_abs_scales_stays_close_to_plain() {
        let cfg = desk_cfg();
        let params = init_random(&mut Rng::new(11), &cfg).unwrap();
        let tokens = [7usize, 7, 2, 0, 1, 3, 15, 4, 9, 11, 2, 5];
        let plain = forward(&params, &cfg, &tokens, &mut QatState::disabled()).unwrap();
        // Training-mode calibrators observe each tensor before quantizing,
        // so the scale is the live max-abs and nothing clips.
        let mut qat = QatState::new(1.0).unwrap();
        let quantized = forward(&params, &cfg, &tokens, &mut qat).unwrap();
        for (p, q) in plain.data().iter().zip(quantized.data()) {
            assert!((p - q).abs() <= 0.05, "QAT drift too large: {p} vs {q}");
        }
    }

    #[test]
    fn planted_model_has_exactly_num_blocks_heavy_tensors() {
        let cfg = ModelConfig {
            num_blocks: 12,
            d_model: 32,
            num_heads: 4,
            d_ff: 64,
            vocab: 16,
            seq_len: 12,
            num_classes: 4,
        };
        let params = generate_pretrained_like(
            &mut Rng::new(42),
            &cfg,
            HeavySite::FfnFc2,
            2.5,
            1e-3,
        )
        .unwrap();
        let report = kurtosis_report(
            &params,
            100.0,
            &[],
            0.5,
            KureMode::PlainSum,
            UNIFORM_KURTOSIS,
        );
        assert_eq!(report.excluded_count(), 12);
        for e in &report.entries {
            if !e.included {
                assert!(e.name.ends_with(".ffn.fc2.w"), "unexpected exclusion {}", e.name);
                assert!(e.kurtosis > 1e3, "{} kurtosis only {}", e.name, e.kurtosis);
            } else {
                assert!(
                    e.kurtosis >= 1.0 && e.kurtosis <= 100.0,
                    "{} kurtosis {} outside [1, 100]",
                    e.name,
                    e.kurtosis
                );
            }
        }
        // Plain-sum total kurtosis of the planted model is enormous.
        let total: f64 = report.entries.iter().map(|e| e.kurtosis as f64).sum();
        assert!(total >= 1e4, "total kurtosis {total}");
    }

    #[test]
    fn heavy_site_is_overridable() {
        let cfg = desk_cfg();
        let params = generate_pretrained_like(
            &mut Rng::new(43),
            &cfg,
            HeavySite::FfnFc1,
            2.5,
            1e-3,
        )
        .unwrap();
        let report = kurtosis_report(
            &params,
            100.0,
            &[],
            0.5,
            KureMode::PlainSum,
            UNIFORM_KURTOSIS,
        );
        assert_eq!(report.excluded_count(), cfg.num_blocks);
        for e in report.entries.iter().filter(|e| !e.included) {
            assert!(e.name.ends_with(".ffn.fc1.w"));
        }
    }

    #[test]
    fn int8_forward_tracks_fake_quant_forward() {
        let cfg = desk_cfg();
        let params = init_random(&mut Rng::new(12), &cfg).unwrap();
        let tokens = [3usize, 14, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8];

        // Calibrate on a few forwards, then freeze.
        let mut qat = QatState::new(0.99).unwrap();
        for t in [[0usize, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11], tokens] {
            let _ = forward(&params, &cfg, &t, &mut qat).unwrap();
        }
        qat.set_training(false);

        let fq_logits = forward(&params, &cfg, &tokens, &mut qat).unwrap();
        let qm = QuantizedModel::from_params(&params, &qat);
        let int8_logits = forward_int8(&qm, &cfg, &tokens).unwrap();
        for (a, b) in fq_logits.data().iter().zip(int8_logits.data()) {
            assert!(
                (a - b).abs() < 1e-3,
                "INT8 and fake-quant paths diverged: {a} vs {b}"
            );
        }
    }

    #[test]
    fn int8_forward_requires_calibration() {
        let cfg = tiny_cfg();
        let params = init_random(&mut Rng::new(13), &cfg).unwrap();
        let qm = QuantizedModel::from_params(&params, &QatState::disabled());
        assert!(matches!(
            forward_int8(&qm, &cfg, &[0, 1, 2, 3]),
            Err(Error::MissingCalibration { .. })
        ));
    }
}
