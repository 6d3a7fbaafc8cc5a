//! A small post-norm BERT encoder with three ways of fusing an external
//! embedding sequence into the hidden states after a chosen layer:
//!
//! * **gated**: `H' = H + g ⊙ tanh(I·Wᵀ + b)` with a zero-initialized gate `g`
//! * **ungated**: `H' = H + tanh(I·Wᵀ + b)`
//! * **attention**: `H' = H + MultiHeadAtt(H, I, I)`
//!
//! The functions below each build one piece of the forward pass on a
//! [`Graph`]; [`Model`] wires them together over a [`ParamStore`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::tokenize::WordPieceSequence;

/// Additive logit for masked attention keys.
pub const MASK_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InjectionMode {
    None,
    Gated,
    Ungated,
    Attention,
}

impl InjectionMode {
    pub const ALL: [InjectionMode; 4] = [
        InjectionMode::None,
        InjectionMode::Gated,
        InjectionMode::Ungated,
        InjectionMode::Attention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InjectionMode::None => "none",
            InjectionMode::Gated => "gated",
            InjectionMode::Ungated => "ungated",
            InjectionMode::Attention => "attention",
        }
    }

    pub fn uses_injection(self) -> bool {
        self != InjectionMode::None
    }
}

impl fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(InjectionMode::None),
            "gated" => Ok(InjectionMode::Gated),
            "ungated" => Ok(InjectionMode::Ungated),
            "attention" => Ok(InjectionMode::Attention),
            other => Err(Error::Config(format!(
                "unknown injection mode `{other}` (expected none|gated|ungated|attention)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of transformer blocks.
    pub layers: usize,
    pub hidden: usize,
    /// Width of the external embeddings.
    pub ext_dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub injection_mode: InjectionMode,
    /// Blocks run before injecting; 0 injects into the embedding output.
    pub injection_layer: usize,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: 4 blocks of width 64 with 4 heads.
    pub fn desk(vocab_size: usize, ext_dim: usize) -> Self {
        ModelConfig {
            layers: 4,
            hidden: 64,
            ext_dim,
            heads: 4,
            ffn: 256,
            max_seq_len: 64,
            vocab_size,
            num_classes: 2,
            injection_mode: InjectionMode::Gated,
            injection_layer: 0,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn == 0 {
            return fail("layers, hidden, heads and ffn must all be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if self.injection_layer >= self.layers {
            return fail(format!(
                "injection_layer {} must be below the number of layers {}",
                self.injection_layer, self.layers
            ));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.max_seq_len < 3 {
            return fail(format!("max_seq_len must be at least 3, got {}", self.max_seq_len));
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.injection_mode.uses_injection() && self.ext_dim == 0 {
            return fail(format!("injection mode {} needs ext_dim > 0", self.injection_mode));
        }
        if !(self.layer_norm_eps > 0.0) || !(self.init_std >= 0.0) {
            return fail("layer_norm_eps must be positive and init_std non-negative".into());
        }
        Ok(())
    }
}

/// Scalar parameters introduced by an injection mechanism.
///
/// gated: `D·E + D + D` (projection, bias, gate); ungated: `D·E + D`;
/// attention: `2D² + 2ED + 4D` (query/output `D×D`, key/value `E×D`, four
/// biases).
pub fn count_injection_params(mode: InjectionMode, hidden: usize, ext_dim: usize) -> Result<usize> {
    if hidden == 0 {
        return Err(Error::Invalid("hidden size must be at least 1".into()));
    }
    let (d, e) = (hidden, ext_dim);
    Ok(match mode {
        InjectionMode::None => 0,
        InjectionMode::Gated => d * (e + 2),
        InjectionMode::Ungated => d * (e + 1),
        InjectionMode::Attention => 2 * d * d + 2 * e * d + 4 * d,
    })
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Ids of one multi-head attention's weights; key/value inputs may be
/// narrower than the hidden size.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub attn: AttentionParams,
    pub attn_norm: LayerNormParams,
    pub ffn_in: ParamId,
    pub ffn_in_bias: ParamId,
    pub ffn_out: ParamId,
    pub ffn_out_bias: ParamId,
    pub ffn_norm: LayerNormParams,
}

#[derive(Clone, Copy, Debug)]
pub enum InjectionParams {
    None,
    Gated {
        proj: ParamId,
        proj_bias: ParamId,
        gate: ParamId,
    },
    Ungated {
        proj: ParamId,
        proj_bias: ParamId,
    },
    Attention(AttentionParams),
}

/// Where every tensor of a model lives in its [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub word: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
    pub embed_norm: LayerNormParams,
    pub blocks: Vec<BlockParams>,
    pub injection: InjectionParams,
    pub classifier: ParamId,
    pub classifier_bias: ParamId,
}

/// Prefix shared by every injection-specific parameter name.
pub const INJECTION_PREFIX: &str = "inject.";
pub const GATE_PARAM: &str = "inject.gate";

fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, e, f) = (c.hidden, c.ext_dim, c.ffn);
    let mut specs = vec![
        ("embed.word".to_string(), vec![c.vocab_size, d], Init::Normal),
        ("embed.position".to_string(), vec![c.max_seq_len, d], Init::Normal),
        ("embed.segment".to_string(), vec![2, d], Init::Normal),
        ("embed.norm.gamma".to_string(), vec![d], Init::Ones),
        ("embed.norm.beta".to_string(), vec![d], Init::Zeros),
    ];
    let attention = |prefix: &str, kv_in: usize, specs: &mut Vec<(String, Vec<usize>, Init)>| {
        for (name, shape, init) in [
            ("wq", vec![d, d], Init::Normal),
            ("bq", vec![d], Init::Zeros),
            ("wk", vec![kv_in, d], Init::Normal),
            ("bk", vec![d], Init::Zeros),
            ("wv", vec![kv_in, d], Init::Normal),
            ("bv", vec![d], Init::Zeros),
            ("wo", vec![d, d], Init::Normal),
            ("bo", vec![d], Init::Zeros),
        ] {
            specs.push((format!("{prefix}.{name}"), shape, init));
        }
    };
    for l in 0..c.layers {
        let p = format!("block{l}");
        attention(&format!("{p}.attn"), d, &mut specs);
        specs.push((format!("{p}.attn_norm.gamma"), vec![d], Init::Ones));
        specs.push((format!("{p}.attn_norm.beta"), vec![d], Init::Zeros));
        specs.push((format!("{p}.ffn.w_in"), vec![d, f], Init::Normal));
        specs.push((format!("{p}.ffn.b_in"), vec![f], Init::Zeros));
        specs.push((format!("{p}.ffn.w_out"), vec![f, d], Init::Normal));
        specs.push((format!("{p}.ffn.b_out"), vec![d], Init::Zeros));
        specs.push((format!("{p}.ffn_norm.gamma"), vec![d], Init::Ones));
        specs.push((format!("{p}.ffn_norm.beta"), vec![d], Init::Zeros));
    }
    specs.push(("classifier.weight".into(), vec![c.num_classes, d], Init::Normal));
    specs.push(("classifier.bias".into(), vec![c.num_classes], Init::Zeros));
    // Injection tensors come last so that every shared tensor draws the same
    // random values whatever the mode.
    match c.injection_mode {
        InjectionMode::None => {}
        InjectionMode::Gated | InjectionMode::Ungated => {
            specs.push(("inject.proj.weight".into(), vec![d, e], Init::Normal));
            specs.push(("inject.proj.bias".into(), vec![d], Init::Zeros));
            if c.injection_mode == InjectionMode::Gated {
                specs.push((GATE_PARAM.into(), vec![d], Init::Zeros));
            }
        }
        InjectionMode::Attention => attention("inject.attn", e, &mut specs),
    }
    specs
}

fn layout(c: &ModelConfig, store: &ParamStore) -> Result<ParamLayout> {
    let id = |name: &str| {
        store
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    };
    let attention = |p: &str| -> Result<AttentionParams> {
        Ok(AttentionParams {
            wq: id(&format!("{p}.wq"))?,
            bq: id(&format!("{p}.bq"))?,
            wk: id(&format!("{p}.wk"))?,
            bk: id(&format!("{p}.bk"))?,
            wv: id(&format!("{p}.wv"))?,
            bv: id(&format!("{p}.bv"))?,
            wo: id(&format!("{p}.wo"))?,
            bo: id(&format!("{p}.bo"))?,
        })
    };
    let norm = |p: &str| -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            gamma: id(&format!("{p}.gamma"))?,
            beta: id(&format!("{p}.beta"))?,
        })
    };
    let blocks = (0..c.layers)
        .map(|l| {
            let p = format!("block{l}");
            Ok(BlockParams {
                attn: attention(&format!("{p}.attn"))?,
                attn_norm: norm(&format!("{p}.attn_norm"))?,
                ffn_in: id(&format!("{p}.ffn.w_in"))?,
                ffn_in_bias: id(&format!("{p}.ffn.b_in"))?,
                ffn_out: id(&format!("{p}.ffn.w_out"))?,
                ffn_out_bias: id(&format!("{p}.ffn.b_out"))?,
                ffn_norm: norm(&format!("{p}.ffn_norm"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let injection = match c.injection_mode {
        InjectionMode::None => InjectionParams::None,
        InjectionMode::Gated => InjectionParams::Gated {
            proj: id("inject.proj.weight")?,
            proj_bias: id("inject.proj.bias")?,
            gate: id(GATE_PARAM)?,
        },
        InjectionMode::Ungated => InjectionParams::Ungated {
            proj: id("inject.proj.weight")?,
            proj_bias: id("inject.proj.bias")?,
        },
        InjectionMode::Attention => InjectionParams::Attention(attention("inject.attn")?),
    };
    Ok(ParamLayout {
        word: id("embed.word")?,
        position: id("embed.position")?,
        segment: id("embed.segment")?,
        embed_norm: norm("embed.norm")?,
        blocks,
        injection,
        classifier: id("classifier.weight")?,
        classifier_bias: id("classifier.bias")?,
    })
}

/// Samples from N(0, std²) truncated to ±2 std.
fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64, n: usize) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, std).expect("finite positive std");
    (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: ParamStore,
}

impl Model {
    /// Fresh model: truncated-normal matrices, zero biases, unit norms and
    /// an all-zero gate.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, init) in param_specs(&config) {
            let n = shape.iter().product();
            let data = match init {
                Init::Normal => truncated_normal(rng, config.init_std, n),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            params.add(name, Tensor::new(shape, data)?)?;
        }
        let layout = layout(&config, &params)?;
        Ok(Model { config, layout, params })
    }

    /// Wraps an existing store, checking it holds exactly the tensors the
    /// config implies.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            let expected: Vec<&str> = specs.iter().map(|s| s.0.as_str()).collect();
            let extra: Vec<&str> = params
                .iter()
                .map(|(_, n, _)| n)
                .filter(|n| !expected.contains(n))
                .collect();
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for mode {}, found {} (unexpected: {extra:?})",
                specs.len(),
                config.injection_mode,
                params.len()
            )));
        }
        for (name, shape, _) in &specs {
            let t = params
                .by_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let layout = layout(&config, &params)?;
        Ok(Model { config, layout, params })
    }

    pub fn gate(&self) -> Option<&Tensor> {
        match self.layout.injection {
            InjectionParams::Gated { gate, .. } => Some(self.params.get(gate)),
            _ => None,
        }
    }

    pub fn gate_mut(&mut self) -> Option<&mut Tensor> {
        match self.layout.injection {
            InjectionParams::Gated { gate, .. } => Some(self.params.get_mut(gate)),
            _ => None,
        }
    }

    /// Element count of the injection-specific tensors actually allocated.
    pub fn injection_param_count(&self) -> usize {
        self.params.numel_with_prefix(INJECTION_PREFIX)
    }

    /// Builds the forward pass on `g` (which must hold a store with this
    /// model's layout) and returns the `[1×C]` logits.
    pub fn forward(&self, g: &mut Graph<'_>, seq: &WordPieceSequence, injection: Option<&Tensor>) -> Result<Var> {
        let c = &self.config;
        let n = seq.len();
        if n > c.max_seq_len {
            return Err(Error::Invalid(format!(
                "sequence of {n} pieces exceeds max_seq_len {}",
                c.max_seq_len
            )));
        }
        let inj = match (c.injection_mode.uses_injection(), injection) {
            (false, _) => None,
            (true, Some(t)) => {
                if t.shape() != [n, c.ext_dim] {
                    return Err(Error::shape("injection sequence", t.shape(), &[n, c.ext_dim]));
                }
                Some(g.constant(t.clone()))
            }
            (true, None) => {
                return Err(Error::Invalid(format!(
                    "mode {} needs an injection sequence",
                    c.injection_mode
                )))
            }
        };
        let mask = key_mask(g, seq);

        let mut h = embed_inputs(g, &self.layout, seq, c.layer_norm_eps)?;
        for (l, block) in self.layout.blocks.iter().enumerate() {
            if l == c.injection_layer {
                if let Some(i) = inj {
                    h = self.inject(g, h, i, mask)?;
                }
            }
            h = transformer_block(g, h, block, c.heads, Some(mask), c.layer_norm_eps)?;
        }
        let w = g.param(self.layout.classifier);
        let b = g.param(self.layout.classifier_bias);
        Ok(classify(g, h, w, b)?.0)
    }

    fn inject(&self, g: &mut Graph<'_>, h: Var, i: Var, mask: Var) -> Result<Var> {
        match self.layout.injection {
            InjectionParams::None => Ok(h),
            InjectionParams::Gated { proj, proj_bias, gate } => {
                let (w, b, gate) = (g.param(proj), g.param(proj_bias), g.param(gate));
                let p = project_injection(g, i, w, b)?;
                inject_gated(g, h, p, gate)
            }
            InjectionParams::Ungated { proj, proj_bias } => {
                let (w, b) = (g.param(proj), g.param(proj_bias));
                let p = project_injection(g, i, w, b)?;
                inject_ungated(g, h, p)
            }
            InjectionParams::Attention(ap) => {
                let w = AttentionVars::from_params(g, &ap);
                inject_attention(g, h, i, &w, self.config.heads, Some(mask))
            }
        }
    }

    /// Class probabilities for one packed pair.
    pub fn predict_proba(&self, seq: &WordPieceSequence, injection: Option<&Tensor>) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(&self.params);
        let logits = self.forward(&mut g, seq, injection)?;
        Ok(g.value(logits).softmax(1)?.into_data())
    }

    /// Mean cross-entropy over `batch` built on one graph.
    pub fn batch_loss(&self, g: &mut Graph<'_>, batch: &[(&WordPieceSequence, Option<&Tensor>, usize)]) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (seq, inj, label) in batch {
            let logits = self.forward(g, seq, *inj)?;
            let ce = g.cross_entropy(logits, &[*label])?;
            total = Some(match total {
                None => ce,
                Some(t) => g.add(t, ce)?,
            });
        }
        let total = total.ok_or_else(|| Error::Invalid("empty batch".into()))?;
        g.scale(total, 1.0 / batch.len() as f64)
    }
}

/// Attention weights as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionVars {
    pub fn from_params(g: &mut Graph<'_>, p: &AttentionParams) -> Self {
        AttentionVars {
            wq: g.param(p.wq),
            bq: g.param(p.bq),
            wk: g.param(p.wk),
            bk: g.param(p.bk),
            wv: g.param(p.wv),
            bv: g.param(p.bv),
            wo: g.param(p.wo),
            bo: g.param(p.bo),
        }
    }
}

/// Additive key mask: 0 for real positions, [`MASK_LOGIT`] for `[PAD]`.
pub fn key_mask(g: &mut Graph<'_>, seq: &WordPieceSequence) -> Var {
    let m = seq
        .attention_mask()
        .into_iter()
        .map(|keep| if keep { 0.0 } else { MASK_LOGIT })
        .collect();
    g.constant(Tensor::vector(m))
}

/// `LayerNorm(word + position + segment)` for every position.
pub fn embed_inputs(g: &mut Graph<'_>, layout: &ParamLayout, seq: &WordPieceSequence, eps: f64) -> Result<Var> {
    let words: Vec<usize> = seq.piece_ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..seq.len()).collect();
    let segments: Vec<usize> = seq.segment_ids.iter().map(|&s| s as usize).collect();
    let (tw, tp, ts) = (g.param(layout.word), g.param(layout.position), g.param(layout.segment));
    let ew = g.gather(tw, &words)?;
    let ep = g.gather(tp, &positions)?;
    let es = g.gather(ts, &segments)?;
    let sum = g.add(ew, ep)?;
    let sum = g.add(sum, es)?;
    let (gamma, beta) = (g.param(layout.embed_norm.gamma), g.param(layout.embed_norm.beta));
    g.layer_norm(sum, gamma, beta, eps)
}

/// Multi-head scaled dot-product attention; see
/// [`multihead_attention_with_probs`].
pub fn multihead_attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    w: &AttentionVars,
    heads: usize,
    key_mask: Option<Var>,
) -> Result<Var> {
    Ok(multihead_attention_with_probs(g, q, k, v, w, heads, key_mask)?.0)
}

/// Projects queries, keys and values, attends per head with scale
/// `1/sqrt(D/heads)`, concatenates the heads and applies the output
/// projection. Also returns each head's `[N_q×N_k]` attention weights.
pub fn multihead_attention_with_probs(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    w: &AttentionVars,
    heads: usize,
    key_mask: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let d = g.value(w.wq).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Invalid(format!("{heads} heads do not divide hidden size {d}")));
    }
    if g.value(k).rows() != g.value(v).rows() {
        return Err(Error::shape(
            "multihead_attention",
            g.value(k).shape(),
            g.value(v).shape(),
        ));
    }
    let dh = d / heads;
    let qp = g.matmul(q, w.wq)?;
    let qp = g.add_row(qp, w.bq)?;
    // The key bias shifts every logit of a row by the same q·b_K, which the
    // softmax cancels, so it is left out; `bk` stays in the layout and gets
    // an exactly zero gradient.
    let kp = g.matmul(k, w.wk)?;
    let vp = g.matmul(v, w.wv)?;
    let vp = g.add_row(vp, w.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut ctx = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(qp, h * dh, dh)?;
        let kh = g.slice_cols(kp, h * dh, dh)?;
        let vh = g.slice_cols(vp, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let mut scores = g.scale(scores, scale)?;
        if let Some(m) = key_mask {
            scores = g.add_row(scores, m)?;
        }
        let p = g.softmax(scores)?;
        ctx.push(g.matmul(p, vh)?);
        probs.push(p);
    }
    let cat = if heads == 1 { ctx[0] } else { g.concat_cols(&ctx)? };
    let out = g.matmul(cat, w.wo)?;
    Ok((g.add_row(out, w.bo)?, probs))
}

/// Post-norm encoder block:
/// `M = LN(H + MHA(H)); H' = LN(M + FFN(M))`.
pub fn transformer_block(
    g: &mut Graph<'_>,
    h: Var,
    block: &BlockParams,
    heads: usize,
    key_mask: Option<Var>,
    eps: f64,
) -> Result<Var> {
    let attn = AttentionVars::from_params(g, &block.attn);
    let a = multihead_attention(g, h, h, h, &attn, heads, key_mask)?;
    let res = g.add(h, a)?;
    let (g1, b1) = (g.param(block.attn_norm.gamma), g.param(block.attn_norm.beta));
    let m = g.layer_norm(res, g1, b1, eps)?;

    let (w_in, b_in) = (g.param(block.ffn_in), g.param(block.ffn_in_bias));
    let (w_out, b_out) = (g.param(block.ffn_out), g.param(block.ffn_out_bias));
    let f = g.matmul(m, w_in)?;
    let f = g.add_row(f, b_in)?;
    let f = g.gelu(f)?;
    let f = g.matmul(f, w_out)?;
    let f = g.add_row(f, b_out)?;
    let res = g.add(m, f)?;
    let (g2, b2) = (g.param(block.ffn_norm.gamma), g.param(block.ffn_norm.beta));
    g.layer_norm(res, g2, b2, eps)
}

/// `P = tanh(I·Wᵀ + b)` with `W: [D×E]`.
pub fn project_injection(g: &mut Graph<'_>, injection: Var, weight: Var, bias: Var) -> Result<Var> {
    let p = g.matmul_nt(injection, weight)?;
    let p = g.add_row(p, bias)?;
    g.tanh(p)
}

/// `H + g ⊙ P`, the gate broadcast over rows.
pub fn inject_gated(g: &mut Graph<'_>, h: Var, projected: Var, gate: Var) -> Result<Var> {
    let scaled = g.mul_row(projected, gate)?;
    g.add(h, scaled)
}

/// `H + P`.
pub fn inject_ungated(g: &mut Graph<'_>, h: Var, projected: Var) -> Result<Var> {
    g.add(h, projected)
}

/// `H + MultiHeadAtt(H, I, I)`: queries from the hidden states, keys and
/// values from the injection sequence.
pub fn inject_attention(
    g: &mut Graph<'_>,
    h: Var,
    injection: Var,
    w: &AttentionVars,
    heads: usize,
    key_mask: Option<Var>,
) -> Result<Var> {
    let a = multihead_attention(g, h, injection, injection, w, heads, key_mask)?;
    g.add(h, a)
}

/// Logits and probabilities from the first (`[CLS]`) row.
pub fn classify(g: &mut Graph<'_>, h: Var, weight: Var, bias: Var) -> Result<(Var, Tensor)> {
    let c = g.select_row(h, 0)?;
    let logits = g.matmul_nt(c, weight)?;
    let logits = g.add_row(logits, bias)?;
    let probs = g.value(logits).softmax(1)?;
    Ok((logits, probs))
}
