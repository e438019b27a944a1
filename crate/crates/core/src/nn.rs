//! Attention building blocks: multi-head attention, pre-norm encoder layers,
//! and the parameter-spec helpers modules use to register their weights.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Feed-forward hidden width as a multiple of the model dimension.
pub const FFN_MULT: usize = 4;
/// Standard deviation for projection-weight init; biases start at zero.
pub const INIT_STD: f64 = 0.02;
/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f64),
    /// `normal(0, 1/sqrt(fan_in))`: keeps activations O(1) through plain
    /// (non-residual) projection pathways.
    FanIn(usize),
    Zeros,
    Ones,
}

/// Declared parameter: name, shape, initializer.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }
}

/// Materialize specs into a store with per-name seeded init.
pub fn register(store: &mut ParamStore, specs: &[ParamSpec], seed: u64) {
    for spec in specs {
        match spec.init {
            Init::Normal(std) => store.insert_normal(&spec.name, &spec.shape, std, seed),
            Init::FanIn(fan_in) => store.insert_normal(
                &spec.name,
                &spec.shape,
                1.0 / (fan_in.max(1) as f64).sqrt(),
                seed,
            ),
            Init::Zeros => store.insert(&spec.name, Tensor::zeros(&spec.shape)),
            Init::Ones => store.insert(&spec.name, Tensor::full(&spec.shape, 1.0)),
        }
    }
}

/// Spec for a plain projection outside the residual stream.
pub fn fan_in_proj(name: impl Into<String>, din: usize, dout: usize) -> ParamSpec {
    ParamSpec::new(name, vec![din, dout], Init::FanIn(din))
}

fn ln_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.g"), vec![d], Init::Ones),
        ParamSpec::new(format!("{prefix}.b"), vec![d], Init::Zeros),
    ]
}

fn proj_specs(prefix: &str, din: usize, dout: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.w"), vec![din, dout], Init::Normal(INIT_STD)),
        ParamSpec::new(format!("{prefix}.b"), vec![dout], Init::Zeros),
    ]
}

/// Parameter specs for one multi-head attention block under `prefix`.
pub fn attention_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for p in ["wq", "wk", "wv", "wo"] {
        specs.push(ParamSpec::new(
            format!("{prefix}.{p}"),
            vec![d, d],
            Init::Normal(INIT_STD),
        ));
    }
    for p in ["bq", "bk", "bv", "bo"] {
        specs.push(ParamSpec::new(format!("{prefix}.{p}"), vec![d], Init::Zeros));
    }
    specs
}

/// Parameter specs for one pre-norm encoder layer under `prefix`.
/// Cross-attention layers get a separate norm for the key/value source.
pub fn encoder_layer_specs(prefix: &str, d: usize, cross: bool) -> Vec<ParamSpec> {
    let mut specs = ln_specs(&format!("{prefix}.ln1"), d);
    if cross {
        specs.extend(ln_specs(&format!("{prefix}.ln_kv"), d));
    }
    specs.extend(attention_specs(&format!("{prefix}.attn"), d));
    specs.extend(ln_specs(&format!("{prefix}.ln2"), d));
    specs.extend(proj_specs(&format!("{prefix}.ffn1"), d, FFN_MULT * d));
    specs.extend(proj_specs(&format!("{prefix}.ffn2"), FFN_MULT * d, d));
    specs
}

/// Specs for a stack of `layers` encoder layers, `{prefix}.l{i}`.
pub fn encoder_stack_specs(prefix: &str, d: usize, layers: usize, cross: bool) -> Vec<ParamSpec> {
    (0..layers)
        .flat_map(|i| encoder_layer_specs(&format!("{prefix}.l{i}"), d, cross))
        .collect()
}

fn lin(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    ops::linear(g, x, w, Some(b))
}

/// Scaled dot-product multi-head attention, returning output and the
/// post-softmax attention weights `[B*heads, Lq, Lk]`.
///
/// `q_src: [B,Lq,D]`, `kv_src: [B,Lk,D]`; per-head scale `1/sqrt(D/heads)`.
pub fn multi_head_attention_full(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    q_src: Var,
    kv_src: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let qs = g.value(q_src).shape().to_vec();
    let ks = g.value(kv_src).shape().to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::ShapeMismatch(format!(
            "attention sources {:?} vs {:?}",
            qs, ks
        )));
    }
    let (b, lq, d) = (qs[0], qs[1], qs[2]);
    let lk = ks[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "model dim {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;

    let wq = g.param(store, &format!("{prefix}.wq"))?;
    let bq = g.param(store, &format!("{prefix}.bq"))?;
    let wk = g.param(store, &format!("{prefix}.wk"))?;
    let bk = g.param(store, &format!("{prefix}.bk"))?;
    let wv = g.param(store, &format!("{prefix}.wv"))?;
    let bv = g.param(store, &format!("{prefix}.bv"))?;
    let wo = g.param(store, &format!("{prefix}.wo"))?;
    let bo = g.param(store, &format!("{prefix}.bo"))?;

    let split = |g: &mut Graph, x: Var, l: usize| -> Result<Var> {
        let x = ops::reshape(g, x, vec![b, l, heads, dh])?;
        let x = ops::permute(g, x, &[0, 2, 1, 3])?;
        ops::reshape(g, x, vec![b * heads, l, dh])
    };

    let q = ops::linear(g, q_src, wq, Some(bq))?;
    let k = ops::linear(g, kv_src, wk, Some(bk))?;
    let v = ops::linear(g, kv_src, wv, Some(bv))?;
    let q = split(g, q, lq)?;
    let k = split(g, k, lk)?;
    let v = split(g, v, lk)?;

    let scores = ops::bmm(g, q, k, true)?;
    let scores = ops::scale(g, scores, 1.0 / (dh as f64).sqrt())?;
    let attn = ops::softmax_lastdim(g, scores)?;
    let ctx = ops::bmm(g, attn, v, false)?;

    let ctx = ops::reshape(g, ctx, vec![b, heads, lq, dh])?;
    let ctx = ops::permute(g, ctx, &[0, 2, 1, 3])?;
    let ctx = ops::reshape(g, ctx, vec![b, lq, d])?;
    let out = ops::linear(g, ctx, wo, Some(bo))?;
    Ok((out, attn))
}

pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    q_src: Var,
    kv_src: Var,
    heads: usize,
) -> Result<Var> {
    multi_head_attention_full(g, store, prefix, q_src, kv_src, heads).map(|(out, _)| out)
}

/// Pre-norm residual encoder layer: `x + MHA(LN(x), kv)` then `+ FFN(LN(.))`.
/// Pass `kv = None` for self-attention.
pub fn encoder_layer(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    kv: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let ln1g = g.param(store, &format!("{prefix}.ln1.g"))?;
    let ln1b = g.param(store, &format!("{prefix}.ln1.b"))?;
    let q_in = ops::layer_norm(g, x, ln1g, ln1b, LN_EPS)?;
    let kv_in = match kv {
        Some(kv_src) => {
            let lng = g.param(store, &format!("{prefix}.ln_kv.g"))?;
            let lnb = g.param(store, &format!("{prefix}.ln_kv.b"))?;
            ops::layer_norm(g, kv_src, lng, lnb, LN_EPS)?
        }
        None => q_in,
    };
    let attn = multi_head_attention(g, store, &format!("{prefix}.attn"), q_in, kv_in, heads)?;
    let x = ops::add(g, x, attn)?;

    let ln2g = g.param(store, &format!("{prefix}.ln2.g"))?;
    let ln2b = g.param(store, &format!("{prefix}.ln2.b"))?;
    let f_in = ops::layer_norm(g, x, ln2g, ln2b, LN_EPS)?;
    let h = lin(g, store, &format!("{prefix}.ffn1"), f_in)?;
    let h = ops::gelu(g, h)?;
    let h = lin(g, store, &format!("{prefix}.ffn2"), h)?;
    ops::add(g, x, h)
}

/// A stack of self-attention encoder layers named `{prefix}.l{i}`.
pub fn encoder_stack(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    layers: usize,
    heads: usize,
) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        h = encoder_layer(g, store, &format!("{prefix}.l{i}"), h, None, heads)?;
    }
    Ok(h)
}
