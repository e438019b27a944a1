//! Scene representation learning: visual token generation by spatial
//! attention, pooling to a single scene vector, and fusion of that vector
//! into each granularity's features.

use crate::error::{Error, Result};
use crate::featmap::FeatureMap;
use crate::graph::{Graph, Var};
use crate::nn::{encoder_layer, encoder_layer_specs, fan_in_proj, Init, ParamSpec, INIT_STD};
use crate::ops;
use crate::params::ParamStore;

/// Visual scene tokens `Z: [T,K,D]` and their spatial attention
/// `A: [T,K,H'·W']`; every attention row sums to 1.
#[derive(Clone, Copy, Debug)]
pub struct SceneTokens {
    pub tokens: Var,
    pub attention: Var,
}

/// Pooled scene vector `[1,D]`.
#[derive(Clone, Copy, Debug)]
pub struct SceneRepr {
    pub vector: Var,
}

pub fn scene_specs(
    channels: usize,
    fm_h: usize,
    fm_w: usize,
    token_count: usize,
    d: usize,
) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new("scene.pos", vec![channels, fm_h, fm_w], Init::Normal(INIT_STD)),
        fan_in_proj("scene.tok.w", channels, token_count),
        ParamSpec::new("scene.tok.b", vec![token_count], Init::Zeros),
        fan_in_proj("scene.proj.w", channels, d),
        ParamSpec::new("scene.proj.b", vec![d], Init::Zeros),
    ]
}

pub fn fusion_specs(d: usize) -> Vec<ParamSpec> {
    let mut specs = encoder_layer_specs("fusion.individual", d, true);
    specs.extend(encoder_layer_specs("fusion.social", d, true));
    specs.extend([
        fan_in_proj("fusion.global.fc1.w", 2 * d, 2 * d),
        ParamSpec::new("fusion.global.fc1.b", vec![2 * d], Init::Zeros),
        fan_in_proj("fusion.global.fc2.w", 2 * d, d),
        ParamSpec::new("fusion.global.fc2.b", vec![d], Init::Zeros),
    ]);
    specs
}

/// Generate visual tokens: add a learned positional encoding to the feature
/// map, project each position to `K` token logits, softmax over the spatial
/// positions, and project the attention-weighted feature sums to `D`.
pub fn scene_tokens(
    g: &mut Graph,
    store: &ParamStore,
    fm: &FeatureMap,
    token_count: usize,
    d: usize,
) -> Result<SceneTokens> {
    let shape = g.value(fm.map).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "feature map must be [T,C,H,W], got {:?}",
            shape
        )));
    }
    let (t, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let s = h * w;
    let pos = g.param(store, "scene.pos")?;
    let x = ops::add_broadcast0(g, fm.map, pos)?;
    let x = ops::reshape(g, x, vec![t, c, s])?;
    let x_sc = ops::permute(g, x, &[0, 2, 1])?; // [T,S,C]

    let tw = g.param(store, "scene.tok.w")?;
    let tb = g.param(store, "scene.tok.b")?;
    let logits = ops::linear(g, x_sc, tw, Some(tb))?; // [T,S,K]
    let logits = ops::permute(g, logits, &[0, 2, 1])?; // [T,K,S]
    let attention = ops::softmax_lastdim(g, logits)?;

    let weighted = ops::bmm(g, attention, x_sc, false)?; // [T,K,C]
    let pw = g.param(store, "scene.proj.w")?;
    let pb = g.param(store, "scene.proj.b")?;
    let tokens = ops::linear(g, weighted, pw, Some(pb))?;
    let _ = (token_count, d);
    Ok(SceneTokens { tokens, attention })
}

/// Mean over the time and token dimensions: `[T,K,D] -> [1,D]`.
pub fn scene_pool(g: &mut Graph, tokens: &SceneTokens) -> Result<SceneRepr> {
    let d = *g.value(tokens.tokens).shape().last().unwrap();
    let m = ops::mean_axis(g, tokens.tokens, 0)?; // [K,D]
    let m = ops::mean_axis(g, m, 0)?; // [D]
    let vector = ops::reshape(g, m, vec![1, d])?;
    Ok(SceneRepr { vector })
}

/// Cross-attention fusion: each feature row queries the single scene vector;
/// a pre-norm residual block identical in structure to an encoder layer.
/// Used for individual rows `[N,D]` and social-group rows `[G,D]` with their
/// own parameter prefixes.
pub fn fuse_rows(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    rows: Var,
    scene: &SceneRepr,
    heads: usize,
) -> Result<Var> {
    let shape = g.value(rows).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "fusion input must be [N,D], got {:?}",
            shape
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    let q = ops::reshape(g, rows, vec![1, n, d])?;
    let kv = ops::reshape(g, scene.vector, vec![1, 1, d])?;
    let fused = encoder_layer(g, store, prefix, q, Some(kv), heads)?;
    ops::reshape(g, fused, vec![n, d])
}

/// Global fusion: concatenate the global feature with the scene vector and
/// map `[1,2D]` back to `[1,D]` through a two-layer MLP.
pub fn fuse_global(
    g: &mut Graph,
    store: &ParamStore,
    global: Var,
    scene: &SceneRepr,
) -> Result<Var> {
    let cat = ops::concat(g, 1, &[global, scene.vector])?;
    let w1 = g.param(store, "fusion.global.fc1.w")?;
    let b1 = g.param(store, "fusion.global.fc1.b")?;
    let h = ops::linear(g, cat, w1, Some(b1))?;
    let h = ops::gelu(g, h)?;
    let w2 = g.param(store, "fusion.global.fc2.w")?;
    let b2 = g.param(store, "fusion.global.fc2.b")?;
    ops::linear(g, h, w2, Some(b2))
}
