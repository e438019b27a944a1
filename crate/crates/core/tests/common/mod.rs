//! Helpers shared by the integration test targets.
#![allow(dead_code)] // each test target uses a different subset

use panrec_core::featmap::{BoxTrack, FeatureMap};
use panrec_core::gradcheck::{finite_diff_check, GradCheckReport};
use panrec_core::graph::{Graph, Var};
use panrec_core::model::ModelConfig;
use panrec_core::nn;
use panrec_core::ops;
use panrec_core::params::ParamStore;
use panrec_core::synth::ClipSample;
use panrec_core::tensor::Tensor;
use panrec_core::Result;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type BuildFn = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var>>;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::new(
        shape.to_vec(),
        (0..shape.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

/// Central finite-difference report for a scalar graph builder.
pub fn fd_report(store: &ParamStore, build: &BuildFn) -> GradCheckReport {
    let f = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(0);
        let v = build(&mut g, s)?;
        Ok(g.value(v).item())
    };
    let grad_f = |s: &ParamStore| {
        let mut g = Graph::new(0);
        let v = build(&mut g, s)?;
        g.param_grads(v)
    };
    finite_diff_check(&f, &grad_f, store, 1e-5).expect("finite difference check ran")
}

/// Reduce a tensor-valued var to a scalar through a fixed pseudo-random
/// probe so every output coordinate influences the loss distinctly.
pub fn probe_to_scalar(g: &mut Graph, out: Var, probe_seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe = g.input(random_tensor(&mut rng, &shape))?;
    let weighted = ops::mul(g, out, probe)?;
    ops::mean_all(g, weighted)
}

/// Named scalar-valued graph builders covering every differentiable
/// operation, each with its own parameter store.
pub fn all_op_checks() -> Vec<(&'static str, ParamStore, BuildFn)> {
    let mut cases: Vec<(&'static str, ParamStore, BuildFn)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1234);

    // elementwise / bias ops on one [3,4] parameter
    let mut s = ParamStore::new();
    s.insert("x", random_tensor(&mut rng, &[3, 4]));
    s.insert("b", random_tensor(&mut rng, &[4]));
    cases.push((
        "add_bias_gelu",
        s,
        Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let b = g.param(s, "b")?;
            let y = ops::add_bias(g, x, b)?;
            let y = ops::gelu(g, y)?;
            probe_to_scalar(g, y, 10)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("a", random_tensor(&mut rng, &[2, 5]));
    s.insert("b", random_tensor(&mut rng, &[2, 5]));
    cases.push((
        "add_mul_scale",
        s,
        Box::new(|g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let sum = ops::add(g, a, b)?;
            let prod = ops::mul(g, sum, a)?;
            let scaled = ops::scale(g, prod, -1.7)?;
            probe_to_scalar(g, scaled, 11)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("x", random_tensor(&mut rng, &[2, 3, 4]));
    s.insert("p", random_tensor(&mut rng, &[3, 4]));
    cases.push((
        "add_broadcast0",
        s,
        Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let p = g.param(s, "p")?;
            let y = ops::add_broadcast0(g, x, p)?;
            probe_to_scalar(g, y, 12)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("a", random_tensor(&mut rng, &[3, 4]));
    s.insert("b", random_tensor(&mut rng, &[4, 2]));
    cases.push((
        "matmul",
        s,
        Box::new(|g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let y = ops::matmul(g, a, b)?;
            probe_to_scalar(g, y, 13)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("a", random_tensor(&mut rng, &[2, 3, 4]));
    s.insert("b", random_tensor(&mut rng, &[2, 4, 5]));
    s.insert("bt", random_tensor(&mut rng, &[2, 5, 4]));
    cases.push((
        "bmm_both_layouts",
        s,
        Box::new(|g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let bt = g.param(s, "bt")?;
            let y1 = ops::bmm(g, a, b, false)?;
            let y2 = ops::bmm(g, a, bt, true)?;
            let y = ops::add(g, y1, y2)?;
            probe_to_scalar(g, y, 14)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("x", random_tensor(&mut rng, &[2, 3, 4]));
    cases.push((
        "reshape_permute_slice_concat",
        s,
        Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let p = ops::permute(g, x, &[1, 2, 0])?;
            let r = ops::reshape(g, p, vec![12, 2])?;
            let top = ops::slice(g, r, 0, 0, 5)?;
            let bottom = ops::slice(g, r, 0, 5, 7)?;
            let back = ops::concat(g, 0, &[bottom, top])?;
            probe_to_scalar(g, back, 15)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("x", random_tensor(&mut rng, &[4, 3]));
    cases.push((
        "gather_and_max_rows",
        s,
        Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let gathered = ops::gather_rows(g, x, &[2, 0, 2, 3])?;
            let m = ops::max_rows(g, gathered)?;
            probe_to_scalar(g, m, 16)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("x", random_tensor(&mut rng, &[3, 2, 4]));
    cases.push((
        "mean_axis",
        s,
        Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let m = ops::mean_axis(g, x, 1)?;
            probe_to_scalar(g, m, 17)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("x", random_tensor(&mut rng, &[3, 5]));
    cases.push((
        "softmax_lastdim",
        s,
        Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let y = ops::softmax_lastdim(g, x)?;
            probe_to_scalar(g, y, 18)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("x", random_tensor(&mut rng, &[3, 6]));
    s.insert("gain", random_tensor(&mut rng, &[6]));
    s.insert("bias", random_tensor(&mut rng, &[6]));
    cases.push((
        "layer_norm",
        s,
        Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let gain = g.param(s, "gain")?;
            let bias = g.param(s, "bias")?;
            let y = ops::layer_norm(g, x, gain, bias, 1e-5)?;
            probe_to_scalar(g, y, 19)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("z", random_tensor(&mut rng, &[2, 4]));
    cases.push((
        "bce_with_logits",
        s,
        Box::new(|g, s| {
            let z = g.param(s, "z")?;
            let targets =
                Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
            ops::bce_with_logits(g, z, &targets)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("x", random_tensor(&mut rng, &[4, 3]));
    cases.push((
        "pairwise_concat_mul",
        s,
        Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let y = ops::pairwise_concat_mul(g, x)?;
            probe_to_scalar(g, y, 20)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("x", random_tensor(&mut rng, &[4, 4]));
    cases.push((
        "offdiag",
        s,
        Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let y = ops::offdiag(g, x)?;
            probe_to_scalar(g, y, 21)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("x", random_tensor(&mut rng, &[2, 3, 8, 8]));
    cases.push((
        "patchify",
        s,
        Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let y = ops::patchify(g, x, 4)?;
            probe_to_scalar(g, y, 22)
        }),
    ));

    // roi_align gradient w.r.t. the feature map itself
    let mut s = ParamStore::new();
    s.insert("fm", random_tensor(&mut rng, &[2, 3, 4, 4]));
    cases.push((
        "roi_align_wrt_feature_map",
        s,
        Box::new(|g, s| {
            let map = g.param(s, "fm")?;
            let fm = FeatureMap { map, stride: 1.0 };
            let boxes = vec![
                BoxTrack::new(0, vec![[0.7, 0.4, 2.9, 3.1], [0.3, 0.8, 3.3, 2.7]], 4, 4).unwrap(),
                BoxTrack::new(1, vec![[1.1, 1.6, 3.8, 3.9], [0.2, 0.1, 1.9, 1.8]], 4, 4).unwrap(),
            ];
            let rois = panrec_core::featmap::roi_align(g, &fm, &boxes, 2, 2)?;
            probe_to_scalar(g, rois, 23)
        }),
    ));

    // multi-head attention and a full encoder layer
    let mut s = ParamStore::new();
    nn::register(&mut s, &nn::attention_specs("attn", 8), 77);
    s.insert("q", random_tensor(&mut rng, &[2, 3, 8]));
    s.insert("kv", random_tensor(&mut rng, &[2, 2, 8]));
    cases.push((
        "multi_head_attention",
        s,
        Box::new(|g, s| {
            let q = g.param(s, "q")?;
            let kv = g.param(s, "kv")?;
            let y = nn::multi_head_attention(g, s, "attn", q, kv, 2)?;
            probe_to_scalar(g, y, 24)
        }),
    ));

    let mut s = ParamStore::new();
    nn::register(&mut s, &nn::encoder_layer_specs("enc", 8, false), 78);
    s.insert("x", random_tensor(&mut rng, &[2, 3, 8]));
    cases.push((
        "encoder_layer",
        s,
        Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let y = nn::encoder_layer(g, s, "enc", x, None, 2)?;
            probe_to_scalar(g, y, 25)
        }),
    ));

    let mut s = ParamStore::new();
    nn::register(&mut s, &nn::encoder_layer_specs("enc", 8, true), 79);
    s.insert("x", random_tensor(&mut rng, &[1, 3, 8]));
    s.insert("kv", random_tensor(&mut rng, &[1, 1, 8]));
    cases.push((
        "cross_encoder_layer",
        s,
        Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let kv = g.param(s, "kv")?;
            let y = nn::encoder_layer(g, s, "enc", x, Some(kv), 4)?;
            probe_to_scalar(g, y, 26)
        }),
    ));

    // scene token generation end to end
    let mut s = ParamStore::new();
    nn::register(
        &mut s,
        &panrec_core::scene::scene_specs(3, 2, 2, 2, 6),
        80,
    );
    s.insert("fm", random_tensor(&mut rng, &[2, 3, 2, 2]));
    cases.push((
        "scene_tokens",
        s,
        Box::new(|g, s| {
            let map = g.param(s, "fm")?;
            let fm = FeatureMap { map, stride: 8.0 };
            let tokens = panrec_core::scene::scene_tokens(g, s, &fm, 2, 6)?;
            probe_to_scalar(g, tokens.tokens, 27)
        }),
    ));

    cases
}

/// Hand-built clip at the tiny configuration's frame size, bypassing the
/// generator's geometric minimums.
pub fn handmade_clip(cfg: &ModelConfig, n: usize, t: usize, seed: u64) -> ClipSample {
    panrec_core::synth::probe_clip(&cfg.taxonomy, cfg.frame_h, cfg.frame_w, n, t, seed).unwrap()
}
