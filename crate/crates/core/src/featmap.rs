//! Scene feature maps from synthetic frames, and per-individual crops.
//!
//! The backbone is a deterministic two-stage strided linear-mixing stub with
//! total stride 8: `4x4` patches to a mid width, then `2x2` patches to the
//! output channel count. It keeps the interface and differentiability of a
//! real backbone at desk scale.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{fan_in_proj, Init, ParamSpec};
use crate::ops;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Total spatial stride of the backbone stub.
pub const BACKBONE_STRIDE: usize = 8;

/// Scene feature maps `[T, C, H', W']` with the stride that maps frame pixel
/// coordinates onto feature cells.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub map: Var,
    pub stride: f64,
}

/// Per-frame axis-aligned boxes `(x1, y1, x2, y2)` for one individual.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxTrack {
    pub id: usize,
    pub boxes: Vec<[f64; 4]>,
}

impl BoxTrack {
    pub fn new(id: usize, boxes: Vec<[f64; 4]>, frame_w: usize, frame_h: usize) -> Result<Self> {
        for (t, b) in boxes.iter().enumerate() {
            let [x1, y1, x2, y2] = *b;
            if !(x2 > x1 && y2 > y1) {
                return Err(Error::InvalidInput(format!(
                    "degenerate box at frame {t}: {b:?}"
                )));
            }
            if x1 < 0.0 || y1 < 0.0 || x2 > frame_w as f64 || y2 > frame_h as f64 {
                return Err(Error::InvalidInput(format!(
                    "box out of bounds at frame {t}: {b:?}"
                )));
            }
        }
        Ok(Self { id, boxes })
    }
}

fn mid_channels(channels: usize) -> usize {
    (channels / 2).max(2)
}

pub fn backbone_specs(channels: usize) -> Vec<ParamSpec> {
    let mid = mid_channels(channels);
    vec![
        fan_in_proj("backbone.stage1.w", 3 * 16, mid),
        ParamSpec::new("backbone.stage1.b", vec![mid], Init::Zeros),
        fan_in_proj("backbone.stage2.w", mid * 4, channels),
        ParamSpec::new("backbone.stage2.b", vec![channels], Init::Zeros),
    ]
}

pub fn roi_proj_specs(channels: usize, roi_size: usize, dim: usize) -> Vec<ParamSpec> {
    vec![
        fan_in_proj("roi.proj.w", channels * roi_size * roi_size, dim),
        ParamSpec::new("roi.proj.b", vec![dim], Init::Zeros),
    ]
}

/// One strided linear-mixing stage: patchify, project, restore spatial layout.
fn mixing_stage(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    patch: usize,
    out_channels: usize,
) -> Result<Var> {
    let (t, h, w) = {
        let s = g.value(x).shape();
        (s[0], s[2], s[3])
    };
    let p = ops::patchify(g, x, patch)?;
    let wv = g.param(store, &format!("{prefix}.w"))?;
    let bv = g.param(store, &format!("{prefix}.b"))?;
    let p = ops::linear(g, p, wv, Some(bv))?;
    let p = ops::permute(g, p, &[0, 2, 1])?;
    ops::reshape(g, p, vec![t, out_channels, h / patch, w / patch])
}

/// Deterministic differentiable map `[T,3,H,W] -> [T,C,H/8,W/8]`.
pub fn synth_backbone(
    g: &mut Graph,
    store: &ParamStore,
    frames: &Tensor,
    channels: usize,
) -> Result<FeatureMap> {
    let shape = frames.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "frames must be [T,3,H,W], got {:?}",
            shape
        )));
    }
    let (h, w) = (shape[2], shape[3]);
    if h % BACKBONE_STRIDE != 0 || w % BACKBONE_STRIDE != 0 {
        return Err(Error::Config(format!(
            "frame dims {h}x{w} not divisible by stride {BACKBONE_STRIDE}"
        )));
    }
    let x = g.input(frames.clone())?;
    let mid = mid_channels(channels);
    let s1 = mixing_stage(g, store, "backbone.stage1", x, 4, mid)?;
    let s2 = mixing_stage(g, store, "backbone.stage2", s1, 2, channels)?;
    Ok(FeatureMap {
        map: s2,
        stride: BACKBONE_STRIDE as f64,
    })
}

/// Clamped bilinear sample: cell `(i,j)` holds its value at center
/// `(j + 0.5, i + 0.5)` in feature coordinates.
fn bilinear_weights(h: usize, w: usize, cy: f64, cx: f64) -> [(usize, usize, f64); 4] {
    let u = cx - 0.5;
    let v = cy - 0.5;
    let j0 = u.floor();
    let i0 = v.floor();
    let fu = u - j0;
    let fv = v - i0;
    let clamp = |x: f64, hi: usize| -> usize {
        if x < 0.0 {
            0
        } else if x as usize >= hi {
            hi - 1
        } else {
            x as usize
        }
    };
    let j0c = clamp(j0, w);
    let j1c = clamp(j0 + 1.0, w);
    let i0c = clamp(i0, h);
    let i1c = clamp(i0 + 1.0, h);
    [
        (i0c, j0c, (1.0 - fv) * (1.0 - fu)),
        (i0c, j1c, (1.0 - fv) * fu),
        (i1c, j0c, fv * (1.0 - fu)),
        (i1c, j1c, fv * fu),
    ]
}

/// Crop per-individual features: one bilinear sample at the center of each
/// output bin, continuous coordinates, differentiable w.r.t. the feature map.
///
/// Boxes are in frame pixels and are scaled by the map stride.
pub fn roi_align(
    g: &mut Graph,
    fm: &FeatureMap,
    boxes: &[BoxTrack],
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("roi output dims must be >= 1".into()));
    }
    let fm_var = fm.map;
    let value = g.rc_value(fm_var);
    let shape = value.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "feature map must be [T,C,H,W], got {:?}",
            shape
        )));
    }
    let (t_frames, c, hf, wf) = (shape[0], shape[1], shape[2], shape[3]);
    let n = boxes.len();
    let stride = fm.stride;

    // Precompute sample weights per (t, n, bin).
    let mut samples: Vec<[(usize, usize, f64); 4]> = Vec::with_capacity(t_frames * n * out_h * out_w);
    for track in boxes {
        if track.boxes.len() != t_frames {
            return Err(Error::ShapeMismatch(format!(
                "track {} has {} frames, feature map has {}",
                track.id,
                track.boxes.len(),
                t_frames
            )));
        }
    }
    for t in 0..t_frames {
        for track in boxes {
            let [x1, y1, x2, y2] = track.boxes[t];
            let (fx1, fy1, fx2, fy2) = (x1 / stride, y1 / stride, x2 / stride, y2 / stride);
            if !(fx2 - fx1 > 1e-9 && fy2 - fy1 > 1e-9) {
                return Err(Error::InvalidInput(format!(
                    "degenerate box after stride scaling: track {} frame {t}",
                    track.id
                )));
            }
            let bw = (fx2 - fx1) / out_w as f64;
            let bh = (fy2 - fy1) / out_h as f64;
            for by in 0..out_h {
                for bx in 0..out_w {
                    let cy = fy1 + (by as f64 + 0.5) * bh;
                    let cx = fx1 + (bx as f64 + 0.5) * bw;
                    samples.push(bilinear_weights(hf, wf, cy, cx));
                }
            }
        }
    }

    let plane = hf * wf;
    let bins = out_h * out_w;
    let mut out = vec![0.0; t_frames * n * c * bins];
    for t in 0..t_frames {
        for ni in 0..n {
            for (bi, sample) in samples[(t * n + ni) * bins..(t * n + ni + 1) * bins]
                .iter()
                .enumerate()
            {
                for ci in 0..c {
                    let base = (t * c + ci) * plane;
                    let mut acc = 0.0;
                    for &(i, j, wgt) in sample {
                        acc += wgt * value.data()[base + i * wf + j];
                    }
                    out[((t * n + ni) * c + ci) * bins + bi] = acc;
                }
            }
        }
    }
    let result = Tensor::new(vec![t_frames, n, c, out_h, out_w], out)?;
    let samples = std::rc::Rc::new(samples);
    g.push(
        "roi_align",
        result,
        vec![fm_var.0],
        Some(Box::new(move |grad, sink| {
            let mut gfm = vec![0.0; t_frames * c * plane];
            for t in 0..t_frames {
                for ni in 0..n {
                    for (bi, sample) in samples[(t * n + ni) * bins..(t * n + ni + 1) * bins]
                        .iter()
                        .enumerate()
                    {
                        for ci in 0..c {
                            let gv = grad.data()[((t * n + ni) * c + ci) * bins + bi];
                            let base = (t * c + ci) * plane;
                            for &(i, j, wgt) in sample {
                                gfm[base + i * wf + j] += wgt * gv;
                            }
                        }
                    }
                }
            }
            sink(
                fm_var.0,
                Tensor::new(vec![t_frames, c, hf, wf], gfm).unwrap(),
            );
        })),
    )
}

/// Learned projection of cropped features: `[T,N,C,oh,ow] -> [T,N,D]`.
pub fn flatten_rois(g: &mut Graph, store: &ParamStore, rois: Var) -> Result<Var> {
    let shape = g.value(rois).shape().to_vec();
    if shape.len() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "rois must be [T,N,C,oh,ow], got {:?}",
            shape
        )));
    }
    let (t, n) = (shape[0], shape[1]);
    let flat_dim = shape[2] * shape[3] * shape[4];
    let flat = ops::reshape(g, rois, vec![t, n, flat_dim])?;
    let w = g.param(store, "roi.proj.w")?;
    let b = g.param(store, "roi.proj.b")?;
    ops::linear(g, flat, w, Some(b))
}
