//! Differentiable primitive operations on the tape.
//!
//! Each op validates shapes, computes its value eagerly and registers a
//! closure that maps the output gradient to parent contributions. Backward
//! formulas are checked against central finite differences in the test suite.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{matmul2, matmul2_at, matmul2_bt, strides, Tensor};

/// Elementwise sum, shapes must match.
pub fn add(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let av = g.rc_value(a);
    let bv = g.rc_value(b);
    let value = av.zip_map(&bv, |x, y| x + y)?;
    g.push(
        "add",
        value,
        vec![a.0, b.0],
        Some(Box::new(move |grad, sink| {
            sink(a.0, grad.clone());
            sink(b.0, grad.clone());
        })),
    )
}

/// `a - b`, shapes must match.
pub fn sub(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let nb = scale(g, b, -1.0)?;
    add(g, a, nb)
}

/// Add a vector over the last dimension: `x[..., d] + bias[d]`.
pub fn add_bias(g: &mut Graph, x: Var, bias: Var) -> Result<Var> {
    let xv = g.rc_value(x);
    let bv = g.rc_value(bias);
    let d = *xv.shape().last().ok_or_else(|| {
        Error::ShapeMismatch("add_bias on rank-0 tensor".into())
    })?;
    if bv.shape() != [d] {
        return Err(Error::ShapeMismatch(format!(
            "bias {:?} vs last dim {}",
            bv.shape(),
            d
        )));
    }
    let mut data = xv.data().to_vec();
    for chunk in data.chunks_mut(d) {
        for (v, b) in chunk.iter_mut().zip(bv.data()) {
            *v += *b;
        }
    }
    let value = Tensor::new(xv.shape().to_vec(), data)?;
    g.push(
        "add_bias",
        value,
        vec![x.0, bias.0],
        Some(Box::new(move |grad, sink| {
            sink(x.0, grad.clone());
            let mut gb = vec![0.0; d];
            for chunk in grad.data().chunks(d) {
                for (acc, &v) in gb.iter_mut().zip(chunk) {
                    *acc += v;
                }
            }
            sink(bias.0, Tensor::new(vec![d], gb).unwrap());
        })),
    )
}

/// Add a tensor broadcast over axis 0: `x[i, ...] + p[...]`.
pub fn add_broadcast0(g: &mut Graph, x: Var, p: Var) -> Result<Var> {
    let xv = g.rc_value(x);
    let pv = g.rc_value(p);
    if xv.rank() < 1 || &xv.shape()[1..] != pv.shape() {
        return Err(Error::ShapeMismatch(format!(
            "broadcast0 {:?} vs {:?}",
            xv.shape(),
            pv.shape()
        )));
    }
    let inner = pv.numel();
    let mut data = xv.data().to_vec();
    for chunk in data.chunks_mut(inner) {
        for (v, b) in chunk.iter_mut().zip(pv.data()) {
            *v += *b;
        }
    }
    let value = Tensor::new(xv.shape().to_vec(), data)?;
    let pshape = pv.shape().to_vec();
    g.push(
        "add_broadcast0",
        value,
        vec![x.0, p.0],
        Some(Box::new(move |grad, sink| {
            sink(x.0, grad.clone());
            let mut gp = vec![0.0; inner];
            for chunk in grad.data().chunks(inner) {
                for (acc, &v) in gp.iter_mut().zip(chunk) {
                    *acc += v;
                }
            }
            sink(p.0, Tensor::new(pshape.clone(), gp).unwrap());
        })),
    )
}

/// Multiply by a compile-time constant.
pub fn scale(g: &mut Graph, x: Var, c: f64) -> Result<Var> {
    let xv = g.rc_value(x);
    let value = xv.map(|v| v * c);
    g.push(
        "scale",
        value,
        vec![x.0],
        Some(Box::new(move |grad, sink| {
            sink(x.0, grad.map(|v| v * c));
        })),
    )
}

/// Elementwise product, shapes must match.
pub fn mul(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let av = g.rc_value(a);
    let bv = g.rc_value(b);
    let value = av.zip_map(&bv, |x, y| x * y)?;
    g.push(
        "mul",
        value,
        vec![a.0, b.0],
        Some(Box::new(move |grad, sink| {
            sink(a.0, grad.zip_map(&bv, |g, y| g * y).unwrap());
            sink(b.0, grad.zip_map(&av, |g, x| g * x).unwrap());
        })),
    )
}

/// 2-D matrix product `[m,k] @ [k,n]`.
pub fn matmul(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let av = g.rc_value(a);
    let bv = g.rc_value(b);
    let value = matmul2(&av, &bv)?;
    g.push(
        "matmul",
        value,
        vec![a.0, b.0],
        Some(Box::new(move |grad, sink| {
            sink(a.0, matmul2_bt(grad, &bv).unwrap());
            sink(b.0, matmul2_at(&av, grad).unwrap());
        })),
    )
}

/// Batched matrix product `[B,m,k] @ [B,k,n]`; with `transpose_b` the second
/// operand is `[B,n,k]`.
pub fn bmm(g: &mut Graph, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
    let av = g.rc_value(a);
    let bv = g.rc_value(b);
    if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
        return Err(Error::ShapeMismatch(format!(
            "bmm {:?} x {:?}",
            av.shape(),
            bv.shape()
        )));
    }
    let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
    let (bk, n) = if transpose_b {
        (bv.shape()[2], bv.shape()[1])
    } else {
        (bv.shape()[1], bv.shape()[2])
    };
    if bk != k {
        return Err(Error::ShapeMismatch(format!(
            "bmm inner dims {} vs {}",
            k, bk
        )));
    }
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let asl = &av.data()[bi * m * k..(bi + 1) * m * k];
        let bsl = &bv.data()[bi * k * n..(bi + 1) * k * n];
        let osl = &mut out[bi * m * n..(bi + 1) * m * n];
        if transpose_b {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for kk in 0..k {
                        s += asl[i * k + kk] * bsl[j * k + kk];
                    }
                    osl[i * n + j] = s;
                }
            }
        } else {
            for i in 0..m {
                for kk in 0..k {
                    let x = asl[i * k + kk];
                    if x == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        osl[i * n + j] += x * bsl[kk * n + j];
                    }
                }
            }
        }
    }
    let value = Tensor::new(vec![batch, m, n], out)?;
    g.push(
        "bmm",
        value,
        vec![a.0, b.0],
        Some(Box::new(move |grad, sink| {
            let mut ga = vec![0.0; av.numel()];
            let mut gb = vec![0.0; bv.numel()];
            for bi in 0..batch {
                let gsl = &grad.data()[bi * m * n..(bi + 1) * m * n];
                let asl = &av.data()[bi * m * k..(bi + 1) * m * k];
                let bsl = &bv.data()[bi * k * n..(bi + 1) * k * n];
                let gasl = &mut ga[bi * m * k..(bi + 1) * m * k];
                let gbsl = &mut gb[bi * k * n..(bi + 1) * k * n];
                if transpose_b {
                    // out = A @ B^T with B: [n,k]
                    // dA = G @ B ; dB = G^T @ A
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gsl[i * n + j] * bsl[j * k + kk];
                            }
                            gasl[i * k + kk] += s;
                        }
                    }
                    for j in 0..n {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += gsl[i * n + j] * asl[i * k + kk];
                            }
                            gbsl[j * k + kk] += s;
                        }
                    }
                } else {
                    // dA = G @ B^T ; dB = A^T @ G
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gsl[i * n + j] * bsl[kk * n + j];
                            }
                            gasl[i * k + kk] += s;
                        }
                    }
                    for kk in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += asl[i * k + kk] * gsl[i * n + j];
                            }
                            gbsl[kk * n + j] += s;
                        }
                    }
                }
            }
            sink(a.0, Tensor::new(av.shape().to_vec(), ga).unwrap());
            sink(b.0, Tensor::new(bv.shape().to_vec(), gb).unwrap());
        })),
    )
}

/// Same data, new shape.
pub fn reshape(g: &mut Graph, x: Var, shape: Vec<usize>) -> Result<Var> {
    let xv = g.rc_value(x);
    let value = xv.reshaped(shape)?;
    let orig = xv.shape().to_vec();
    g.push(
        "reshape",
        value,
        vec![x.0],
        Some(Box::new(move |grad, sink| {
            sink(x.0, grad.reshaped(orig.clone()).unwrap());
        })),
    )
}

fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&d| x.shape()[d]).collect();
    let numel = x.numel();
    let mut out = vec![0.0; numel];
    let rank = perm.len();
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut off = 0;
        for d in 0..rank {
            off += idx[d] * in_strides[perm[d]];
        }
        *slot = x.data()[off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).unwrap()
}

/// Reorder axes: `out.shape[d] = x.shape[perm[d]]`.
pub fn permute(g: &mut Graph, x: Var, perm: &[usize]) -> Result<Var> {
    let xv = g.rc_value(x);
    if perm.len() != xv.rank() {
        return Err(Error::ShapeMismatch(format!(
            "permute {:?} on rank {}",
            perm,
            xv.rank()
        )));
    }
    let mut seen = vec![false; perm.len()];
    for &d in perm {
        if d >= perm.len() || seen[d] {
            return Err(Error::InvalidInput(format!("bad permutation {:?}", perm)));
        }
        seen[d] = true;
    }
    let value = permute_tensor(&xv, perm);
    let mut inverse = vec![0usize; perm.len()];
    for (d, &p) in perm.iter().enumerate() {
        inverse[p] = d;
    }
    g.push(
        "permute",
        value,
        vec![x.0],
        Some(Box::new(move |grad, sink| {
            sink(x.0, permute_tensor(grad, &inverse));
        })),
    )
}

/// Concatenate along an axis; all other extents must agree.
pub fn concat(g: &mut Graph, axis: usize, parts: &[Var]) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::InvalidInput("concat of zero parts".into()));
    }
    let values: Vec<_> = parts.iter().map(|&p| g.rc_value(p)).collect();
    let rank = values[0].rank();
    if axis >= rank {
        return Err(Error::InvalidInput(format!("concat axis {axis} out of range")));
    }
    for v in &values[1..] {
        if v.rank() != rank {
            return Err(Error::ShapeMismatch("concat rank mismatch".into()));
        }
        for d in 0..rank {
            if d != axis && v.shape()[d] != values[0].shape()[d] {
                return Err(Error::ShapeMismatch(format!(
                    "concat extent mismatch at axis {d}"
                )));
            }
        }
    }
    let mut out_shape = values[0].shape().to_vec();
    out_shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut data = vec![0.0; out_shape.iter().product()];
    let total_axis = out_shape[axis];
    let mut base = 0usize;
    let mut part_offsets = Vec::with_capacity(values.len());
    for v in &values {
        part_offsets.push(base);
        base += v.shape()[axis];
    }
    for (v, &off) in values.iter().zip(&part_offsets) {
        let ext = v.shape()[axis];
        for o in 0..outer {
            let src = &v.data()[o * ext * inner..(o + 1) * ext * inner];
            let dst_start = (o * total_axis + off) * inner;
            data[dst_start..dst_start + ext * inner].copy_from_slice(src);
        }
    }
    let value = Tensor::new(out_shape, data)?;
    let parents: Vec<usize> = parts.iter().map(|p| p.0).collect();
    let parts_vec = parts.to_vec();
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    g.push(
        "concat",
        value,
        parents,
        Some(Box::new(move |grad, sink| {
            for ((part, shape), &off) in parts_vec.iter().zip(&shapes).zip(&part_offsets) {
                let ext = shape[axis];
                let mut gp = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    let src_start = (o * total_axis + off) * inner;
                    gp[o * ext * inner..(o + 1) * ext * inner]
                        .copy_from_slice(&grad.data()[src_start..src_start + ext * inner]);
                }
                sink(part.0, Tensor::new(shape.clone(), gp).unwrap());
            }
        })),
    )
}

/// Contiguous slice `[start, start+len)` along an axis.
pub fn slice(g: &mut Graph, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
    let xv = g.rc_value(x);
    if axis >= xv.rank() || start + len > xv.shape()[axis] {
        return Err(Error::InvalidInput(format!(
            "slice axis {axis} [{start}, {start}+{len}) of {:?}",
            xv.shape()
        )));
    }
    let mut out_shape = xv.shape().to_vec();
    out_shape[axis] = len;
    let outer: usize = xv.shape()[..axis].iter().product();
    let inner: usize = xv.shape()[axis + 1..].iter().product();
    let ext = xv.shape()[axis];
    let mut data = vec![0.0; out_shape.iter().product()];
    for o in 0..outer {
        let src_start = (o * ext + start) * inner;
        data[o * len * inner..(o + 1) * len * inner]
            .copy_from_slice(&xv.data()[src_start..src_start + len * inner]);
    }
    let value = Tensor::new(out_shape, data)?;
    let in_shape = xv.shape().to_vec();
    g.push(
        "slice",
        value,
        vec![x.0],
        Some(Box::new(move |grad, sink| {
            let mut gx = vec![0.0; in_shape.iter().product()];
            for o in 0..outer {
                let dst_start = (o * ext + start) * inner;
                gx[dst_start..dst_start + len * inner]
                    .copy_from_slice(&grad.data()[o * len * inner..(o + 1) * len * inner]);
            }
            sink(x.0, Tensor::new(in_shape.clone(), gx).unwrap());
        })),
    )
}

/// Select rows of axis 0 by index; duplicates are allowed.
pub fn gather_rows(g: &mut Graph, x: Var, indices: &[usize]) -> Result<Var> {
    let xv = g.rc_value(x);
    if xv.rank() < 1 {
        return Err(Error::ShapeMismatch("gather_rows on scalar".into()));
    }
    let n = xv.shape()[0];
    let inner: usize = xv.shape()[1..].iter().product();
    for &i in indices {
        if i >= n {
            return Err(Error::InvalidInput(format!("row index {i} out of {n}")));
        }
    }
    let mut out_shape = xv.shape().to_vec();
    out_shape[0] = indices.len();
    let mut data = vec![0.0; indices.len() * inner];
    for (r, &i) in indices.iter().enumerate() {
        data[r * inner..(r + 1) * inner].copy_from_slice(&xv.data()[i * inner..(i + 1) * inner]);
    }
    let value = Tensor::new(out_shape, data)?;
    let idx = indices.to_vec();
    let in_shape = xv.shape().to_vec();
    g.push(
        "gather_rows",
        value,
        vec![x.0],
        Some(Box::new(move |grad, sink| {
            let mut gx = vec![0.0; in_shape.iter().product()];
            for (r, &i) in idx.iter().enumerate() {
                for d in 0..inner {
                    gx[i * inner + d] += grad.data()[r * inner + d];
                }
            }
            sink(x.0, Tensor::new(in_shape.clone(), gx).unwrap());
        })),
    )
}

/// Column-wise max over the rows of `[M,D]`, result `[1,D]`. Ties route the
/// gradient to the first maximal row.
pub fn max_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let xv = g.rc_value(x);
    if xv.rank() != 2 || xv.shape()[0] == 0 {
        return Err(Error::ShapeMismatch(format!(
            "max_rows needs nonempty [M,D], got {:?}",
            xv.shape()
        )));
    }
    let (m, d) = (xv.shape()[0], xv.shape()[1]);
    let mut best = vec![0usize; d];
    let mut vals = xv.data()[..d].to_vec();
    for i in 1..m {
        for j in 0..d {
            let v = xv.data()[i * d + j];
            if v > vals[j] {
                vals[j] = v;
                best[j] = i;
            }
        }
    }
    let value = Tensor::new(vec![1, d], vals)?;
    g.push(
        "max_rows",
        value,
        vec![x.0],
        Some(Box::new(move |grad, sink| {
            let mut gx = vec![0.0; m * d];
            for j in 0..d {
                gx[best[j] * d + j] = grad.data()[j];
            }
            sink(x.0, Tensor::new(vec![m, d], gx).unwrap());
        })),
    )
}

/// Mean over one axis; the axis is dropped from the shape.
pub fn mean_axis(g: &mut Graph, x: Var, axis: usize) -> Result<Var> {
    let xv = g.rc_value(x);
    if axis >= xv.rank() || xv.shape()[axis] == 0 {
        return Err(Error::InvalidInput(format!(
            "mean over axis {axis} of {:?}",
            xv.shape()
        )));
    }
    let ext = xv.shape()[axis];
    let outer: usize = xv.shape()[..axis].iter().product();
    let inner: usize = xv.shape()[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for e in 0..ext {
            let src = &xv.data()[(o * ext + e) * inner..(o * ext + e + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (acc, &v) in dst.iter_mut().zip(src) {
                *acc += v;
            }
        }
    }
    let scale = 1.0 / ext as f64;
    for v in out.iter_mut() {
        *v *= scale;
    }
    let mut out_shape = xv.shape().to_vec();
    out_shape.remove(axis);
    let value = Tensor::new(out_shape, out)?;
    let in_shape = xv.shape().to_vec();
    g.push(
        "mean_axis",
        value,
        vec![x.0],
        Some(Box::new(move |grad, sink| {
            let mut gx = vec![0.0; in_shape.iter().product()];
            for o in 0..outer {
                for e in 0..ext {
                    let dst = &mut gx[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                    let src = &grad.data()[o * inner..(o + 1) * inner];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = v * scale;
                    }
                }
            }
            sink(x.0, Tensor::new(in_shape.clone(), gx).unwrap());
        })),
    )
}

/// Mean over every element, result scalar.
pub fn mean_all(g: &mut Graph, x: Var) -> Result<Var> {
    let xv = g.rc_value(x);
    let n = xv.numel();
    if n == 0 {
        return Err(Error::InvalidInput("mean of empty tensor".into()));
    }
    let value = Tensor::scalar(xv.data().iter().sum::<f64>() / n as f64);
    let shape = xv.shape().to_vec();
    g.push(
        "mean_all",
        value,
        vec![x.0],
        Some(Box::new(move |grad, sink| {
            let gv = grad.item() / n as f64;
            sink(x.0, Tensor::full(&shape, gv));
        })),
    )
}

/// Max-subtracted softmax kernel over the last dimension of a plain tensor.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::ShapeMismatch("softmax on rank-0".into()))?;
    if d == 0 {
        return Err(Error::ShapeMismatch("softmax over empty last dim".into()));
    }
    let mut data = x.data().to_vec();
    for chunk in data.chunks_mut(d) {
        let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in chunk.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in chunk.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Softmax over the last dimension; every output slice sums to 1.
pub fn softmax_lastdim(g: &mut Graph, x: Var) -> Result<Var> {
    let xv = g.rc_value(x);
    let value = softmax_rows(&xv)?;
    let d = *value.shape().last().unwrap();
    let yv = std::rc::Rc::new(value.clone());
    g.push(
        "softmax",
        value,
        vec![x.0],
        Some(Box::new(move |grad, sink| {
            // dx = y * (g - sum(g * y)) per slice
            let mut gx = vec![0.0; yv.numel()];
            for (slot, (gs, ys)) in gx
                .chunks_mut(d)
                .zip(grad.data().chunks(d).zip(yv.data().chunks(d)))
            {
                let dot: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                for ((o, &gv), &yvv) in slot.iter_mut().zip(gs).zip(ys) {
                    *o = yvv * (gv - dot);
                }
            }
            sink(x.0, Tensor::new(yv.shape().to_vec(), gx).unwrap());
        })),
    )
}

/// Layer normalization over the last dimension with learnable gain and bias.
pub fn layer_norm(g: &mut Graph, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
    let xv = g.rc_value(x);
    let gv = g.rc_value(gain);
    let bv = g.rc_value(bias);
    let d = *x_last_dim(&xv)?;
    if d == 0 {
        return Err(Error::ShapeMismatch("layer_norm over empty last dim".into()));
    }
    if gv.shape() != [d] || bv.shape() != [d] {
        return Err(Error::ShapeMismatch(format!(
            "layer_norm gain {:?} bias {:?} vs dim {}",
            gv.shape(),
            bv.shape(),
            d
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Config("layer_norm eps must be positive".into()));
    }
    let slices = xv.numel() / d;
    let mut normed = vec![0.0; xv.numel()];
    let mut inv_std = vec![0.0; slices];
    for s in 0..slices {
        let xi = &xv.data()[s * d..(s + 1) * d];
        let mean = xi.iter().sum::<f64>() / d as f64;
        let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[s] = istd;
        for (o, &v) in normed[s * d..(s + 1) * d].iter_mut().zip(xi) {
            *o = (v - mean) * istd;
        }
    }
    let mut out = vec![0.0; xv.numel()];
    for s in 0..slices {
        for j in 0..d {
            out[s * d + j] = normed[s * d + j] * gv.data()[j] + bv.data()[j];
        }
    }
    let value = Tensor::new(xv.shape().to_vec(), out)?;
    let normed = std::rc::Rc::new(normed);
    let shape = xv.shape().to_vec();
    g.push(
        "layer_norm",
        value,
        vec![x.0, gain.0, bias.0],
        Some(Box::new(move |grad, sink| {
            let mut gx = vec![0.0; slices * d];
            let mut ggain = vec![0.0; d];
            let mut gbias = vec![0.0; d];
            for s in 0..slices {
                let gs = &grad.data()[s * d..(s + 1) * d];
                let ns = &normed[s * d..(s + 1) * d];
                // accumulate gain/bias grads
                for j in 0..d {
                    ggain[j] += gs[j] * ns[j];
                    gbias[j] += gs[j];
                }
                // dx = istd * (gy - mean(gy) - nrm * mean(gy * nrm)),  gy = g * gain
                let mut mean_gy = 0.0;
                let mut mean_gy_n = 0.0;
                for j in 0..d {
                    let gy = gs[j] * gv.data()[j];
                    mean_gy += gy;
                    mean_gy_n += gy * ns[j];
                }
                mean_gy /= d as f64;
                mean_gy_n /= d as f64;
                let istd = inv_std[s];
                for j in 0..d {
                    let gy = gs[j] * gv.data()[j];
                    gx[s * d + j] = istd * (gy - mean_gy - ns[j] * mean_gy_n);
                }
            }
            sink(x.0, Tensor::new(shape.clone(), gx).unwrap());
            sink(gain.0, Tensor::new(vec![d], ggain).unwrap());
            sink(bias.0, Tensor::new(vec![d], gbias).unwrap());
        })),
    )
}

fn x_last_dim(t: &Tensor) -> Result<&usize> {
    t.shape()
        .last()
        .ok_or_else(|| Error::ShapeMismatch("op requires rank >= 1".into()))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Smooth GELU nonlinearity (tanh form).
pub fn gelu(g: &mut Graph, x: Var) -> Result<Var> {
    let xv = g.rc_value(x);
    let value = xv.map(gelu_scalar);
    g.push(
        "gelu",
        value,
        vec![x.0],
        Some(Box::new(move |grad, sink| {
            sink(
                x.0,
                grad.zip_map(&xv, |gv, v| gv * gelu_grad_scalar(v)).unwrap(),
            );
        })),
    )
}

/// Stable elementwise binary cross-entropy from a single logit and target.
pub fn bce_term(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with logits against a constant binary target.
///
/// Computed as `max(z,0) - z*t + ln(1 + exp(-|z|))` per element; no overflow
/// for saturated logits. An empty logit tensor yields loss 0.
pub fn bce_with_logits(g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
    let zv = g.rc_value(logits);
    if zv.shape() != targets.shape() {
        return Err(Error::ShapeMismatch(format!(
            "bce logits {:?} vs targets {:?}",
            zv.shape(),
            targets.shape()
        )));
    }
    for &t in targets.data() {
        if t != 0.0 && t != 1.0 {
            return Err(Error::InvalidInput(format!(
                "bce target {t} outside {{0,1}}"
            )));
        }
    }
    let n = zv.numel();
    if n == 0 {
        return g.push("bce_with_logits", Tensor::scalar(0.0), vec![logits.0], None);
    }
    let mut sum = 0.0;
    for (&z, &t) in zv.data().iter().zip(targets.data()) {
        sum += bce_term(z, t);
    }
    let value = Tensor::scalar(sum / n as f64);
    let tv = targets.clone();
    g.push(
        "bce_with_logits",
        value,
        vec![logits.0],
        Some(Box::new(move |grad, sink| {
            let go = grad.item() / n as f64;
            let gx: Vec<f64> = zv
                .data()
                .iter()
                .zip(tv.data())
                .map(|(&z, &t)| go * (sigmoid(z) - t))
                .collect();
            sink(logits.0, Tensor::new(zv.shape().to_vec(), gx).unwrap());
        })),
    )
}

/// All ordered pairs of rows: row `i*N+j` is `[x_i ; x_j ; x_i * x_j]`.
pub fn pairwise_concat_mul(g: &mut Graph, x: Var) -> Result<Var> {
    let xv = g.rc_value(x);
    if xv.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "pairwise needs [N,D], got {:?}",
            xv.shape()
        )));
    }
    let (n, d) = (xv.shape()[0], xv.shape()[1]);
    let mut out = vec![0.0; n * n * 3 * d];
    for i in 0..n {
        let xi = &xv.data()[i * d..(i + 1) * d];
        for j in 0..n {
            let xj = &xv.data()[j * d..(j + 1) * d];
            let row = &mut out[(i * n + j) * 3 * d..(i * n + j + 1) * 3 * d];
            row[..d].copy_from_slice(xi);
            row[d..2 * d].copy_from_slice(xj);
            for k in 0..d {
                row[2 * d + k] = xi[k] * xj[k];
            }
        }
    }
    let value = Tensor::new(vec![n * n, 3 * d], out)?;
    g.push(
        "pairwise_concat_mul",
        value,
        vec![x.0],
        Some(Box::new(move |grad, sink| {
            let mut gx = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..n {
                    let row = &grad.data()[(i * n + j) * 3 * d..(i * n + j + 1) * 3 * d];
                    for k in 0..d {
                        let xi = xv.data()[i * d + k];
                        let xj = xv.data()[j * d + k];
                        gx[i * d + k] += row[k] + row[2 * d + k] * xj;
                        gx[j * d + k] += row[d + k] + row[2 * d + k] * xi;
                    }
                }
            }
            sink(x.0, Tensor::new(vec![n, d], gx).unwrap());
        })),
    )
}

/// Off-diagonal entries of a square matrix, row-major order.
pub fn offdiag(g: &mut Graph, x: Var) -> Result<Var> {
    let xv = g.rc_value(x);
    if xv.rank() != 2 || xv.shape()[0] != xv.shape()[1] {
        return Err(Error::ShapeMismatch(format!(
            "offdiag needs square matrix, got {:?}",
            xv.shape()
        )));
    }
    let n = xv.shape()[0];
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out.push(xv.data()[i * n + j]);
            }
        }
    }
    let value = Tensor::new(vec![n * n.saturating_sub(1)], out)?;
    g.push(
        "offdiag",
        value,
        vec![x.0],
        Some(Box::new(move |grad, sink| {
            let mut gx = vec![0.0; n * n];
            let mut k = 0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        gx[i * n + j] = grad.data()[k];
                        k += 1;
                    }
                }
            }
            sink(x.0, Tensor::new(vec![n, n], gx).unwrap());
        })),
    )
}

/// Non-overlapping `s x s` patches: `[B,C,H,W] -> [B, (H/s)*(W/s), C*s*s]`.
pub fn patchify(g: &mut Graph, x: Var, s: usize) -> Result<Var> {
    let xv = g.rc_value(x);
    if xv.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "patchify needs [B,C,H,W], got {:?}",
            xv.shape()
        )));
    }
    let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Config(format!(
            "spatial dims {h}x{w} not divisible by patch size {s}"
        )));
    }
    let (ph, pw) = (h / s, w / s);
    let patches = ph * pw;
    let plen = c * s * s;
    let mut out = vec![0.0; b * patches * plen];
    for bi in 0..b {
        for py in 0..ph {
            for px in 0..pw {
                let p = py * pw + px;
                let dst = &mut out[(bi * patches + p) * plen..(bi * patches + p + 1) * plen];
                for ci in 0..c {
                    for dy in 0..s {
                        for dx in 0..s {
                            dst[ci * s * s + dy * s + dx] =
                                xv.data()[((bi * c + ci) * h + py * s + dy) * w + px * s + dx];
                        }
                    }
                }
            }
        }
    }
    let value = Tensor::new(vec![b, patches, plen], out)?;
    g.push(
        "patchify",
        value,
        vec![x.0],
        Some(Box::new(move |grad, sink| {
            let mut gx = vec![0.0; b * c * h * w];
            for bi in 0..b {
                for py in 0..ph {
                    for px in 0..pw {
                        let p = py * pw + px;
                        let src =
                            &grad.data()[(bi * patches + p) * plen..(bi * patches + p + 1) * plen];
                        for ci in 0..c {
                            for dy in 0..s {
                                for dx in 0..s {
                                    gx[((bi * c + ci) * h + py * s + dy) * w + px * s + dx] =
                                        src[ci * s * s + dy * s + dx];
                                }
                            }
                        }
                    }
                }
            }
            sink(x.0, Tensor::new(vec![b, c, h, w], gx).unwrap());
        })),
    )
}

/// Affine map over the last dimension: `y = x @ w + b`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let xshape = g.value(x).shape().to_vec();
    let din = *xshape.last().ok_or_else(|| {
        Error::ShapeMismatch("linear input must have rank >= 1".into())
    })?;
    let wshape = g.value(w).shape().to_vec();
    if wshape.len() != 2 || wshape[0] != din {
        return Err(Error::ShapeMismatch(format!(
            "linear weight {:?} vs input dim {}",
            wshape, din
        )));
    }
    let lead: usize = xshape[..xshape.len() - 1].iter().product();
    let flat = reshape(g, x, vec![lead, din])?;
    let mut y = matmul(g, flat, w)?;
    if let Some(bias) = b {
        y = add_bias(g, y, bias)?;
    }
    let mut out_shape = xshape;
    *out_shape.last_mut().unwrap() = wshape[1];
    reshape(g, y, out_shape)
}
