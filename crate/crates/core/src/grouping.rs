//! Pairwise relation prediction and social-group detection.
//!
//! At evaluation time group structure comes from spectral clustering of the
//! predicted same-group probabilities: normalized Laplacian, eigengap choice
//! of the cluster count, and seeded k-means on the row-normalized spectral
//! embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{fan_in_proj, Init, ParamSpec};
use crate::ops;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Surrogate logit used for the (excluded-from-loss) diagonal; its sigmoid is
/// 1 within double precision.
pub const DIAGONAL_LOGIT: f64 = 40.0;

/// Disjoint nonempty groups covering `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    groups: Vec<Vec<usize>>,
    n: usize,
}

impl Partition {
    /// Validate and canonicalize: members sorted within groups, groups
    /// ordered by smallest member.
    pub fn new(mut groups: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        let mut count = 0;
        for group in &mut groups {
            if group.is_empty() {
                return Err(Error::InvalidInput("empty group".into()));
            }
            group.sort_unstable();
            for &i in group.iter() {
                if i >= n {
                    return Err(Error::InvalidInput(format!("member {i} out of range {n}")));
                }
                if seen[i] {
                    return Err(Error::InvalidInput(format!("member {i} duplicated")));
                }
                seen[i] = true;
                count += 1;
            }
        }
        if count != n {
            return Err(Error::InvalidInput(format!(
                "partition covers {count} of {n} members"
            )));
        }
        groups.sort_by_key(|grp| grp[0]);
        Ok(Self { groups, n })
    }

    pub fn from_labels(labels: &[usize]) -> Self {
        let n = labels.len();
        let mut by_label: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, &l) in labels.iter().enumerate() {
            by_label.entry(l).or_default().push(i);
        }
        Self::new(by_label.into_values().collect(), n).expect("labels form a partition")
    }

    pub fn singletons(n: usize) -> Self {
        Self::new((0..n).map(|i| vec![i]).collect(), n).unwrap()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn member_count(&self) -> usize {
        self.n
    }

    /// Group index of each member.
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![0; self.n];
        for (gi, group) in self.groups.iter().enumerate() {
            for &i in group {
                labels[i] = gi;
            }
        }
        labels
    }
}

/// Symmetric same-group matrix with unit diagonal; probabilities in `[0,1]`
/// for predictions, `{0,1}` for ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMatrix {
    n: usize,
    values: Vec<f64>,
}

impl RelationMatrix {
    pub fn from_partition(p: &Partition) -> Self {
        let n = p.member_count();
        let labels = p.labels();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] = if labels[i] == labels[j] { 1.0 } else { 0.0 };
            }
        }
        Self { n, values }
    }

    /// Sigmoid of symmetrized logits with the diagonal pinned to exactly 1.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        if logits.rank() != 2 || logits.shape()[0] != logits.shape()[1] {
            return Err(Error::ShapeMismatch(format!(
                "relation logits must be square, got {:?}",
                logits.shape()
            )));
        }
        let n = logits.shape()[0];
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] = if i == j {
                    1.0
                } else {
                    let z = 0.5 * (logits.data()[i * n + j] + logits.data()[j * n + i]);
                    1.0 / (1.0 + (-z).exp())
                };
            }
        }
        Ok(Self { n, values })
    }

    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::ShapeMismatch("relation matrix size".into()));
        }
        for i in 0..n {
            if (values[i * n + i] - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput("relation diagonal must be 1".into()));
            }
            for j in 0..n {
                let v = values[i * n + j];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidInput(format!("relation value {v} outside [0,1]")));
                }
                if (v - values[j * n + i]).abs() > 1e-12 {
                    return Err(Error::InvalidInput("relation matrix must be symmetric".into()));
                }
            }
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn relation_specs(d: usize) -> Vec<ParamSpec> {
    vec![
        fan_in_proj("relation.fc1.w", 3 * d, d),
        ParamSpec::new("relation.fc1.b", vec![d], Init::Zeros),
        fan_in_proj("relation.fc2.w", d, 1),
        ParamSpec::new("relation.fc2.b", vec![1], Init::Zeros),
    ]
}

/// Pairwise same-group logits: a one-hidden-layer MLP over
/// `[x_i ; x_j ; x_i*x_j]`, symmetrized as `(L + L^T)/2`. The diagonal is
/// whatever the MLP produces; consumers exclude it from the loss and pin the
/// corresponding probability to 1.
pub fn relation_logits(g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
    let shape = g.value(features).shape().to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::ShapeMismatch(format!(
            "relation features must be nonempty [N,D], got {:?}",
            shape
        )));
    }
    let n = shape[0];
    let pairs = ops::pairwise_concat_mul(g, features)?;
    let w1 = g.param(store, "relation.fc1.w")?;
    let b1 = g.param(store, "relation.fc1.b")?;
    let h = ops::linear(g, pairs, w1, Some(b1))?;
    let h = ops::gelu(g, h)?;
    let w2 = g.param(store, "relation.fc2.w")?;
    let b2 = g.param(store, "relation.fc2.b")?;
    let raw = ops::linear(g, h, w2, Some(b2))?;
    let raw = ops::reshape(g, raw, vec![n, n])?;
    let rt = ops::permute(g, raw, &[1, 0])?;
    let sym = ops::add(g, raw, rt)?;
    ops::scale(g, sym, 0.5)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues ascending and the matching orthonormal eigenvectors
/// as columns of the returned matrix.
pub fn sym_eigendecomp(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::ShapeMismatch(format!(
            "eigendecomp needs square matrix, got {:?}",
            a.shape()
        )));
    }
    let n = a.shape()[0];
    for i in 0..n {
        for j in (i + 1)..n {
            if (a.at(&[i, j]) - a.at(&[j, i])).abs() > 1e-10 {
                return Err(Error::InvalidInput(format!(
                    "matrix not symmetric at ({i},{j})"
                )));
            }
        }
    }
    let mut m: Vec<f64> = a.data().to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let tol = 1e-14 * scale;

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(m[p * n + q].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() <= tol {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].partial_cmp(&m[j * n + j]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors[row * n + col] = v[row * n + src];
        }
    }
    Ok((eigenvalues, Tensor::new(vec![n, n], vectors)?))
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeded Lloyd k-means with k-means++ init; `restarts` runs, best inertia
/// wins, ties broken by the earlier restart. Deterministic for a fixed seed.
fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Vec<usize> {
    let n = points.len();
    debug_assert!(k >= 1 && k <= n);
    let mut best_labels = vec![0usize; n];
    let mut best_inertia = f64::INFINITY;

    for restart in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart as u64));
        // k-means++ seeding
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
        centers.push(points[rng.random_range(0..n)].clone());
        while centers.len() < k {
            let d2: Vec<f64> = points
                .iter()
                .map(|p| {
                    centers
                        .iter()
                        .map(|c| squared_distance(p, c))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let total: f64 = d2.iter().sum();
            let next = if total > 0.0 {
                let mut target = rng.random_range(0.0..total);
                let mut chosen = n - 1;
                for (i, &w) in d2.iter().enumerate() {
                    if target < w {
                        chosen = i;
                        break;
                    }
                    target -= w;
                }
                chosen
            } else {
                rng.random_range(0..n)
            };
            centers.push(points[next].clone());
        }

        let mut labels = vec![0usize; n];
        for _ in 0..100 {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (ci, c) in centers.iter().enumerate() {
                    let d = squared_distance(p, c);
                    if d < best_d {
                        best_d = d;
                        best = ci;
                    }
                }
                if labels[i] != best {
                    labels[i] = best;
                    changed = true;
                }
            }
            // recompute centers; empty clusters grab the farthest point
            let dim = points[0].len();
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (i, p) in points.iter().enumerate() {
                counts[labels[i]] += 1;
                for (sv, &pv) in sums[labels[i]].iter_mut().zip(p) {
                    *sv += pv;
                }
            }
            for ci in 0..k {
                if counts[ci] == 0 {
                    let far = (0..n)
                        .max_by(|&a, &b| {
                            squared_distance(&points[a], &centers[labels[a]])
                                .partial_cmp(&squared_distance(&points[b], &centers[labels[b]]))
                                .unwrap()
                        })
                        .unwrap();
                    labels[far] = ci;
                    centers[ci] = points[far].clone();
                    changed = true;
                } else {
                    for d in 0..dim {
                        centers[ci][d] = sums[ci][d] / counts[ci] as f64;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = points
            .iter()
            .zip(&labels)
            .map(|(p, &l)| squared_distance(p, &centers[l]))
            .sum();
        if inertia < best_inertia {
            best_inertia = inertia;
            best_labels = labels;
        }
    }
    best_labels
}

const KMEANS_RESTARTS: usize = 10;

/// Social-group detection on a same-group affinity matrix.
///
/// Members with no plausible partner (every off-diagonal affinity at or
/// below one half, which subsumes zero degree) become their own singleton
/// groups up front; degree normalization would otherwise inflate the mutual
/// coupling of such members and blur the eigengap. On the remaining members:
/// `L_sym = I - D^-1/2 W D^-1/2`, cluster count by the largest eigengap among
/// the smallest `kmax + 1` eigenvalues, then seeded k-means on row-normalized
/// eigenvectors.
pub fn spectral_cluster(affinity: &RelationMatrix, kmax: usize, seed: u64) -> Result<Partition> {
    let n = affinity.n();
    if n == 0 {
        return Err(Error::InvalidInput("empty affinity".into()));
    }
    if kmax > n {
        return Err(Error::InvalidInput(format!("kmax {kmax} exceeds n {n}")));
    }
    let kmax = kmax.max(1);

    let mut degree = vec![0.0f64; n];
    let mut strongest = vec![0.0f64; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                degree[i] += affinity.at(i, j);
                strongest[i] = strongest[i].max(affinity.at(i, j));
            }
        }
    }
    let active: Vec<usize> = (0..n).filter(|&i| strongest[i] > 0.5).collect();
    let isolated: Vec<usize> = (0..n).filter(|&i| strongest[i] <= 0.5).collect();

    let mut groups: Vec<Vec<usize>> = isolated.iter().map(|&i| vec![i]).collect();
    let m = active.len();
    if m > 0 {
        if m == 1 {
            groups.push(vec![active[0]]);
        } else {
            let mut lap = vec![0.0f64; m * m];
            for (ai, &i) in active.iter().enumerate() {
                for (aj, &j) in active.iter().enumerate() {
                    if ai == aj {
                        lap[ai * m + aj] = 1.0;
                    } else {
                        lap[ai * m + aj] =
                            -affinity.at(i, j) / (degree[i] * degree[j]).sqrt();
                    }
                }
            }
            let (eigenvalues, vectors) = sym_eigendecomp(&Tensor::new(vec![m, m], lap)?)?;

            let gap_count = kmax.min(m - 1);
            let mut k = 1;
            let mut best_gap = f64::NEG_INFINITY;
            for i in 0..gap_count {
                let gap = eigenvalues[i + 1] - eigenvalues[i];
                if gap > best_gap + 1e-15 {
                    best_gap = gap;
                    k = i + 1;
                }
            }

            if k == 1 {
                groups.push(active.clone());
            } else {
                let mut points: Vec<Vec<f64>> = Vec::with_capacity(m);
                for row in 0..m {
                    let mut p: Vec<f64> = (0..k).map(|c| vectors.at(&[row, c])).collect();
                    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 1e-12 {
                        for v in p.iter_mut() {
                            *v /= norm;
                        }
                    }
                    points.push(p);
                }
                let labels = kmeans(&points, k, seed, KMEANS_RESTARTS);
                let mut by_label: std::collections::BTreeMap<usize, Vec<usize>> =
                    Default::default();
                for (ai, &label) in labels.iter().enumerate() {
                    by_label.entry(label).or_default().push(active[ai]);
                }
                groups.extend(by_label.into_values());
            }
        }
    }
    Partition::new(groups, n)
}
