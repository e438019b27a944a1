//! Per-granularity classification heads, the four-term training objective,
//! and the multi-label decision rule.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::grouping::RelationMatrix;
use crate::nn::{fan_in_proj, Init, ParamSpec};
use crate::ops;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// A multi-label assignment: set of class indices.
pub type LabelSet = BTreeSet<usize>;

/// Class counts per granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelTaxonomy {
    pub individual: usize,
    pub social: usize,
    pub global: usize,
}

impl LabelTaxonomy {
    pub fn validate(&self) -> Result<()> {
        if self.individual == 0 || self.social == 0 || self.global == 0 {
            return Err(Error::Config("all class counts must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for LabelTaxonomy {
    fn default() -> Self {
        Self {
            individual: 6,
            social: 4,
            global: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Individual,
    Social,
    Global,
}

impl Head {
    fn key(&self) -> &'static str {
        match self {
            Head::Individual => "individual",
            Head::Social => "social",
            Head::Global => "global",
        }
    }
}

pub fn head_specs(d: usize, taxonomy: &LabelTaxonomy) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for (head, classes) in [
        (Head::Individual, taxonomy.individual),
        (Head::Social, taxonomy.social),
        (Head::Global, taxonomy.global),
    ] {
        specs.push(fan_in_proj(format!("head.{}.w", head.key()), d, classes));
        specs.push(ParamSpec::new(
            format!("head.{}.b", head.key()),
            vec![classes],
            Init::Zeros,
        ));
    }
    specs
}

/// Single linear layer per head; multi-label semantics (independent
/// sigmoids). `M = 0` rows yield an empty logit matrix without error.
pub fn classify(
    g: &mut Graph,
    store: &ParamStore,
    features: Var,
    head: Head,
) -> Result<Var> {
    let w = g.param(store, &format!("head.{}.w", head.key()))?;
    let b = g.param(store, &format!("head.{}.b", head.key()))?;
    ops::linear(g, features, w, Some(b))
}

/// Multi-hot encoding of label sets as a `[rows, classes]` tensor.
pub fn multi_hot(labels: &[LabelSet], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, set) in labels.iter().enumerate() {
        for &l in set {
            if l >= classes {
                return Err(Error::TaxonomyMismatch(format!(
                    "label {l} exceeds class count {classes}"
                )));
            }
            t.data_mut()[i * classes + l] = 1.0;
        }
    }
    Ok(t)
}

/// Loss terms: individual, social, global, relation; total is their sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub individual: f64,
    pub social: f64,
    pub global: f64,
    pub relation: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        for (name, v) in [
            ("individual", self.individual),
            ("social", self.social),
            ("global", self.global),
            ("relation", self.relation),
        ] {
            if !v.is_finite() {
                return Some(name);
            }
        }
        None
    }
}

/// Loss vars still on the tape, for backward.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub individual: Var,
    pub social: Var,
    pub global: Var,
    pub relation: Var,
    pub total: Var,
}

/// Per-granularity logits entering the objective. Social logits must be
/// computed over the ground-truth groups at training time.
pub struct PredictionLogits {
    pub individual: Var,
    pub social: Var,
    pub global: Var,
    pub relation: Var,
}

/// Ground truth for one clip, already encoded.
pub struct GroundTruth {
    pub individual: Tensor,
    pub social: Tensor,
    pub global: Tensor,
    pub relation: RelationMatrix,
}

/// Four-term objective: mean binary cross-entropy per term over individuals,
/// ground-truth groups, the global labels, and the off-diagonal relation
/// entries; the total is the plain sum of the terms.
pub fn multitask_loss(
    g: &mut Graph,
    preds: &PredictionLogits,
    gt: &GroundTruth,
) -> Result<(LossVars, LossBreakdown)> {
    let l_i = ops::bce_with_logits(g, preds.individual, &gt.individual)?;
    let l_s = ops::bce_with_logits(g, preds.social, &gt.social)?;
    let l_g = ops::bce_with_logits(g, preds.global, &gt.global)?;

    let n = gt.relation.n();
    let rel_off = ops::offdiag(g, preds.relation)?;
    let mut rel_targets = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                rel_targets.push(gt.relation.at(i, j));
            }
        }
    }
    let l_d = ops::bce_with_logits(g, rel_off, &Tensor::from_vec(rel_targets))?;

    let partial = ops::add(g, l_i, l_s)?;
    let partial = ops::add(g, partial, l_g)?;
    let total = ops::add(g, partial, l_d)?;

    let vars = LossVars {
        individual: l_i,
        social: l_s,
        global: l_g,
        relation: l_d,
        total,
    };
    let breakdown = LossBreakdown {
        individual: g.value(l_i).item(),
        social: g.value(l_s).item(),
        global: g.value(l_g).item(),
        relation: g.value(l_d).item(),
        total: g.value(total).item(),
    };
    Ok((vars, breakdown))
}

/// Threshold rule: a label is present when its sigmoid probability strictly
/// exceeds the threshold. A row with nothing above threshold falls back to
/// its argmax label so no prediction is ever empty.
pub fn decide_labels(logits: &Tensor, threshold: f64) -> Result<Vec<LabelSet>> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold {threshold} outside (0,1)"
        )));
    }
    if logits.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "logits must be [M,C], got {:?}",
            logits.shape()
        )));
    }
    let classes = logits.shape()[1];
    if classes == 0 {
        return Err(Error::Config("no classes to decide over".into()));
    }
    let mut out = Vec::with_capacity(logits.shape()[0]);
    for row in logits.data().chunks(classes) {
        let mut set = LabelSet::new();
        for (c, &z) in row.iter().enumerate() {
            let p = 1.0 / (1.0 + (-z).exp());
            if p > threshold {
                set.insert(c);
            }
        }
        if set.is_empty() {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(c, _)| c)
                .unwrap();
            set.insert(argmax);
        }
        out.push(set);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::Partition;
    use crate::nn::register;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(v: &[usize]) -> LabelSet {
        v.iter().cloned().collect()
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let taxonomy = LabelTaxonomy::default();
        let mut store = ParamStore::new();
        register(&mut store, &head_specs(4, &taxonomy), 0);
        store.insert("head.global.w", Tensor::zeros(&[4, 3]));
        let mut g = Graph::new(0);
        let f = g.input(Tensor::full(&[1, 4], 0.7)).unwrap();
        let logits = classify(&mut g, &store, f, Head::Global).unwrap();
        assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_feature_matrix_yields_empty_logits() {
        let taxonomy = LabelTaxonomy::default();
        let mut store = ParamStore::new();
        register(&mut store, &head_specs(4, &taxonomy), 1);
        let mut g = Graph::new(0);
        let f = g.input(Tensor::zeros(&[0, 4])).unwrap();
        let logits = classify(&mut g, &store, f, Head::Social).unwrap();
        assert_eq!(g.value(logits).shape(), &[0, 4]);
    }

    #[test]
    fn classify_matches_matmul_oracle() {
        let taxonomy = LabelTaxonomy::default();
        let mut store = ParamStore::new();
        register(&mut store, &head_specs(3, &taxonomy), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats = Tensor::new(
            vec![2, 3],
            (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut g = Graph::new(0);
        let f = g.input(feats.clone()).unwrap();
        let logits = classify(&mut g, &store, f, Head::Individual).unwrap();
        let w = store.get("head.individual.w").unwrap();
        for i in 0..2 {
            for c in 0..6 {
                let expect: f64 = (0..3)
                    .map(|k| feats.at(&[i, k]) * w.data()[k * 6 + c])
                    .sum();
                assert!((g.value(logits).at(&[i, c]) - expect).abs() < 1e-12);
            }
        }
    }

    fn loss_inputs(
        g: &mut Graph,
        ind: Tensor,
        soc: Tensor,
        glob: Tensor,
        rel: Tensor,
    ) -> PredictionLogits {
        PredictionLogits {
            individual: g.input(ind).unwrap(),
            social: g.input(soc).unwrap(),
            global: g.input(glob).unwrap(),
            relation: g.input(rel).unwrap(),
        }
    }

    #[test]
    fn perfect_saturated_logits_give_negligible_loss() {
        let partition = Partition::new(vec![vec![0, 1], vec![2]], 3).unwrap();
        let gt = GroundTruth {
            individual: multi_hot(&[labels(&[0]), labels(&[1]), labels(&[0, 1])], 2).unwrap(),
            social: multi_hot(&[labels(&[0]), labels(&[1])], 2).unwrap(),
            global: multi_hot(&[labels(&[0])], 2).unwrap(),
            relation: RelationMatrix::from_partition(&partition),
        };
        let saturate = |t: &Tensor| t.map(|v| if v > 0.5 { 20.0 } else { -20.0 });
        let rel_logits = {
            let mut m = Tensor::zeros(&[3, 3]);
            for i in 0..3 {
                for j in 0..3 {
                    m.data_mut()[i * 3 + j] = if gt.relation.at(i, j) > 0.5 { 20.0 } else { -20.0 };
                }
            }
            m
        };
        let mut g = Graph::new(0);
        let preds = loss_inputs(
            &mut g,
            saturate(&gt.individual),
            saturate(&gt.social),
            saturate(&gt.global),
            rel_logits,
        );
        let (_, breakdown) = multitask_loss(&mut g, &preds, &gt).unwrap();
        assert!(breakdown.total < 1e-6);
    }

    #[test]
    fn zero_logits_half_ones_targets_give_ln2_terms() {
        let partition = Partition::new(vec![vec![0], vec![1]], 2).unwrap();
        let gt = GroundTruth {
            individual: multi_hot(&[labels(&[0]), labels(&[1])], 2).unwrap(),
            social: multi_hot(&[labels(&[0]), labels(&[1])], 2).unwrap(),
            global: multi_hot(&[labels(&[0])], 2).unwrap(),
            relation: RelationMatrix::from_partition(&partition),
        };
        let mut g = Graph::new(0);
        let preds = loss_inputs(
            &mut g,
            Tensor::zeros(&[2, 2]),
            Tensor::zeros(&[2, 2]),
            Tensor::zeros(&[1, 2]),
            Tensor::zeros(&[2, 2]),
        );
        let (_, breakdown) = multitask_loss(&mut g, &preds, &gt).unwrap();
        let ln2 = 2.0f64.ln();
        for term in [
            breakdown.individual,
            breakdown.social,
            breakdown.global,
            breakdown.relation,
        ] {
            assert!((term - ln2).abs() < 1e-12);
        }
        assert_eq!(
            breakdown.total,
            breakdown.individual + breakdown.social + breakdown.global + breakdown.relation
        );
    }

    #[test]
    fn random_case_matches_independent_bce_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rand_t = |shape: &[usize]| {
            Tensor::new(
                shape.to_vec(),
                (0..shape.iter().product::<usize>())
                    .map(|_| rng.random_range(-3.0..3.0))
                    .collect(),
            )
            .unwrap()
        };
        let partition = Partition::new(vec![vec![0, 2], vec![1]], 3).unwrap();
        let gt = GroundTruth {
            individual: multi_hot(&[labels(&[0]), labels(&[1, 2]), labels(&[2])], 3).unwrap(),
            social: multi_hot(&[labels(&[1]), labels(&[0])], 2).unwrap(),
            global: multi_hot(&[labels(&[0, 1])], 2).unwrap(),
            relation: RelationMatrix::from_partition(&partition),
        };
        let ind = rand_t(&[3, 3]);
        let soc = rand_t(&[2, 2]);
        let glob = rand_t(&[1, 2]);
        let mut rel = rand_t(&[3, 3]);
        // symmetrize so the off-diagonal view is well-defined
        for i in 0..3 {
            for j in 0..3 {
                if i < j {
                    let v = rel.at(&[i, j]);
                    rel.data_mut()[j * 3 + i] = v;
                }
            }
        }

        let bce = |z: f64, t: f64| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        let mean_bce = |logits: &Tensor, targets: &Tensor| -> f64 {
            logits
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&z, &t)| bce(z, t))
                .sum::<f64>()
                / logits.numel() as f64
        };
        let expect_i = mean_bce(&ind, &gt.individual);
        let expect_s = mean_bce(&soc, &gt.social);
        let expect_g = mean_bce(&glob, &gt.global);
        let mut rel_sum = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    rel_sum += bce(rel.at(&[i, j]), gt.relation.at(i, j));
                }
            }
        }
        let expect_d = rel_sum / 6.0;

        let mut g = Graph::new(0);
        let preds = loss_inputs(&mut g, ind, soc, glob, rel);
        let (_, breakdown) = multitask_loss(&mut g, &preds, &gt).unwrap();
        assert!((breakdown.individual - expect_i).abs() < 1e-12);
        assert!((breakdown.social - expect_s).abs() < 1e-12);
        assert!((breakdown.global - expect_g).abs() < 1e-12);
        assert!((breakdown.relation - expect_d).abs() < 1e-12);
    }

    #[test]
    fn single_member_clip_has_zero_relation_loss() {
        let partition = Partition::new(vec![vec![0]], 1).unwrap();
        let gt = GroundTruth {
            individual: multi_hot(&[labels(&[0])], 2).unwrap(),
            social: multi_hot(&[labels(&[0])], 2).unwrap(),
            global: multi_hot(&[labels(&[0])], 2).unwrap(),
            relation: RelationMatrix::from_partition(&partition),
        };
        let mut g = Graph::new(0);
        let preds = loss_inputs(
            &mut g,
            Tensor::zeros(&[1, 2]),
            Tensor::zeros(&[1, 2]),
            Tensor::zeros(&[1, 2]),
            Tensor::zeros(&[1, 1]),
        );
        let (_, breakdown) = multitask_loss(&mut g, &preds, &gt).unwrap();
        assert_eq!(breakdown.relation, 0.0);
    }

    #[test]
    fn decide_labels_threshold_and_fallback() {
        let logits = Tensor::new(vec![2, 2], vec![-5.0, 5.0, -5.0, -6.0]).unwrap();
        let sets = decide_labels(&logits, 0.5).unwrap();
        assert_eq!(sets[0], labels(&[1]));
        // all below threshold: argmax fallback picks class 0
        assert_eq!(sets[1], labels(&[0]));
    }

    #[test]
    fn decide_labels_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Tensor::new(
            vec![5, 4],
            (0..20).map(|_| rng.random_range(-4.0..4.0)).collect(),
        )
        .unwrap();
        let threshold = 0.35;
        let sets = decide_labels(&logits, threshold).unwrap();
        for (i, set) in sets.iter().enumerate() {
            let row = &logits.data()[i * 4..(i + 1) * 4];
            let mut expect = LabelSet::new();
            for (c, &z) in row.iter().enumerate() {
                if 1.0 / (1.0 + (-z).exp()) > threshold {
                    expect.insert(c);
                }
            }
            if expect.is_empty() {
                let mut best = 0;
                for c in 1..4 {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                expect.insert(best);
            }
            assert_eq!(*set, expect);
        }
    }

    #[test]
    fn decide_labels_rejects_bad_threshold() {
        let logits = Tensor::zeros(&[1, 2]);
        assert!(decide_labels(&logits, 0.0).is_err());
        assert!(decide_labels(&logits, 1.0).is_err());
    }
}
