//! Cross-granularity aggregation with a shared encoder and per-task encoders.
//!
//! A member sequence is prepended with a learnable summary (cls) token plus a
//! learnable position embedding, then run through a task-specific encoder and
//! a shared encoder in parallel. The two cls outputs mix as
//! `task_cls + lambda * shared_cls`. The shared encoder's weights are one
//! storage referenced by both the social and the global path; that sharing is
//! the point of the design.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{encoder_stack, encoder_stack_specs, Init, ParamSpec, INIT_STD};
use crate::ops;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Social,
    Global,
}

impl Variant {
    fn key(&self) -> &'static str {
        match self {
            Variant::Social => "social",
            Variant::Global => "global",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AggregationConfig {
    /// Layers in each task-specific encoder.
    pub task_layers: usize,
    pub task_heads: usize,
    /// Layers in the shared encoder.
    pub shared_layers: usize,
    pub shared_heads: usize,
    pub lambda_social: f64,
    pub lambda_global: f64,
    /// Capacity of the position table (max members in one sequence).
    pub max_members: usize,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            task_layers: 4,
            task_heads: 12,
            shared_layers: 2,
            shared_heads: 12,
            lambda_social: 0.8,
            lambda_global: 1.0,
            max_members: 64,
        }
    }
}

impl AggregationConfig {
    pub fn lambda(&self, variant: Variant) -> f64 {
        match variant {
            Variant::Social => self.lambda_social,
            Variant::Global => self.lambda_global,
        }
    }
}

pub fn aggregation_specs(cfg: &AggregationConfig, d: usize) -> Vec<ParamSpec> {
    let mut specs = vec![
        ParamSpec::new(
            "agg.pos",
            vec![cfg.max_members + 1, d],
            Init::Normal(INIT_STD),
        ),
        ParamSpec::new("agg.social.cls", vec![1, d], Init::Normal(INIT_STD)),
        ParamSpec::new("agg.global.cls", vec![1, d], Init::Normal(INIT_STD)),
    ];
    specs.extend(encoder_stack_specs("agg.social", d, cfg.task_layers, false));
    specs.extend(encoder_stack_specs("agg.global", d, cfg.task_layers, false));
    specs.extend(encoder_stack_specs("agg.shared", d, cfg.shared_layers, false));
    specs
}

/// `[cls ; member_1 .. member_M] + pos[0..=M]`, shape `[M+1, D]`.
pub fn build_sequence(
    g: &mut Graph,
    store: &ParamStore,
    members: Var,
    variant: Variant,
    cfg: &AggregationConfig,
) -> Result<Var> {
    let mshape = g.value(members).shape().to_vec();
    if mshape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "members must be [M,D], got {:?}",
            mshape
        )));
    }
    let m = mshape[0];
    if m > cfg.max_members {
        return Err(Error::Capacity(format!(
            "{m} members exceed position table capacity {}",
            cfg.max_members
        )));
    }
    let cls = g.param(store, &format!("agg.{}.cls", variant.key()))?;
    let seq = if m == 0 {
        cls
    } else {
        ops::concat(g, 0, &[cls, members])?
    };
    let pos = g.param(store, "agg.pos")?;
    let pos_rows = ops::slice(g, pos, 0, 0, m + 1)?;
    ops::add(g, seq, pos_rows)
}

/// Aggregate a member set to one vector: task and shared encoders run on the
/// same built sequence, and only the cls position is read out.
pub fn aggregate(
    g: &mut Graph,
    store: &ParamStore,
    members: Var,
    variant: Variant,
    cfg: &AggregationConfig,
) -> Result<Var> {
    let m = g.value(members).shape()[0];
    if m == 0 {
        return Err(Error::InvalidInput("aggregate of zero members".into()));
    }
    let seq = build_sequence(g, store, members, variant, cfg)?;
    let len = m + 1;
    let d = g.value(seq).shape()[1];
    let seq = ops::reshape(g, seq, vec![1, len, d])?;

    let task = encoder_stack(
        g,
        store,
        &format!("agg.{}", variant.key()),
        seq,
        cfg.task_layers,
        cfg.task_heads,
    )?;
    let task_cls = cls_row(g, task, d)?;

    let lambda = cfg.lambda(variant);
    if lambda == 0.0 {
        // Degenerate mix: the result is the task cls bitwise; the shared
        // branch would contribute nothing and receive no gradient.
        return Ok(task_cls);
    }
    let shared = encoder_stack(g, store, "agg.shared", seq, cfg.shared_layers, cfg.shared_heads)?;
    let shared_cls = cls_row(g, shared, d)?;
    let shared_cls = ops::scale(g, shared_cls, lambda)?;
    ops::add(g, task_cls, shared_cls)
}

fn cls_row(g: &mut Graph, seq: Var, d: usize) -> Result<Var> {
    let row = ops::slice(g, seq, 1, 0, 1)?;
    ops::reshape(g, row, vec![1, d])
}

/// Aggregate each group of a partition; row order follows partition order.
pub fn aggregate_groups(
    g: &mut Graph,
    store: &ParamStore,
    features: Var,
    partition: &[Vec<usize>],
    cfg: &AggregationConfig,
) -> Result<Var> {
    let n = g.value(features).shape()[0];
    let mut seen = vec![false; n];
    for group in partition {
        if group.is_empty() {
            return Err(Error::InvalidInput("empty group in partition".into()));
        }
        for &i in group {
            if i >= n {
                return Err(Error::InvalidInput(format!("member {i} out of range {n}")));
            }
            if seen[i] {
                return Err(Error::InvalidInput(format!(
                    "member {i} appears in more than one group"
                )));
            }
            seen[i] = true;
        }
    }
    let mut rows = Vec::with_capacity(partition.len());
    for group in partition {
        let members = ops::gather_rows(g, features, group)?;
        rows.push(aggregate(g, store, members, Variant::Social, cfg)?);
    }
    ops::concat(g, 0, &rows)
}

/// Aggregate every individual to the global representation `[1,D]`.
pub fn aggregate_global(
    g: &mut Graph,
    store: &ParamStore,
    features: Var,
    cfg: &AggregationConfig,
) -> Result<Var> {
    aggregate(g, store, features, Variant::Global, cfg)
}
