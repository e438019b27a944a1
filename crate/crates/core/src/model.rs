//! Full model assembly: configuration, parameter registration, and the
//! clip-level forward pass for training and evaluation.

use crate::aggregation::{
    aggregate_global, aggregate_groups, aggregation_specs, AggregationConfig,
};
use crate::error::{Error, Result};
use crate::featmap::{backbone_specs, flatten_rois, roi_align, roi_proj_specs, synth_backbone, BACKBONE_STRIDE};
use crate::graph::{Graph, Var};
use crate::grouping::{relation_logits, relation_specs, spectral_cluster, Partition, RelationMatrix};
use crate::heads::{
    classify, head_specs, multi_hot, multitask_loss, GroundTruth, Head, LabelTaxonomy,
    LossBreakdown, LossVars, PredictionLogits,
};
use crate::nn::{register, ParamSpec};
use crate::ops;
use crate::params::ParamStore;
use crate::scene::{fuse_global, fuse_rows, fusion_specs, scene_pool, scene_specs, scene_tokens};
use crate::spatiotemporal::{encode as st_encode, spatiotemporal_specs, SpatioTemporalConfig, StructureKind};
use crate::synth::ClipSample;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ModelConfig {
    /// Feature dimension D. Must be divisible by every head count.
    pub dim: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    /// Backbone output channels.
    pub channels: usize,
    /// RoI crop resolution (square).
    pub roi_size: usize,
    pub st: SpatioTemporalConfig,
    pub agg: AggregationConfig,
    /// Visual scene token count K.
    pub scene_tokens: usize,
    pub fusion_heads: usize,
    pub taxonomy: LabelTaxonomy,
    /// Multi-label decision threshold.
    pub threshold: f64,
    /// Cap on cluster count during group detection (clamped to N per clip).
    pub kmax: usize,
    /// Ablation toggles: replacements are temporal mean pooling, max-pool
    /// aggregation, and no scene fusion respectively.
    pub use_st_encoder: bool,
    pub use_aggregation: bool,
    pub use_scene: bool,
    /// Parameter init / clustering seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            // 96 divides by both 8 and 12 heads; the head counts are fixed
            // by the architecture, the width is free.
            dim: 96,
            frame_h: 64,
            frame_w: 64,
            channels: 32,
            roi_size: 3,
            st: SpatioTemporalConfig::default(),
            agg: AggregationConfig::default(),
            scene_tokens: 16,
            fusion_heads: 8,
            taxonomy: LabelTaxonomy::default(),
            threshold: 0.5,
            kmax: 8,
            use_st_encoder: true,
            use_aggregation: true,
            use_scene: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A deliberately tiny configuration for exhaustive gradient checking.
    pub fn tiny() -> Self {
        Self {
            dim: 16,
            frame_h: 16,
            frame_w: 16,
            channels: 4,
            roi_size: 2,
            st: SpatioTemporalConfig {
                layers: 1,
                heads: 2,
                structure: StructureKind::Serial,
            },
            agg: AggregationConfig {
                task_layers: 1,
                task_heads: 2,
                shared_layers: 1,
                shared_heads: 2,
                lambda_social: 0.8,
                lambda_global: 1.0,
                max_members: 8,
            },
            scene_tokens: 2,
            fusion_heads: 2,
            taxonomy: LabelTaxonomy {
                individual: 4,
                social: 4,
                global: 4,
            },
            threshold: 0.5,
            kmax: 4,
            use_st_encoder: true,
            use_aggregation: true,
            use_scene: true,
            seed: 0,
        }
    }

    /// Desk-scale configuration used by the overfit experiment: D = 64 with
    /// 8 heads everywhere (64 is not divisible by 12).
    pub fn desk() -> Self {
        Self {
            dim: 64,
            agg: AggregationConfig {
                task_layers: 2,
                task_heads: 8,
                shared_layers: 2,
                shared_heads: 8,
                ..AggregationConfig::default()
            },
            st: SpatioTemporalConfig {
                layers: 2,
                heads: 8,
                structure: StructureKind::Serial,
            },
            scene_tokens: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.taxonomy.validate()?;
        for (what, heads) in [
            ("spatio-temporal", self.st.heads),
            ("task aggregation", self.agg.task_heads),
            ("shared aggregation", self.agg.shared_heads),
            ("fusion", self.fusion_heads),
        ] {
            if heads == 0 || self.dim % heads != 0 {
                return Err(Error::Config(format!(
                    "dim {} not divisible by {what} heads {heads}",
                    self.dim
                )));
            }
        }
        if self.frame_h % BACKBONE_STRIDE != 0 || self.frame_w % BACKBONE_STRIDE != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} not divisible by stride {BACKBONE_STRIDE}",
                self.frame_h, self.frame_w
            )));
        }
        if !(0.0 < self.threshold && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0,1)".into()));
        }
        if self.roi_size == 0 || self.scene_tokens == 0 || self.kmax == 0 {
            return Err(Error::Config("roi_size, scene_tokens, kmax must be >= 1".into()));
        }
        Ok(())
    }

    pub fn fm_h(&self) -> usize {
        self.frame_h / BACKBONE_STRIDE
    }

    pub fn fm_w(&self) -> usize {
        self.frame_w / BACKBONE_STRIDE
    }

    /// Every parameter the configured model owns, in registration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = backbone_specs(self.channels);
        specs.extend(roi_proj_specs(self.channels, self.roi_size, self.dim));
        if self.use_st_encoder {
            specs.extend(spatiotemporal_specs(&self.st, self.dim));
        }
        if self.use_aggregation {
            specs.extend(aggregation_specs(&self.agg, self.dim));
        }
        if self.use_scene {
            specs.extend(scene_specs(
                self.channels,
                self.fm_h(),
                self.fm_w(),
                self.scene_tokens,
                self.dim,
            ));
            specs.extend(fusion_specs(self.dim));
        }
        specs.extend(relation_specs(self.dim));
        specs.extend(head_specs(self.dim, &self.taxonomy));
        specs
    }

    /// Fresh parameter store for this configuration.
    pub fn build_params(&self) -> Result<ParamStore> {
        self.validate()?;
        let mut store = ParamStore::new();
        register(&mut store, &self.param_specs(), self.seed);
        Ok(store)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything one forward pass produces.
pub struct ForwardPass {
    pub individual_logits: Var,
    /// Over the partition's groups, in partition order.
    pub social_logits: Var,
    pub global_logits: Var,
    pub relation_logits: Var,
    /// Ground truth in train mode, detected in eval mode.
    pub partition: Partition,
    /// Scene attention `[T,K,H'W']` when the scene module is enabled.
    pub scene_attention: Option<Var>,
    pub loss_vars: Option<LossVars>,
    pub loss: Option<LossBreakdown>,
}

/// Detached per-clip prediction.
#[derive(Clone, Debug)]
pub struct PanoramicPrediction {
    pub individual_logits: Tensor,
    pub social_logits: Tensor,
    pub global_logits: Tensor,
    pub relation: RelationMatrix,
    pub partition: Partition,
}

impl ForwardPass {
    pub fn prediction(&self, g: &Graph) -> Result<PanoramicPrediction> {
        Ok(PanoramicPrediction {
            individual_logits: g.value(self.individual_logits).clone(),
            social_logits: g.value(self.social_logits).clone(),
            global_logits: g.value(self.global_logits).clone(),
            relation: RelationMatrix::from_logits(g.value(self.relation_logits))?,
            partition: self.partition.clone(),
        })
    }
}

fn ground_truth(clip: &ClipSample, taxonomy: &LabelTaxonomy) -> Result<GroundTruth> {
    Ok(GroundTruth {
        individual: multi_hot(&clip.individual_labels, taxonomy.individual)?,
        social: multi_hot(&clip.social_labels, taxonomy.social)?,
        global: multi_hot(&[clip.global_labels.clone()], taxonomy.global)?,
        relation: clip.relation.clone(),
    })
}

/// Max-pool replacement for the aggregation ablation: per-group elementwise max.
fn maxpool_groups(g: &mut Graph, features: Var, partition: &Partition) -> Result<Var> {
    let mut rows = Vec::with_capacity(partition.len());
    for group in partition.groups() {
        let members = ops::gather_rows(g, features, group)?;
        rows.push(ops::max_rows(g, members)?);
    }
    ops::concat(g, 0, &rows)
}

struct Prelude {
    x_st: Var,
    relation: Var,
    fm: crate::featmap::FeatureMap,
}

/// Backbone, crops, spatio-temporal encoding, relation logits.
fn forward_prelude(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    clip: &ClipSample,
) -> Result<Prelude> {
    cfg.validate()?;
    if clip.member_count() == 0 {
        return Err(Error::InvalidInput("clip with zero individuals".into()));
    }
    if clip.frames.shape()[2] != cfg.frame_h || clip.frames.shape()[3] != cfg.frame_w {
        return Err(Error::Config(format!(
            "clip frames {:?} do not match configured {}x{}",
            clip.frames.shape(),
            cfg.frame_h,
            cfg.frame_w
        )));
    }
    let fm = synth_backbone(g, store, &clip.frames, cfg.channels)?;
    let rois = roi_align(g, &fm, &clip.boxes, cfg.roi_size, cfg.roi_size)?;
    let x = flatten_rois(g, store, rois)?; // [T,N,D]
    let x_st = if cfg.use_st_encoder {
        st_encode(g, store, x, &cfg.st)?
    } else {
        ops::mean_axis(g, x, 0)? // temporal mean ablation, [N,D]
    };
    let relation = relation_logits(g, store, x_st)?;
    Ok(Prelude { x_st, relation, fm })
}

/// Forward one clip. In train mode social features aggregate over the
/// ground-truth groups and the four-term loss is attached; in eval mode the
/// partition comes from spectral clustering of the predicted relations.
pub fn forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    clip: &ClipSample,
    mode: Mode,
) -> Result<ForwardPass> {
    let prelude = forward_prelude(g, store, cfg, clip)?;
    let partition = match mode {
        Mode::Train => clip.partition.clone(),
        Mode::Eval => {
            let probs = RelationMatrix::from_logits(g.value(prelude.relation))?;
            spectral_cluster(&probs, cfg.kmax.min(clip.member_count()), cfg.seed)?
        }
    };
    finish_forward(g, store, cfg, clip, mode, prelude, partition)
}

/// Eval-mode forward with the group detection forced to a given partition
/// (for instance the ground truth), bypassing spectral clustering.
pub fn forward_with_partition(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    clip: &ClipSample,
    partition: Partition,
) -> Result<ForwardPass> {
    let prelude = forward_prelude(g, store, cfg, clip)?;
    finish_forward(g, store, cfg, clip, Mode::Eval, prelude, partition)
}

fn finish_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    clip: &ClipSample,
    mode: Mode,
    prelude: Prelude,
    partition: Partition,
) -> Result<ForwardPass> {
    let Prelude { x_st, relation, fm } = prelude;
    // cross-granularity aggregation (or max-pool ablation)
    let (social_feat, global_feat) = if cfg.use_aggregation {
        (
            aggregate_groups(g, store, x_st, partition.groups(), &cfg.agg)?,
            aggregate_global(g, store, x_st, &cfg.agg)?,
        )
    } else {
        (
            maxpool_groups(g, x_st, &partition)?,
            ops::max_rows(g, x_st)?,
        )
    };

    // scene representation and fusion
    let (ind_feat, social_feat, global_feat, scene_attention) = if cfg.use_scene {
        let tokens = scene_tokens(g, store, &fm, cfg.scene_tokens, cfg.dim)?;
        let repr = scene_pool(g, &tokens)?;
        let ind = fuse_rows(g, store, "fusion.individual", x_st, &repr, cfg.fusion_heads)?;
        let soc = fuse_rows(g, store, "fusion.social", social_feat, &repr, cfg.fusion_heads)?;
        let glob = fuse_global(g, store, global_feat, &repr)?;
        (ind, soc, glob, Some(tokens.attention))
    } else {
        (x_st, social_feat, global_feat, None)
    };

    let individual_logits = classify(g, store, ind_feat, Head::Individual)?;
    let social_logits = classify(g, store, social_feat, Head::Social)?;
    let global_logits = classify(g, store, global_feat, Head::Global)?;

    let (loss_vars, loss) = match mode {
        Mode::Train => {
            let gt = ground_truth(clip, &cfg.taxonomy)?;
            let preds = PredictionLogits {
                individual: individual_logits,
                social: social_logits,
                global: global_logits,
                relation,
            };
            let (vars, breakdown) = multitask_loss(g, &preds, &gt)?;
            (Some(vars), Some(breakdown))
        }
        Mode::Eval => (None, None),
    };

    Ok(ForwardPass {
        individual_logits,
        social_logits,
        global_logits,
        relation_logits: relation,
        partition,
        scene_attention,
        loss_vars,
        loss,
    })
}
