//! Training and evaluation loops.
//!
//! One optimizer step per batch; per-clip gradients are computed in parallel
//! and reduced in clip order, so runs are deterministic for a fixed seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
use crate::heads::{decide_labels, LabelSet, LossBreakdown};
use crate::metrics::{multilabel_prf, overall_score, social_prf, PanoramicScore, SocialClipEval};
use crate::model::{forward, Mode, ModelConfig};
use crate::optim::{adam_step, AdamConfig};
use crate::params::ParamStore;
use crate::synth::ClipSample;

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Frames per clip the data is expected to carry.
    pub frames: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            frames: 3,
            epochs: 30,
            lr: 7e-6,
            weight_decay: 1e-2,
            seed: 0,
        }
    }
}

/// Per-epoch mean loss terms.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub epochs: Vec<LossBreakdown>,
}

fn clip_loss_and_grads(
    store: &ParamStore,
    cfg: &ModelConfig,
    clip: &ClipSample,
) -> Result<(LossBreakdown, Gradients)> {
    let mut g = Graph::new(cfg.seed);
    let pass = forward(&mut g, store, cfg, clip, Mode::Train)?;
    let breakdown = pass.loss.unwrap();
    if let Some(term) = breakdown.non_finite_term() {
        return Err(Error::NonFiniteLoss(term.to_string()));
    }
    let grads = g.param_grads(pass.loss_vars.unwrap().total)?;
    Ok((breakdown, grads))
}

/// Train in place; one Adam step per batch, batch loss and gradients are the
/// mean over the batch's clips.
pub fn train_loop(
    data: &[ClipSample],
    store: &mut ParamStore,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if tcfg.batch_size == 0 || tcfg.epochs == 0 {
        return Err(Error::Config("batch_size and epochs must be >= 1".into()));
    }
    for clip in data {
        if clip.frames.shape()[0] != tcfg.frames {
            return Err(Error::Config(format!(
                "clip {} has {} frames, train config expects {}",
                clip.id,
                clip.frames.shape()[0],
                tcfg.frames
            )));
        }
    }
    let adam = AdamConfig {
        lr: tcfg.lr,
        weight_decay: tcfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut log = TrainLog::default();
    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            tcfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15),
        );
        order.shuffle(&mut rng);

        let mut epoch_loss = LossBreakdown::default();
        for batch in order.chunks(tcfg.batch_size) {
            let results: Vec<Result<(LossBreakdown, Gradients)>> = batch
                .par_iter()
                .map(|&i| clip_loss_and_grads(store, cfg, &data[i]))
                .collect();
            let mut batch_grads = Gradients::default();
            let mut batch_loss = LossBreakdown::default();
            for r in results {
                let (breakdown, grads) = r?;
                batch_loss.individual += breakdown.individual;
                batch_loss.social += breakdown.social;
                batch_loss.global += breakdown.global;
                batch_loss.relation += breakdown.relation;
                batch_loss.total += breakdown.total;
                batch_grads.accumulate(&grads);
            }
            batch_grads.scale(1.0 / batch.len() as f64);
            adam_step(store, &batch_grads, &adam)?;

            epoch_loss.individual += batch_loss.individual;
            epoch_loss.social += batch_loss.social;
            epoch_loss.global += batch_loss.global;
            epoch_loss.relation += batch_loss.relation;
            epoch_loss.total += batch_loss.total;
        }
        let inv = 1.0 / data.len() as f64;
        epoch_loss.individual *= inv;
        epoch_loss.social *= inv;
        epoch_loss.global *= inv;
        epoch_loss.relation *= inv;
        epoch_loss.total *= inv;
        log.epochs.push(epoch_loss);
    }
    Ok(log)
}

/// Per-clip evaluation outputs feeding the metric aggregation.
#[derive(Clone, Debug)]
pub struct ClipEval {
    pub individual_preds: Vec<LabelSet>,
    pub individual_gts: Vec<LabelSet>,
    pub global_pred: LabelSet,
    pub global_gt: LabelSet,
    pub social: SocialClipEval,
}

/// Score a set of per-clip evaluation outputs: individuals and globals pool
/// as instances across clips, groups match within each clip.
pub fn score_clips(clips: &[ClipEval]) -> Result<PanoramicScore> {
    let mut ind_preds = Vec::new();
    let mut ind_gts = Vec::new();
    let mut glob_preds = Vec::new();
    let mut glob_gts = Vec::new();
    let mut social = Vec::new();
    for clip in clips {
        ind_preds.extend(clip.individual_preds.iter().cloned());
        ind_gts.extend(clip.individual_gts.iter().cloned());
        glob_preds.push(clip.global_pred.clone());
        glob_gts.push(clip.global_gt.clone());
        social.push(clip.social.clone());
    }
    let individual = multilabel_prf(&ind_preds, &ind_gts)?;
    let global = multilabel_prf(&glob_preds, &glob_gts)?;
    let social = social_prf(&social)?;
    Ok(overall_score(individual, social, global))
}

fn max_label(sets: &[LabelSet]) -> usize {
    sets.iter()
        .flat_map(|s| s.iter().cloned())
        .max()
        .map(|m| m + 1)
        .unwrap_or(0)
}

/// Evaluate a frozen model over a dataset: eval-mode forward per clip,
/// label decisions at the configured threshold, metric aggregation.
pub fn evaluate(data: &[ClipSample], store: &ParamStore, cfg: &ModelConfig) -> Result<PanoramicScore> {
    let evals = evaluate_clips(data, store, cfg)?;
    score_clips(&evals)
}

/// The per-clip half of `evaluate`, exposed for inspection.
pub fn evaluate_clips(
    data: &[ClipSample],
    store: &ParamStore,
    cfg: &ModelConfig,
) -> Result<Vec<ClipEval>> {
    evaluate_clips_inner(data, store, cfg, false)
}

/// Evaluation with group detection forced to the ground-truth partitions,
/// for measuring how much detection (rather than labeling) costs.
pub fn evaluate_clips_with_gt_groups(
    data: &[ClipSample],
    store: &ParamStore,
    cfg: &ModelConfig,
) -> Result<Vec<ClipEval>> {
    evaluate_clips_inner(data, store, cfg, true)
}

fn evaluate_clips_inner(
    data: &[ClipSample],
    store: &ParamStore,
    cfg: &ModelConfig,
    force_gt_groups: bool,
) -> Result<Vec<ClipEval>> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    for clip in data {
        if max_label(&clip.individual_labels) > cfg.taxonomy.individual
            || max_label(&clip.social_labels) > cfg.taxonomy.social
            || max_label(std::slice::from_ref(&clip.global_labels)) > cfg.taxonomy.global
        {
            return Err(Error::TaxonomyMismatch(format!(
                "clip {} labels exceed configured taxonomy",
                clip.id
            )));
        }
    }
    data.par_iter()
        .map(|clip| {
            let mut g = Graph::new(cfg.seed);
            let pass = if force_gt_groups {
                crate::model::forward_with_partition(
                    &mut g,
                    store,
                    cfg,
                    clip,
                    clip.partition.clone(),
                )?
            } else {
                forward(&mut g, store, cfg, clip, Mode::Eval)?
            };
            let individual_preds =
                decide_labels(g.value(pass.individual_logits), cfg.threshold)?;
            let social_preds = decide_labels(g.value(pass.social_logits), cfg.threshold)?;
            let global_preds = decide_labels(g.value(pass.global_logits), cfg.threshold)?;
            Ok(ClipEval {
                individual_preds,
                individual_gts: clip.individual_labels.clone(),
                global_pred: global_preds.into_iter().next().unwrap(),
                global_gt: clip.global_labels.clone(),
                social: SocialClipEval {
                    pred: pass.partition.clone(),
                    pred_labels: social_preds,
                    gt: clip.partition.clone(),
                    gt_labels: clip.social_labels.clone(),
                },
            })
        })
        .collect()
}
