//! Key/value config files for the model, training, and generation settings.
//!
//! Every key is optional and falls back to the documented default. Unknown
//! keys are rejected so typos fail loudly. A `profile` key selects the base
//! configuration (`default`, `desk`, or `tiny`) the other keys override.

use panrec_core::error::{Error, Result};
use panrec_core::heads::LabelTaxonomy;
use panrec_core::kv::{fmt_f64, KvDoc};
use panrec_core::model::ModelConfig;
use panrec_core::spatiotemporal::StructureKind;
use panrec_core::synth::GenSpec;
use panrec_core::train::TrainConfig;

const MODEL_KEYS: [&str; 25] = [
    "profile",
    "dim",
    "frame_h",
    "frame_w",
    "channels",
    "roi_size",
    "st_layers",
    "st_heads",
    "st_structure",
    "task_layers",
    "task_heads",
    "shared_layers",
    "shared_heads",
    "lambda_social",
    "lambda_global",
    "scene_tokens",
    "fusion_heads",
    "classes_individual",
    "classes_social",
    "classes_global",
    "threshold",
    "kmax",
    "max_members",
    "use_st_encoder",
    "use_aggregation",
];
const MODEL_KEYS_EXTRA: [&str; 2] = ["use_scene", "model_seed"];
const TRAIN_KEYS: [&str; 6] = [
    "batch_size",
    "frames",
    "epochs",
    "lr",
    "weight_decay",
    "train_seed",
];

fn check_known(doc: &KvDoc, allowed: &[&str]) -> Result<()> {
    for (key, _) in doc.entries() {
        if !allowed.contains(&key.as_str()) {
            return Err(Error::InvalidInput(format!("unknown config key `{key}`")));
        }
    }
    Ok(())
}

/// Parse a model + train configuration document.
pub fn parse_run_config(doc: &KvDoc) -> Result<(ModelConfig, TrainConfig)> {
    let mut allowed: Vec<&str> = MODEL_KEYS.to_vec();
    allowed.extend(MODEL_KEYS_EXTRA);
    allowed.extend(TRAIN_KEYS);
    check_known(doc, &allowed)?;

    let mut cfg = match doc.get("profile") {
        None | Some("default") => ModelConfig::default(),
        Some("desk") => ModelConfig::desk(),
        Some("tiny") => ModelConfig::tiny(),
        Some(other) => {
            return Err(Error::InvalidInput(format!("unknown profile `{other}`")));
        }
    };
    if let Some(v) = doc.get_usize("dim")? {
        cfg.dim = v;
    }
    if let Some(v) = doc.get_usize("frame_h")? {
        cfg.frame_h = v;
    }
    if let Some(v) = doc.get_usize("frame_w")? {
        cfg.frame_w = v;
    }
    if let Some(v) = doc.get_usize("channels")? {
        cfg.channels = v;
    }
    if let Some(v) = doc.get_usize("roi_size")? {
        cfg.roi_size = v;
    }
    if let Some(v) = doc.get_usize("st_layers")? {
        cfg.st.layers = v;
    }
    if let Some(v) = doc.get_usize("st_heads")? {
        cfg.st.heads = v;
    }
    if let Some(v) = doc.get("st_structure") {
        cfg.st.structure = StructureKind::parse(v)?;
    }
    if let Some(v) = doc.get_usize("task_layers")? {
        cfg.agg.task_layers = v;
    }
    if let Some(v) = doc.get_usize("task_heads")? {
        cfg.agg.task_heads = v;
    }
    if let Some(v) = doc.get_usize("shared_layers")? {
        cfg.agg.shared_layers = v;
    }
    if let Some(v) = doc.get_usize("shared_heads")? {
        cfg.agg.shared_heads = v;
    }
    if let Some(v) = doc.get_f64("lambda_social")? {
        cfg.agg.lambda_social = v;
    }
    if let Some(v) = doc.get_f64("lambda_global")? {
        cfg.agg.lambda_global = v;
    }
    if let Some(v) = doc.get_usize("scene_tokens")? {
        cfg.scene_tokens = v;
    }
    if let Some(v) = doc.get_usize("fusion_heads")? {
        cfg.fusion_heads = v;
    }
    if let Some(v) = doc.get_usize("classes_individual")? {
        cfg.taxonomy.individual = v;
    }
    if let Some(v) = doc.get_usize("classes_social")? {
        cfg.taxonomy.social = v;
    }
    if let Some(v) = doc.get_usize("classes_global")? {
        cfg.taxonomy.global = v;
    }
    if let Some(v) = doc.get_f64("threshold")? {
        cfg.threshold = v;
    }
    if let Some(v) = doc.get_usize("kmax")? {
        cfg.kmax = v;
    }
    if let Some(v) = doc.get_usize("max_members")? {
        cfg.agg.max_members = v;
    }
    if let Some(v) = doc.get_bool("use_st_encoder")? {
        cfg.use_st_encoder = v;
    }
    if let Some(v) = doc.get_bool("use_aggregation")? {
        cfg.use_aggregation = v;
    }
    if let Some(v) = doc.get_bool("use_scene")? {
        cfg.use_scene = v;
    }
    if let Some(v) = doc.get_u64("model_seed")? {
        cfg.seed = v;
    }
    cfg.validate()?;

    let mut tcfg = TrainConfig::default();
    if let Some(v) = doc.get_usize("batch_size")? {
        tcfg.batch_size = v;
    }
    if let Some(v) = doc.get_usize("frames")? {
        tcfg.frames = v;
    }
    if let Some(v) = doc.get_usize("epochs")? {
        tcfg.epochs = v;
    }
    if let Some(v) = doc.get_f64("lr")? {
        tcfg.lr = v;
    }
    if let Some(v) = doc.get_f64("weight_decay")? {
        tcfg.weight_decay = v;
    }
    if let Some(v) = doc.get_u64("train_seed")? {
        tcfg.seed = v;
    }
    Ok((cfg, tcfg))
}

/// Full snapshot of an effective configuration, parseable by
/// `parse_run_config` to reproduce the run.
pub fn snapshot_run_config(cfg: &ModelConfig, tcfg: &TrainConfig) -> KvDoc {
    let mut doc = KvDoc::new();
    doc.set("dim", cfg.dim);
    doc.set("frame_h", cfg.frame_h);
    doc.set("frame_w", cfg.frame_w);
    doc.set("channels", cfg.channels);
    doc.set("roi_size", cfg.roi_size);
    doc.set("st_layers", cfg.st.layers);
    doc.set("st_heads", cfg.st.heads);
    doc.set("st_structure", cfg.st.structure.name());
    doc.set("task_layers", cfg.agg.task_layers);
    doc.set("task_heads", cfg.agg.task_heads);
    doc.set("shared_layers", cfg.agg.shared_layers);
    doc.set("shared_heads", cfg.agg.shared_heads);
    doc.set("lambda_social", fmt_f64(cfg.agg.lambda_social));
    doc.set("lambda_global", fmt_f64(cfg.agg.lambda_global));
    doc.set("scene_tokens", cfg.scene_tokens);
    doc.set("fusion_heads", cfg.fusion_heads);
    doc.set("classes_individual", cfg.taxonomy.individual);
    doc.set("classes_social", cfg.taxonomy.social);
    doc.set("classes_global", cfg.taxonomy.global);
    doc.set("threshold", fmt_f64(cfg.threshold));
    doc.set("kmax", cfg.kmax);
    doc.set("max_members", cfg.agg.max_members);
    doc.set("use_st_encoder", cfg.use_st_encoder);
    doc.set("use_aggregation", cfg.use_aggregation);
    doc.set("use_scene", cfg.use_scene);
    doc.set("model_seed", cfg.seed);
    doc.set("batch_size", tcfg.batch_size);
    doc.set("frames", tcfg.frames);
    doc.set("epochs", tcfg.epochs);
    doc.set("lr", fmt_f64(tcfg.lr));
    doc.set("weight_decay", fmt_f64(tcfg.weight_decay));
    doc.set("train_seed", tcfg.seed);
    doc
}

const SPEC_KEYS: [&str; 14] = [
    "clips",
    "members_min",
    "members_max",
    "frames",
    "frame_h",
    "frame_w",
    "groups_min",
    "groups_max",
    "classes_individual",
    "classes_social",
    "classes_global",
    "motion",
    "noise",
    "seed",
];

/// Parse a generation spec document.
pub fn parse_gen_spec(doc: &KvDoc) -> Result<GenSpec> {
    check_known(doc, &SPEC_KEYS)?;
    let mut spec = GenSpec::default();
    if let Some(v) = doc.get_usize("clips")? {
        spec.clips = v;
    }
    if let Some(v) = doc.get_usize("members_min")? {
        spec.members_min = v;
    }
    if let Some(v) = doc.get_usize("members_max")? {
        spec.members_max = v;
    }
    if let Some(v) = doc.get_usize("frames")? {
        spec.frames = v;
    }
    if let Some(v) = doc.get_usize("frame_h")? {
        spec.frame_h = v;
    }
    if let Some(v) = doc.get_usize("frame_w")? {
        spec.frame_w = v;
    }
    if let Some(v) = doc.get_usize("groups_min")? {
        spec.groups_min = v;
    }
    if let Some(v) = doc.get_usize("groups_max")? {
        spec.groups_max = v;
    }
    if let Some(v) = doc.get_usize("classes_individual")? {
        spec.taxonomy.individual = v;
    }
    if let Some(v) = doc.get_usize("classes_social")? {
        spec.taxonomy.social = v;
    }
    if let Some(v) = doc.get_usize("classes_global")? {
        spec.taxonomy.global = v;
    }
    if let Some(v) = doc.get_f64("motion")? {
        spec.motion = v;
    }
    if let Some(v) = doc.get_f64("noise")? {
        spec.noise = v;
    }
    if let Some(v) = doc.get_u64("seed")? {
        spec.seed = v;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn snapshot_gen_spec(spec: &GenSpec) -> KvDoc {
    let mut doc = KvDoc::new();
    doc.set("clips", spec.clips);
    doc.set("members_min", spec.members_min);
    doc.set("members_max", spec.members_max);
    doc.set("frames", spec.frames);
    doc.set("frame_h", spec.frame_h);
    doc.set("frame_w", spec.frame_w);
    doc.set("groups_min", spec.groups_min);
    doc.set("groups_max", spec.groups_max);
    doc.set("classes_individual", spec.taxonomy.individual);
    doc.set("classes_social", spec.taxonomy.social);
    doc.set("classes_global", spec.taxonomy.global);
    doc.set("motion", fmt_f64(spec.motion));
    doc.set("noise", fmt_f64(spec.noise));
    doc.set("seed", spec.seed);
    doc
}

/// Taxonomy consistency check between a dataset spec and a model config.
pub fn taxonomies_match(a: &LabelTaxonomy, b: &LabelTaxonomy) -> bool {
    a == b
}
