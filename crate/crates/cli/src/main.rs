//! `panrec`: dataset generation, training, evaluation, gradient checking,
//! and attention inspection for the panoramic activity recognizer.
//!
//! Exit codes: 0 success, 2 input error, 3 numeric failure, 4 check failure.

mod config;
mod manifest;
mod pgm;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use panrec_core::dataset::{read_dataset, write_dataset};
use panrec_core::error::Error;
use panrec_core::gradcheck::finite_diff_check;
use panrec_core::graph::Graph;
use panrec_core::kv::KvDoc;
use panrec_core::model::{forward, Mode, ModelConfig};
use panrec_core::params::ParamStore;
use panrec_core::report::render_report;
use panrec_core::synth::{generate_dataset, probe_clip};
use panrec_core::train::{evaluate, train_loop, TrainConfig};

use config::{parse_gen_spec, parse_run_config, snapshot_gen_spec, snapshot_run_config};
use manifest::{sidecar, Manifest};

#[derive(Parser)]
#[command(name = "panrec", version, about = "Panoramic activity recognition at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file from a generation spec.
    Generate {
        /// Generation spec (key = value text).
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint (plus .manifest and .log).
    Train {
        /// Dataset file produced by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Run configuration (key = value text); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write the score report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; its .manifest sidecar supplies the model config.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report output path.
        #[arg(long)]
        report: PathBuf,
        /// Explicit config overriding the checkpoint manifest.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        /// Run configuration; the tiny profile is used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Debug: corrupt this parameter's analytic gradient to prove the
        /// check catches it.
        #[arg(long)]
        sabotage: Option<String>,
    },
    /// Export scene attention maps for one clip as PGM images.
    Inspect {
        /// Checkpoint path; its .manifest sidecar supplies the model config.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file holding the clip.
        #[arg(long)]
        clip: PathBuf,
        /// Clip index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Output directory for the attention maps.
        #[arg(long)]
        out: PathBuf,
        /// Explicit config overriding the checkpoint manifest.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::NonFinite(_)
        | Error::NonFiniteInput
        | Error::NonFiniteGradient(_)
        | Error::NonFiniteLoss(_)
        | Error::NonDeterministic(_, _) => 3,
        _ => 2,
    }
}

type CmdResult = Result<(), (i32, String)>;

fn core(err: Error) -> (i32, String) {
    (exit_code_for(&err), err.to_string())
}

fn load_kv(path: &Path) -> Result<KvDoc, (i32, String)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| (2, format!("cannot read {}: {e}", path.display())))?;
    KvDoc::parse(&text).map_err(core)
}

fn cmd_generate(spec_path: &Path, out: &Path, seed: Option<u64>) -> CmdResult {
    let doc = load_kv(spec_path)?;
    let mut spec = parse_gen_spec(&doc).map_err(core)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let clips = generate_dataset(&spec).map_err(core)?;
    write_dataset(&clips, out).map_err(core)?;

    let mut m = Manifest::new("generate");
    m.set_path("spec", spec_path);
    m.set_path("out", out);
    m.set("seed", spec.seed);
    m.embed_config(&snapshot_gen_spec(&spec));
    m.write(&sidecar(out)).map_err(core)?;
    println!("wrote {} clips to {}", clips.len(), out.display());
    Ok(())
}

fn load_run_config(path: Option<&Path>) -> Result<(ModelConfig, TrainConfig), (i32, String)> {
    match path {
        Some(p) => {
            let doc = load_kv(p)?;
            parse_run_config(&doc).map_err(core)
        }
        None => Ok((ModelConfig::default(), TrainConfig::default())),
    }
}

fn cmd_train(data_path: &Path, config_path: Option<&Path>, out: &Path) -> CmdResult {
    let (cfg, tcfg) = load_run_config(config_path)?;
    let data = read_dataset(data_path).map_err(core)?;
    let mut store = cfg.build_params().map_err(core)?;
    let log = train_loop(&data, &mut store, &cfg, &tcfg).map_err(core)?;
    store.save(out).map_err(core)?;

    // loss trajectory
    let mut log_doc = KvDoc::new();
    for (e, l) in log.epochs.iter().enumerate() {
        log_doc.set(
            &format!("epoch.{e}"),
            format!(
                "{} {} {} {} {}",
                l.individual, l.social, l.global, l.relation, l.total
            ),
        );
    }
    let mut log_path = out.as_os_str().to_os_string();
    log_path.push(".log");
    std::fs::write(&log_path, log_doc.render()).map_err(|e| core(e.into()))?;

    let mut m = Manifest::new("train");
    m.set_path("data", data_path);
    m.set_path("out", out);
    m.set("seed", tcfg.seed);
    m.embed_config(&snapshot_run_config(&cfg, &tcfg));
    m.write(&sidecar(out)).map_err(core)?;

    let last = log.epochs.last().unwrap();
    println!(
        "trained {} epochs; final loss {:.6} (i {:.6}, s {:.6}, g {:.6}, d {:.6})",
        log.epochs.len(),
        last.total,
        last.individual,
        last.social,
        last.global,
        last.relation
    );
    Ok(())
}

fn config_from_checkpoint_or_flag(
    checkpoint: &Path,
    config_path: Option<&Path>,
) -> Result<(ModelConfig, TrainConfig), (i32, String)> {
    match config_path {
        Some(p) => {
            let doc = load_kv(p)?;
            parse_run_config(&doc).map_err(core)
        }
        None => {
            let m = Manifest::read(&sidecar(checkpoint)).map_err(|e| {
                (
                    2,
                    format!(
                        "cannot read checkpoint manifest {}: {e} (pass --config instead)",
                        sidecar(checkpoint).display()
                    ),
                )
            })?;
            let snap = m.config_snapshot().map_err(core)?;
            parse_run_config(&snap).map_err(core)
        }
    }
}

fn cmd_eval(
    data_path: &Path,
    checkpoint: &Path,
    report_path: &Path,
    config_path: Option<&Path>,
) -> CmdResult {
    let (cfg, tcfg) = config_from_checkpoint_or_flag(checkpoint, config_path)?;
    let store = ParamStore::load(checkpoint).map_err(core)?;
    let data = read_dataset(data_path).map_err(core)?;
    let score = evaluate(&data, &store, &cfg).map_err(core)?;
    let report = render_report(&score);
    std::fs::write(report_path, &report).map_err(|e| core(e.into()))?;

    let mut m = Manifest::new("eval");
    m.set_path("data", data_path);
    m.set_path("checkpoint", checkpoint);
    m.set_path("report", report_path);
    m.embed_config(&snapshot_run_config(&cfg, &tcfg));
    m.write(&sidecar(report_path)).map_err(core)?;
    print!("{report}");
    Ok(())
}

fn cmd_gradcheck(
    config_path: Option<&Path>,
    tolerance: f64,
    sabotage: Option<&str>,
) -> CmdResult {
    let cfg = match config_path {
        Some(p) => {
            let doc = load_kv(p)?;
            parse_run_config(&doc).map_err(core)?.0
        }
        // exhaustive central differences scale with parameter count, so the
        // default is the tiny configuration
        None => ModelConfig::tiny(),
    };
    let clip = probe_clip(&cfg.taxonomy, cfg.frame_h, cfg.frame_w, 3, 2, 42).map_err(core)?;
    let store = cfg.build_params().map_err(core)?;
    if let Some(name) = sabotage {
        if !store.contains(name) {
            return Err((2, format!("unknown parameter `{name}`")));
        }
    }
    println!(
        "checking {} parameters ({} scalars) against central differences...",
        store.len(),
        store.numel()
    );

    let cfg_f = cfg.clone();
    let clip_f = clip.clone();
    let f = move |s: &ParamStore| -> panrec_core::Result<f64> {
        let mut g = Graph::new(0);
        let pass = forward(&mut g, s, &cfg_f, &clip_f, Mode::Train)?;
        Ok(g.value(pass.loss_vars.unwrap().total).item())
    };
    let cfg_g = cfg.clone();
    let clip_g = clip.clone();
    let sabotage_owned = sabotage.map(str::to_string);
    let grad_f = move |s: &ParamStore| -> panrec_core::Result<panrec_core::Gradients> {
        let mut g = Graph::new(0);
        let pass = forward(&mut g, s, &cfg_g, &clip_g, Mode::Train)?;
        let mut grads = g.param_grads(pass.loss_vars.unwrap().total)?;
        if let Some(name) = &sabotage_owned {
            if let Some(t) = grads.0.get_mut(name) {
                t.data_mut()[0] += 1e-2;
            }
        }
        Ok(grads)
    };
    let report = finite_diff_check(&f, &grad_f, &store, 1e-5).map_err(core)?;
    if let Some(w) = &report.worst {
        println!(
            "worst offender: `{}`[{}] analytic {:.6e} numeric {:.6e} rel {:.3e}",
            w.param, w.index, w.analytic, w.numeric, w.rel_error
        );
    }
    if report.passes(tolerance) {
        println!("gradient check passed at tolerance {tolerance:e}");
        Ok(())
    } else {
        let offender = report
            .worst
            .as_ref()
            .map(|w| w.param.clone())
            .unwrap_or_default();
        Err((
            4,
            format!(
                "gradient check failed at tolerance {tolerance:e}: parameter `{offender}` (max rel error {:.3e})",
                report.max_rel_error()
            ),
        ))
    }
}

fn cmd_inspect(
    checkpoint: &Path,
    clip_path: &Path,
    index: usize,
    out_dir: &Path,
    config_path: Option<&Path>,
) -> CmdResult {
    let (cfg, _) = config_from_checkpoint_or_flag(checkpoint, config_path)?;
    if !cfg.use_scene {
        return Err((2, "scene module disabled in this configuration".into()));
    }
    let store = ParamStore::load(checkpoint).map_err(core)?;
    let clips = read_dataset(clip_path).map_err(core)?;
    let clip = clips
        .get(index)
        .ok_or_else(|| (2, format!("clip index {index} out of {}", clips.len())))?;
    std::fs::create_dir_all(out_dir).map_err(|e| core(e.into()))?;

    let mut g = Graph::new(cfg.seed);
    let pass = forward(&mut g, &store, &cfg, clip, Mode::Eval).map_err(core)?;
    let attn_var = pass
        .scene_attention
        .ok_or_else(|| (2, "forward produced no scene attention".into()))?;
    let attn = g.value(attn_var);
    let (t_frames, k_tokens) = (attn.shape()[0], attn.shape()[1]);
    let (h, w) = (cfg.fm_h(), cfg.fm_w());
    for t in 0..t_frames {
        for k in 0..k_tokens {
            let mut values = Vec::with_capacity(h * w);
            for s in 0..h * w {
                values.push(attn.at(&[t, k, s]));
            }
            let path = out_dir.join(format!("attention_t{t:02}_k{k:02}.pgm"));
            pgm::write_pgm(&path, w, h, &values).map_err(core)?;
        }
    }
    println!(
        "wrote {} attention maps ({t_frames} frames x {k_tokens} tokens) to {}",
        t_frames * k_tokens,
        out_dir.display()
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate { spec, out, seed } => cmd_generate(spec, out, *seed),
        Command::Train { data, config, out } => cmd_train(data, config.as_deref(), out),
        Command::Eval {
            data,
            checkpoint,
            report,
            config,
        } => cmd_eval(data, checkpoint, report, config.as_deref()),
        Command::Gradcheck {
            config,
            tolerance,
            sabotage,
        } => cmd_gradcheck(config.as_deref(), *tolerance, sabotage.as_deref()),
        Command::Inspect {
            checkpoint,
            clip,
            index,
            out,
            config,
        } => cmd_inspect(checkpoint, clip, *index, out, config.as_deref()),
    };
    if let Err((code, message)) = result {
        eprintln!("error: {message}");
        std::process::exit(code);
    }
}
