//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//! Run with `cargo test -p panrec-core --test acceptance -- --nocapture`.

mod common;

use std::time::Instant;

use common::{all_op_checks, fd_report, handmade_clip, BuildFn};
use panrec_core::aggregation::{aggregate, AggregationConfig, Variant};
use panrec_core::featmap::{roi_align, BoxTrack, FeatureMap};
use panrec_core::graph::Graph;
use panrec_core::grouping::{spectral_cluster, sym_eigendecomp, Partition, RelationMatrix};
use panrec_core::heads::LabelSet;
use panrec_core::metrics::{half_match, overall_score, percent_1dp, Prf};
use panrec_core::model::{forward, Mode, ModelConfig};
use panrec_core::nn;
use panrec_core::ops;
use panrec_core::params::ParamStore;
use panrec_core::report::render_report;
use panrec_core::spatiotemporal::{spatial_encode, spatiotemporal_specs, temporal_encode, SpatioTemporalConfig};
use panrec_core::synth::{generate_dataset, GenSpec};
use panrec_core::tensor::Tensor;
use panrec_core::train::{evaluate, evaluate_clips, train_loop, TrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report_line(id: usize, name: &str, ok: bool) {
    println!("acceptance {id} [{name}]: {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "acceptance criterion {id} ({name}) failed");
}

fn overfit_spec() -> GenSpec {
    GenSpec {
        clips: 4,
        members_min: 4,
        members_max: 6,
        frames: 3,
        frame_h: 64,
        frame_w: 64,
        groups_min: 2,
        groups_max: 3,
        seed: 42,
        ..Default::default()
    }
}

fn overfit_train_config(lr: f64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        frames: 3,
        epochs: 300,
        lr,
        weight_decay: 0.0,
        seed: 3,
    }
}

#[test]
fn criterion_1_metric_oracle() {
    let start = Instant::now();
    let mk = |f1: f64| Prf {
        precision: 0.0,
        recall: 0.0,
        f1,
    };
    // published headline row (percent scale)
    let headline = overall_score(mk(56.0), mk(25.4), mk(61.1));
    let ok_head = percent_1dp(headline.overall_f1 / 100.0) == 47.5;
    // baseline row: 107/3 = 35.67 exposes the floor/round ambiguity
    let baseline = overall_score(mk(43.4), mk(24.8), mk(38.8));
    let rounded = percent_1dp(baseline.overall_f1 / 100.0);
    let ok_base = rounded == 35.6 || rounded == 35.7;
    let ok_time = start.elapsed().as_secs_f64() < 1.0;
    report_line(1, "metric oracle", ok_head && ok_base && ok_time);
}

#[test]
fn criterion_2_gradient_suite() {
    let start = Instant::now();
    let mut ok = true;
    for (name, store, build) in all_op_checks() {
        let report = fd_report(&store, &build);
        if !report.passes(1e-4) {
            eprintln!(
                "  op `{name}`: max rel error {:.3e}",
                report.max_rel_error()
            );
            ok = false;
        }
    }
    // end-to-end loss at the tiny configuration: D=16, N=3, T=2, K=2, C=4
    let cfg = ModelConfig::tiny();
    let clip = handmade_clip(&cfg, 3, 2, 42);
    let store = cfg.build_params().unwrap();
    let cfg2 = cfg.clone();
    let build: BuildFn = Box::new(move |g, s| {
        let pass = forward(g, s, &cfg2, &clip, Mode::Train)?;
        Ok(pass.loss_vars.unwrap().total)
    });
    let report = fd_report(&store, &build);
    if !report.passes(1e-4) {
        eprintln!(
            "  end-to-end: max rel error {:.3e} at {:?}",
            report.max_rel_error(),
            report.worst
        );
        ok = false;
    }
    let ok_time = start.elapsed().as_secs_f64() < 120.0;
    report_line(2, "gradient suite <= 1e-4", ok && ok_time);
}

/// Expected example-based metrics when every prediction is an independent
/// fair coin over the classes (with the argmax-fallback rule mapping the
/// empty set to a uniformly random singleton), enumerated exactly.
fn coin_expectation(gt: &LabelSet, classes: usize) -> (f64, f64, f64) {
    let total = 1usize << classes;
    let prob = 1.0 / total as f64;
    let mut ep = 0.0;
    let mut er = 0.0;
    let mut ef = 0.0;
    for mask in 0..total {
        let subsets: Vec<LabelSet> = if mask == 0 {
            (0..classes).map(|c| [c].into_iter().collect()).collect()
        } else {
            vec![(0..classes).filter(|c| mask >> c & 1 == 1).collect()]
        };
        let w = prob / subsets.len() as f64;
        for pred in subsets {
            let inter = pred.intersection(gt).count() as f64;
            let p = inter / pred.len() as f64;
            let r = inter / gt.len() as f64;
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            ep += w * p;
            er += w * r;
            ef += w * f;
        }
    }
    (ep, er, ef)
}

#[test]
fn criterion_3_overfit_and_control() {
    let start = Instant::now();
    let cfg = ModelConfig::desk();
    let data = generate_dataset(&overfit_spec()).unwrap();

    // main run: 300 Adam steps at lr 1e-3
    let mut store = cfg.build_params().unwrap();
    train_loop(&data, &mut store, &cfg, &overfit_train_config(1e-3)).unwrap();
    let score = evaluate(&data, &store, &cfg).unwrap();
    println!("  overfit train-set F_a = {:.4}", score.overall_f1);
    let ok_overfit = score.overall_f1 >= 0.95;

    // no-learning control: lr = 0 leaves the fresh initialization in place
    let mut control_store = cfg.build_params().unwrap();
    train_loop(&data, &mut control_store, &cfg, &overfit_train_config(0.0)).unwrap();
    let control = evaluate(&data, &control_store, &cfg).unwrap();

    // closed-form expectation for a fair-coin multi-label predictor, using
    // the control's detected partitions for the group matching
    let evals = evaluate_clips(&data, &control_store, &cfg).unwrap();
    let taxonomy = cfg.taxonomy;
    let mut e_f_i = 0.0;
    let mut count_i = 0usize;
    let mut e_f_g = 0.0;
    for clip in &data {
        for gt in &clip.individual_labels {
            e_f_i += coin_expectation(gt, taxonomy.individual).2;
            count_i += 1;
        }
        e_f_g += coin_expectation(&clip.global_labels, taxonomy.global).2;
    }
    e_f_i /= count_i as f64;
    e_f_g /= data.len() as f64;
    let mut e_p_sum = 0.0;
    let mut pred_groups = 0usize;
    let mut e_r_sum = 0.0;
    let mut gt_groups = 0usize;
    for ev in &evals {
        let matches = half_match(&ev.social.pred, &ev.social.gt);
        for &(_pi, gi) in &matches {
            let (p, r, _) = coin_expectation(&ev.social.gt_labels[gi], taxonomy.social);
            e_p_sum += p;
            e_r_sum += r;
        }
        pred_groups += ev.social.pred.len();
        gt_groups += ev.social.gt.len();
    }
    let e_p_p = if pred_groups > 0 { e_p_sum / pred_groups as f64 } else { 0.0 };
    let e_r_p = if gt_groups > 0 { e_r_sum / gt_groups as f64 } else { 0.0 };
    let e_f_p = if e_p_p + e_r_p > 0.0 {
        2.0 * e_p_p * e_r_p / (e_p_p + e_r_p)
    } else {
        0.0
    };
    let baseline = (e_f_i + e_f_p + e_f_g) / 3.0;
    println!(
        "  control F_a = {:.4}, coin-predictor baseline = {:.4}",
        control.overall_f1, baseline
    );
    let ok_control = (control.overall_f1 - baseline).abs() <= 0.1;
    let elapsed = start.elapsed().as_secs_f64();
    println!("  runtime {elapsed:.1} s");
    report_line(3, "overfit F_a >= 0.95 and lr=0 control", ok_overfit && ok_control && elapsed < 300.0);
}

#[test]
fn criterion_4_clustering_recovery() {
    let start = Instant::now();
    let n = 12;
    let sizes = [4usize, 4, 4];
    let planted: Vec<Vec<usize>> = vec![(0..4).collect(), (4..8).collect(), (8..12).collect()];
    let planted_partition = Partition::new(planted, n).unwrap();
    let mut exact = 0usize;
    let mut all_valid = true;
    let mut half_metric_ok = true;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + trial);
        let mut label = Vec::new();
        for (g, &s) in sizes.iter().enumerate() {
            label.extend(std::iter::repeat(g).take(s));
        }
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
            for j in (i + 1)..n {
                let base: f64 = if label[i] == label[j] { 0.9 } else { 0.05 };
                let v = (base + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        let affinity = RelationMatrix::from_values(n, values).unwrap();
        let detected = spectral_cluster(&affinity, 8, trial).unwrap();
        // validity: constructor enforces disjoint covering; double-check count
        let covered: usize = detected.groups().iter().map(|g| g.len()).sum();
        if covered != n {
            all_valid = false;
        }
        if detected == planted_partition {
            exact += 1;
            let matches = half_match(&detected, &planted_partition);
            if matches.len() != 3 {
                half_metric_ok = false;
            }
        }
    }
    println!("  exact recoveries: {exact}/100");
    let elapsed = start.elapsed().as_secs_f64();
    report_line(
        4,
        "planted 3-block recovery >= 95/100",
        exact >= 95 && all_valid && half_metric_ok && elapsed < 30.0,
    );
}

#[test]
fn criterion_5_eigensolver() {
    let start = Instant::now();
    let n = 10;
    let mut ok = true;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + trial);
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = rng.random_range(-3.0..3.0);
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        let a = Tensor::new(vec![n, n], data).unwrap();
        let (vals, vecs) = sym_eigendecomp(&a).unwrap();
        let mut recon_err = 0.0f64;
        let mut orth_err = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let mut recon = 0.0;
                let mut dot = 0.0;
                for k in 0..n {
                    recon += vecs.at(&[i, k]) * vals[k] * vecs.at(&[j, k]);
                    dot += vecs.at(&[k, i]) * vecs.at(&[k, j]);
                }
                recon_err = recon_err.max((recon - a.at(&[i, j])).abs());
                let expect = if i == j { 1.0 } else { 0.0 };
                orth_err = orth_err.max((dot - expect).abs());
            }
        }
        if recon_err >= 1e-8 || orth_err >= 1e-8 {
            eprintln!("  trial {trial}: recon {recon_err:.2e}, orth {orth_err:.2e}");
            ok = false;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    report_line(5, "eigensolver residuals < 1e-8", ok && elapsed < 10.0);
}

#[test]
fn criterion_6_lambda_identities() {
    let d = 16;
    let base = AggregationConfig {
        task_layers: 1,
        task_heads: 2,
        shared_layers: 1,
        shared_heads: 2,
        lambda_social: 0.8,
        lambda_global: 1.0,
        max_members: 8,
    };
    let mut store = ParamStore::new();
    nn::register(
        &mut store,
        &panrec_core::aggregation::aggregation_specs(&base, d),
        99,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let members_t = common::random_tensor(&mut rng, &[4, d]);

    let run = |lambda: f64| -> Vec<f64> {
        let mut cfg = base;
        cfg.lambda_social = lambda;
        let mut g = Graph::new(0);
        let members = g.input(members_t.clone()).unwrap();
        let out = aggregate(&mut g, &store, members, Variant::Social, &cfg).unwrap();
        g.value(out).data().to_vec()
    };

    // lambda = 0 equals the task-only output bitwise
    let at0 = run(0.0);
    let task_only = {
        let mut g = Graph::new(0);
        let members = g.input(members_t.clone()).unwrap();
        let seq = panrec_core::aggregation::build_sequence(
            &mut g, &store, members, Variant::Social, &base,
        )
        .unwrap();
        let seq = ops::reshape(&mut g, seq, vec![1, 5, d]).unwrap();
        let enc = nn::encoder_stack(&mut g, &store, "agg.social", seq, 1, 2).unwrap();
        let row = ops::slice(&mut g, enc, 1, 0, 1).unwrap();
        g.value(row).data().to_vec()
    };
    let bitwise = at0
        .iter()
        .zip(&task_only)
        .all(|(a, b)| a.to_bits() == b.to_bits());

    // affine in lambda to 1e-12
    let at1 = run(1.0);
    let mut affine = true;
    for lambda in [0.2, 0.8, 1.0, 1.6] {
        let got = run(lambda);
        for j in 0..d {
            let expect = at0[j] + lambda * (at1[j] - at0[j]);
            if (got[j] - expect).abs() > 1e-12 {
                affine = false;
            }
        }
    }
    report_line(6, "lambda identities", bitwise && affine);
}

#[test]
fn criterion_7_equivariance_suite() {
    let mut ok = true;

    // spatial and temporal permutation equivariance at desk width
    let st_cfg = SpatioTemporalConfig {
        layers: 2,
        heads: 8,
        structure: panrec_core::spatiotemporal::StructureKind::Serial,
    };
    let d = 64;
    let mut store = ParamStore::new();
    nn::register(&mut store, &spatiotemporal_specs(&st_cfg, d), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x_t = common::random_tensor(&mut rng, &[3, 5, d]);
    let perm = [4usize, 2, 0, 3, 1];

    let mut permuted = Tensor::zeros(&[3, 5, d]);
    for t in 0..3 {
        for (dst, &src) in perm.iter().enumerate() {
            for dd in 0..d {
                permuted.data_mut()[(t * 5 + dst) * d + dd] = x_t.at(&[t, src, dd]);
            }
        }
    }
    let mut g = Graph::new(0);
    let x = g.input(x_t.clone()).unwrap();
    let y = spatial_encode(&mut g, &store, x, &st_cfg).unwrap();
    let mut g2 = Graph::new(0);
    let xp = g2.input(permuted).unwrap();
    let yp = spatial_encode(&mut g2, &store, xp, &st_cfg).unwrap();
    let mut spatial_err = 0.0f64;
    for t in 0..3 {
        for (dst, &src) in perm.iter().enumerate() {
            for dd in 0..d {
                spatial_err = spatial_err
                    .max((g2.value(yp).at(&[t, dst, dd]) - g.value(y).at(&[t, src, dd])).abs());
            }
        }
    }
    if spatial_err > 1e-10 {
        eprintln!("  spatial equivariance error {spatial_err:.2e}");
        ok = false;
    }

    let frame_perm = [2usize, 0, 1];
    let mut fpermuted = Tensor::zeros(&[3, 5, d]);
    for (dst, &src) in frame_perm.iter().enumerate() {
        for n in 0..5 {
            for dd in 0..d {
                fpermuted.data_mut()[(dst * 5 + n) * d + dd] = x_t.at(&[src, n, dd]);
            }
        }
    }
    let mut g3 = Graph::new(0);
    let x3 = g3.input(x_t).unwrap();
    let ty = temporal_encode(&mut g3, &store, x3, &st_cfg).unwrap();
    let mut g4 = Graph::new(0);
    let x4 = g4.input(fpermuted).unwrap();
    let typ = temporal_encode(&mut g4, &store, x4, &st_cfg).unwrap();
    let mut temporal_err = 0.0f64;
    for n in 0..5 {
        for (dst, &src) in frame_perm.iter().enumerate() {
            for dd in 0..d {
                temporal_err = temporal_err
                    .max((g4.value(typ).at(&[n, dst, dd]) - g3.value(ty).at(&[n, src, dd])).abs());
            }
        }
    }
    if temporal_err > 1e-10 {
        eprintln!("  temporal equivariance error {temporal_err:.2e}");
        ok = false;
    }

    // scene attention rows sum to 1
    let (c, hh, ww, k) = (8, 4, 4, 4);
    let mut sstore = ParamStore::new();
    nn::register(&mut sstore, &panrec_core::scene::scene_specs(c, hh, ww, k, d), 7);
    let mut g5 = Graph::new(0);
    let fm_map = g5
        .input(common::random_tensor(&mut rng, &[2, c, hh, ww]))
        .unwrap();
    let fm = FeatureMap {
        map: fm_map,
        stride: 8.0,
    };
    let tokens = panrec_core::scene::scene_tokens(&mut g5, &sstore, &fm, k, d).unwrap();
    let attn = g5.value(tokens.attention);
    let s = hh * ww;
    for row in attn.data().chunks(s) {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            eprintln!("  scene attention row sums to {sum}");
            ok = false;
        }
    }

    // RoIAlign against the explicit bilinear oracle
    let data: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g6 = Graph::new(0);
    let fm_map = g6
        .input(Tensor::new(vec![1, 2, 4, 4], data.clone()).unwrap())
        .unwrap();
    let fm = FeatureMap {
        map: fm_map,
        stride: 1.0,
    };
    let track = BoxTrack::new(0, vec![[0.6, 0.9, 3.4, 3.2]], 4, 4).unwrap();
    let out = roi_align(&mut g6, &fm, &[track], 3, 3).unwrap();
    let sample = |ch: usize, cy: f64, cx: f64| -> f64 {
        let u = cx - 0.5;
        let v = cy - 0.5;
        let j0 = u.floor() as i64;
        let i0 = v.floor() as i64;
        let fu = u - j0 as f64;
        let fv = v - i0 as f64;
        let get = |i: i64, j: i64| data[ch * 16 + (i.clamp(0, 3) * 4 + j.clamp(0, 3)) as usize];
        (1.0 - fv) * (1.0 - fu) * get(i0, j0)
            + (1.0 - fv) * fu * get(i0, j0 + 1)
            + fv * (1.0 - fu) * get(i0 + 1, j0)
            + fv * fu * get(i0 + 1, j0 + 1)
    };
    let (bw, bh) = ((3.4 - 0.6) / 3.0, (3.2 - 0.9) / 3.0);
    let mut roi_err = 0.0f64;
    for ch in 0..2 {
        for by in 0..3 {
            for bx in 0..3 {
                let cy = 0.9 + (by as f64 + 0.5) * bh;
                let cx = 0.6 + (bx as f64 + 0.5) * bw;
                let got = g6.value(out).at(&[0, 0, ch, by, bx]);
                roi_err = roi_err.max((got - sample(ch, cy, cx)).abs());
            }
        }
    }
    if roi_err > 1e-12 {
        eprintln!("  roi_align oracle error {roi_err:.2e}");
        ok = false;
    }

    report_line(7, "equivariance suite", ok);
}

#[test]
fn criterion_8_ablation_scaffolding() {
    let start = Instant::now();
    let data = generate_dataset(&overfit_spec()).unwrap();
    let mut grid = Vec::new();
    let mut ok = true;
    for st in [false, true] {
        for agg in [false, true] {
            for scene in [false, true] {
                let mut cfg = ModelConfig::desk();
                cfg.use_st_encoder = st;
                cfg.use_aggregation = agg;
                cfg.use_scene = scene;
                let mut store = cfg.build_params().unwrap();
                let tcfg = TrainConfig {
                    batch_size: 4,
                    frames: 3,
                    epochs: 25,
                    lr: 1e-3,
                    weight_decay: 0.0,
                    seed: 3,
                };
                let trained = train_loop(&data, &mut store, &cfg, &tcfg);
                let scored = trained.and_then(|_| evaluate(&data, &store, &cfg));
                match scored {
                    Ok(score) => grid.push((st, agg, scene, score.overall_f1)),
                    Err(e) => {
                        eprintln!("  toggle ({st},{agg},{scene}) failed: {e}");
                        ok = false;
                    }
                }
            }
        }
    }
    println!("  st-enc aggregation scene | F_a");
    for (st, agg, scene, fa) in &grid {
        let mark = |b: &bool| if *b { "x" } else { " " };
        println!(
            "    [{}]      [{}]      [{}]  | {:.3}",
            mark(st),
            mark(agg),
            mark(scene),
            fa
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    report_line(8, "ablation grid runs", ok && grid.len() == 8 && elapsed < 300.0);
}

#[test]
fn criterion_9_determinism() {
    let data = generate_dataset(&overfit_spec()).unwrap();
    let cfg = ModelConfig::desk();
    let run = || -> String {
        let mut store = cfg.build_params().unwrap();
        let tcfg = TrainConfig {
            batch_size: 2,
            frames: 3,
            epochs: 12,
            lr: 1e-3,
            weight_decay: 1e-2,
            seed: 11,
        };
        train_loop(&data, &mut store, &cfg, &tcfg).unwrap();
        let score = evaluate(&data, &store, &cfg).unwrap();
        render_report(&score)
    };
    let a = run();
    let b = run();
    report_line(9, "repeated train+eval reports byte-identical", a == b);
}
