//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//! Run with `cargo test -p revit --test acceptance -- --nocapture` to see the
//! lines for passing criteria too.

mod common;

use common::*;
use revit::analysis::{
    build_distance_matrix, feature_collapse_probe, non_locality_patches, nonlocality_report,
    revit_globality_decomposition, write_nonlocality_csvs, write_nonlocality_json,
    write_similarity_csvs,
};
use revit::attention::AlphaMode;
use revit::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use revit::data::{synthetic_dataset, PerturbMode, PerturbSpec};
use revit::model::{
    bind_params, forward_from_tokens, init_params, model_forward, tape_forward, ModelConfig,
    Variant,
};
use revit::tape::Tape;
use revit::tensor::{Real, Tensor};
use revit::train::{evaluate, perturb_sweep, train, Schedule, TrainConfig};
use std::time::Instant;

fn criterion(n: usize, desc: &str, body: impl FnOnce() + std::panic::UnwindSafe) {
    let result = std::panic::catch_unwind(body);
    match &result {
        Ok(()) => println!("ACCEPTANCE {n}: PASS — {desc}"),
        Err(_) => println!("ACCEPTANCE {n}: FAIL — {desc}"),
    }
    if let Err(e) = result {
        std::panic::resume_unwind(e);
    }
}

fn toy_image(seed: u64, cfg: &ModelConfig) -> Tensor {
    let mut r = rng(seed);
    let n = cfg.channels * cfg.image_size * cfg.image_size;
    let data: Vec<Real> =
        (0..n).map(|_| (rand::Rng::random::<f64>(&mut r)) as Real).collect();
    Tensor::new(vec![cfg.channels, cfg.image_size, cfg.image_size], data).unwrap()
}

/// 1. ReViT forward with fixed alpha = 1 equals ViT forward with identical
///    weights, over 100 random (input, weight) draws on the toy config.
#[test]
fn acceptance_1_reduction_oracle() {
    criterion(1, "fixed alpha=1 reduces to the plain variant (100 draws, <1e-5)", || {
        let start = Instant::now();
        let vit_cfg = ModelConfig::toy(Variant::Vit);
        let mut revit_cfg = ModelConfig::toy(Variant::Revit);
        revit_cfg.alpha_mode = AlphaMode::Fixed(1.0);
        for draw in 0..100u64 {
            let mut vit_cfg = vit_cfg.clone();
            vit_cfg.seed = draw;
            let mut revit_cfg = revit_cfg.clone();
            revit_cfg.seed = draw;
            let params = init_params(&vit_cfg).unwrap();
            let image = toy_image(10_000 + draw, &vit_cfg);
            let a = model_forward(&image, &vit_cfg, &params, false).unwrap();
            let b = model_forward(&image, &revit_cfg, &params, false).unwrap();
            let diff = max_abs_diff(a.logits.data(), b.logits.data());
            assert!(diff < 1e-5, "draw {draw}: max logit diff {diff}");
        }
        let elapsed = start.elapsed();
        assert!(elapsed.as_secs() < 30, "took {elapsed:?}, budget 30s");
    });
}

/// 2. Analytic gradients of a depth-2 dim-32 shared-gate model match central
///    finite differences on 50 sampled parameters including the gate.
#[test]
fn acceptance_2_gradient_correctness() {
    criterion(2, "analytic gradients match finite differences (50 params incl. alpha)", || {
        let start = Instant::now();
        let cfg = ModelConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            num_classes: 4,
            variant: Variant::Revit,
            alpha_mode: AlphaMode::Shared,
            seed: 7,
        };
        let params = init_params(&cfg).unwrap();
        let image = toy_image(777, &cfg);
        let label = 2usize;

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &cfg, &params).unwrap();
        let fwd = tape_forward(&mut tape, &image, &cfg, &bound, false).unwrap();
        let loss = tape.cross_entropy(fwd.logits, &[label]).unwrap();
        let grads = tape.backward(loss).unwrap();

        let eval_loss = |p: &revit::model::ParamSet| -> Real {
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &cfg, p).unwrap();
            let fwd = tape_forward(&mut tape, &image, &cfg, &bound, false).unwrap();
            let loss = tape.cross_entropy(fwd.logits, &[label]).unwrap();
            tape.value(loss).item()
        };

        // 49 random (tensor, element) picks plus the gate parameter.
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        let mut r = rng(99);
        let mut picks: Vec<(String, usize)> = (0..49)
            .map(|_| {
                let name = names[rand::Rng::random_range(&mut r, 0..names.len())].clone();
                let numel = params.get(&name).unwrap().numel();
                (name, rand::Rng::random_range(&mut r, 0..numel))
            })
            .collect();
        picks.push(("alpha_raw".to_string(), 0));

        for (name, i) in picks {
            let var = bound
                .leaves
                .iter()
                .find(|(n, _)| n == &name)
                .map(|(_, v)| *v)
                .unwrap();
            let analytic = grads.get(var).map(|g| g[i]).unwrap_or(0.0);
            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] += FD_STEP;
            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] -= FD_STEP;
            let numeric = (eval_loss(&plus) - eval_loss(&minus)) / (2.0 * FD_STEP);
            assert_grads_close(&[analytic], &[numeric], &format!("{name}[{i}]"));
        }
        let elapsed = start.elapsed();
        assert!(elapsed.as_secs() < 120, "took {elapsed:?}, budget 2min");
    });
}

/// 3. Vectorized non-locality equals a triple-loop brute force on 3x3 grids;
///    uniform attention on a 2x2 grid gives the closed-form value.
#[test]
fn acceptance_3_nonlocality_oracle() {
    criterion(3, "non-locality matches the triple-loop oracle and closed form", || {
        let dm = build_distance_matrix(3);
        let mut r = rng(3);
        for case in 0..50 {
            let a = rand_stochastic(&mut r, 9);
            let got = non_locality_patches(&a, &dm).unwrap();
            // brute force straight from coordinates
            let mut oracle = 0.0f64;
            for i in 0..9 {
                for j in 0..9 {
                    let (ri, ci) = ((i / 3) as f64, (i % 3) as f64);
                    let (rj, cj) = ((j / 3) as f64, (j % 3) as f64);
                    let dist = ((ri - rj).powi(2) + (ci - cj).powi(2)).sqrt();
                    oracle += a.data()[i * 9 + j] as f64 * dist;
                }
            }
            oracle /= 9.0;
            assert!((got - oracle).abs() < 1e-6, "case {case}: {got} vs {oracle}");
        }
        let dm2 = build_distance_matrix(2);
        let uniform = Tensor::full(vec![4, 4], 0.25);
        let d = non_locality_patches(&uniform, &dm2).unwrap();
        assert!((d - 0.85355).abs() < 1e-5, "uniform 2x2: {d}");
    });
}

/// 4. The analysis-side decomposition is linear in its two maps.
#[test]
fn acceptance_4_decomposition_linearity() {
    criterion(4, "globality decomposition is linear in the attention maps", || {
        let dm = build_distance_matrix(3);
        let mut r = rng(4);
        for case in 0..20 {
            let cur = rand_stochastic(&mut r, 9);
            let prev = rand_stochastic(&mut r, 9);
            let alpha = rand::Rng::random::<f64>(&mut r) as Real;
            let got = revit_globality_decomposition(&cur, &prev, alpha, &dm).unwrap();
            let want = alpha as f64 * non_locality_patches(&cur, &dm).unwrap()
                + (1.0 - alpha as f64) * non_locality_patches(&prev, &dm).unwrap();
            assert!((got - want).abs() < 1e-6, "case {case}: {got} vs {want}");
        }
    });
}

/// 5. Token permutations conjugate every layer's scores: S' = P S P^T.
#[test]
fn acceptance_5_permutation_equivariance() {
    criterion(5, "score recursion commutes with token permutations", || {
        let cfg = ModelConfig::toy(Variant::Revit);
        let params = init_params(&cfg).unwrap();
        let n = cfg.tokens();
        let mut r = rng(5);
        let tokens = rand_tensor(&mut r, &[n, cfg.dim], 1.0);

        // random permutation of all token slots
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rand::Rng::random_range(&mut r, 0..=i);
            perm.swap(i, j);
        }
        let mut permuted = Tensor::zeros(vec![n, cfg.dim]);
        for (dst, &src) in perm.iter().enumerate() {
            let d = cfg.dim;
            let row = tokens.data()[src * d..(src + 1) * d].to_vec();
            permuted.data_mut()[dst * d..(dst + 1) * d].copy_from_slice(&row);
        }

        let base = forward_from_tokens(&tokens, &cfg, &params, true).unwrap();
        let shuffled = forward_from_tokens(&permuted, &cfg, &params, true).unwrap();
        for (layer, (s, sp)) in base.scores.iter().zip(&shuffled.scores).enumerate() {
            let mut worst = 0.0 as Real;
            for h in 0..cfg.heads {
                for i in 0..n {
                    for j in 0..n {
                        let want = s.data()[h * n * n + perm[i] * n + perm[j]];
                        let got = sp.data()[h * n * n + i * n + j];
                        worst = worst.max((want - got).abs());
                    }
                }
            }
            assert!(worst < 1e-5, "layer {layer}: max |S_perm - P S P^T| = {worst}");
        }
    });
}

/// 6. A depth-1 toy model hits >=99% train accuracy within 200 steps, and a
///    shared learnable gate (depth 2, where the recursion engages) moves away
///    from its 0.5 initialization.
#[test]
fn acceptance_6_toy_training() {
    criterion(6, "toy training reaches 99% in 200 steps and the gate learns", || {
        let start = Instant::now();
        let train_ds = synthetic_dataset(100, 256, 2, 4, 32).unwrap();
        let val_ds = synthetic_dataset(200, 64, 2, 4, 32).unwrap();
        let tcfg = TrainConfig {
            epochs: 50,
            batch_size: 64,
            base_lr: 6e-3,
            warmup_epochs: 2,
            weight_decay: 0.0,
            grad_clip_norm: 5.0,
            seed: 0,
            schedule: Schedule::Cosine,
        };
        let mut cfg = ModelConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 2,
            variant: Variant::Revit,
            alpha_mode: AlphaMode::Shared,
            seed: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, &tcfg, &train_ds, &val_ds, None, dir.path()).unwrap();
        assert_eq!(out.steps, 200);
        let metrics = std::fs::read_to_string(&out.metrics_path).unwrap();
        let best_acc: f64 = metrics
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(4).unwrap().parse().unwrap())
            .fold(0.0, f64::max);
        assert!(best_acc >= 0.99, "depth-1 train accuracy only {best_acc}");

        // The gate is inert at depth 1 (layer 0 never mixes), so the learned-
        // gate clause runs at the minimal depth where mixing engages.
        cfg.depth = 2;
        let dir2 = tempfile::tempdir().unwrap();
        let out2 = train(&cfg, &tcfg, &train_ds, &val_ds, None, dir2.path()).unwrap();
        let alpha = out2.final_alphas[0];
        assert!(
            (alpha - 0.5).abs() > 1e-4,
            "shared alpha stayed at initialization: {alpha}"
        );
        let elapsed = start.elapsed();
        assert!(elapsed.as_secs() < 120, "took {elapsed:?}, budget 2min");
    });
}

/// 7. Zero-percent perturbation evaluates identically to the plain path,
///    and each mode's sweep emits the full four-level drop table.
#[test]
fn acceptance_7_perturbation_identity_and_sweep() {
    criterion(7, "zero-level perturbation is the identity; sweep table well-formed", || {
        let cfg = ModelConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 4,
            variant: Variant::Vit,
            alpha_mode: AlphaMode::Shared,
            seed: 21,
        };
        let params = init_params(&cfg).unwrap();
        let ds = synthetic_dataset(300, 64, 4, 4, 32).unwrap();
        let plain = evaluate(&cfg, &params, &ds, None, None).unwrap();
        for mode in [PerturbMode::Hshift, PerturbMode::Vshift, PerturbMode::Scale] {
            let spec = PerturbSpec::new(mode, 0).unwrap();
            let with = evaluate(&cfg, &params, &ds, Some(&spec), None).unwrap();
            assert_eq!(plain, with, "{mode}: zero-percent eval must match exactly");
            let rows = perturb_sweep(&cfg, &params, &ds, mode, None).unwrap();
            assert_eq!(rows.len(), 4);
            for (row, pct) in rows.iter().zip([15u32, 30, 45, 60]) {
                assert_eq!(row.percent, pct);
                assert!((row.drop - (plain - row.top1)).abs() < 1e-12);
                assert!(row.top1 >= 0.0 && row.top1 <= 1.0);
            }
        }
        // Full-scale reference only; not reproducible at desk scale: the
        // reported 60%-scale drops are 58.5 (plain) vs 39.0 (residual)
        // accuracy points on Oxford Flowers-102.
        println!("  note: published full-scale drop magnitudes are documentation-only");
    });
}

/// 8. Checkpoint save/load round trip is bitwise for 10 random models.
#[test]
fn acceptance_8_checkpoint_roundtrip() {
    criterion(8, "checkpoint round trip is bitwise for 10 random models", || {
        let start = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        for i in 0..10u64 {
            let cfg = ModelConfig {
                image_size: 32,
                patch_size: if i % 2 == 0 { 8 } else { 16 },
                channels: 3,
                dim: 8 * (1 + (i as usize % 3)),
                depth: 1 + (i as usize % 3),
                heads: 2,
                mlp_ratio: 2,
                num_classes: 2 + (i as usize % 5),
                variant: if i % 2 == 0 { Variant::Revit } else { Variant::Vit },
                alpha_mode: match i % 3 {
                    0 => AlphaMode::Shared,
                    1 => AlphaMode::PerLayer,
                    _ => AlphaMode::Fixed(0.25),
                },
                seed: i,
            };
            let params = init_params(&cfg).unwrap();
            let path = dir.path().join(format!("model_{i}.rvt"));
            save_checkpoint(&path, &Checkpoint::new(cfg.clone(), params.clone())).unwrap();
            let loaded = load_checkpoint(&path).unwrap();
            assert_eq!(loaded.config, cfg);
            for ((na, ta), (nb, tb)) in params.iter().zip(loaded.params.iter()) {
                assert_eq!(na, nb);
                assert_eq!(ta.shape(), tb.shape());
                for (x, y) in ta.data().iter().zip(tb.data()) {
                    assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits(), "{na}");
                }
            }
        }
        let elapsed = start.elapsed();
        assert!(elapsed.as_secs() < 10, "took {elapsed:?}, budget 10s");
    });
}

/// 9. A trained plain/residual pair produces well-formed similarity and
///    non-locality reports; depth orderings are logged, not asserted.
#[test]
fn acceptance_9_feature_collapse_report() {
    criterion(9, "trained-pair analysis reports pass bound and shape checks", || {
        let train_ds = synthetic_dataset(900, 256, 4, 4, 32).unwrap();
        let val_ds = synthetic_dataset(901, 64, 4, 4, 32).unwrap();
        let tcfg = TrainConfig {
            epochs: 20,
            batch_size: 64,
            base_lr: 6e-3,
            warmup_epochs: 2,
            weight_decay: 0.0,
            grad_clip_norm: 5.0,
            seed: 5,
            schedule: Schedule::Cosine,
        };
        let base_cfg = ModelConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            dim: 32,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            num_classes: 4,
            variant: Variant::Vit,
            alpha_mode: AlphaMode::Shared,
            seed: 5,
        };
        let mut revit_cfg = base_cfg.clone();
        revit_cfg.variant = Variant::Revit;

        let dir = tempfile::tempdir().unwrap();
        let vit_out =
            train(&base_cfg, &tcfg, &train_ds, &val_ds, None, &dir.path().join("vit")).unwrap();
        let revit_out =
            train(&revit_cfg, &tcfg, &train_ds, &val_ds, None, &dir.path().join("revit")).unwrap();
        let vit = load_checkpoint(&vit_out.checkpoint_path).unwrap();
        let revit = load_checkpoint(&revit_out.checkpoint_path).unwrap();

        let images: Vec<Tensor> = (0..16).map(|i| val_ds.image(i)).collect();
        let vit_report = nonlocality_report(&vit.config, &vit.params, &images, "vit").unwrap();
        let revit_report =
            nonlocality_report(&revit.config, &revit.params, &images, "revit").unwrap();
        let dm = build_distance_matrix(base_cfg.grid());
        for report in [&vit_report, &revit_report] {
            assert_eq!(report.per_layer.len(), base_cfg.depth);
            assert_eq!(report.per_head.len(), base_cfg.depth);
            assert_eq!(report.samples, images.len());
            for (l, heads) in report.per_head.iter().enumerate() {
                assert_eq!(heads.len(), base_cfg.heads);
                for &d in heads {
                    assert!(d >= 0.0 && d <= dm.max_distance() + 1e-9, "D out of bounds: {d}");
                }
                let mean = heads.iter().sum::<f64>() / heads.len() as f64;
                assert!((mean - report.per_layer[l]).abs() < 1e-9);
            }
        }

        let report_dir = dir.path().join("reports");
        std::fs::create_dir_all(&report_dir).unwrap();
        let (head_csv, layer_csv) =
            write_nonlocality_csvs(&[vit_report.clone(), revit_report.clone()], &report_dir)
                .unwrap();
        assert!(head_csv.exists() && layer_csv.exists());
        let head_lines = std::fs::read_to_string(&head_csv).unwrap().lines().count();
        assert_eq!(head_lines, 1 + 2 * base_cfg.depth * base_cfg.heads);
        write_nonlocality_json(&[vit_report.clone(), revit_report.clone()], &[], base_cfg.grid(), &report_dir)
            .unwrap();
        let sim_paths =
            write_similarity_csvs(&vit.config, &vit.params, &images[..2], "vit", &report_dir)
                .unwrap();
        assert_eq!(sim_paths.len(), 2 * base_cfg.depth);
        let first = std::fs::read_to_string(&sim_paths[0]).unwrap();
        let rows: Vec<&str> = first.lines().collect();
        assert_eq!(rows.len(), base_cfg.patch_tokens());
        assert_eq!(rows[0].split(',').count(), base_cfg.patch_tokens());
        for (r, line) in rows.iter().enumerate() {
            for (c, cell) in line.split(',').enumerate() {
                let v: f64 = cell.parse().unwrap();
                assert!((-1.0 - 1e-5..=1.0 + 1e-5).contains(&v));
                if r == c {
                    assert!((v - 1.0).abs() < 1e-4, "diagonal {v}");
                }
            }
        }

        // Logged observations (paper-scale orderings are not asserted at
        // desk scale).
        let probe = feature_collapse_probe(
            (&vit.config, &vit.params),
            (&revit.config, &revit.params),
            &images,
        )
        .unwrap();
        println!(
            "  observation: plain-variant similarity non-decreasing on {:.0}% of images; \
             residual final-layer similarity lower on {:.0}% of images",
            100.0 * probe.vit_nondecreasing_frac,
            100.0 * probe.revit_lower_final_frac
        );
        println!(
            "  observation: per-layer D (plain)    = {:?}",
            vit_report.per_layer.iter().map(|d| (d * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
        println!(
            "  observation: per-layer D (residual) = {:?}",
            revit_report.per_layer.iter().map(|d| (d * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
        println!(
            "  trained val accuracy: plain {:.3}, residual {:.3}; final alpha {:?}",
            vit_out.best_val, revit_out.best_val, revit_out.final_alphas
        );
    });
}
