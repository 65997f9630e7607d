//! Named runtime property checks: a condensed, fast rerun of the core
//! invariant suites, suitable for a release gate. A fault hook lets the
//! harness prove the checks can fail.

use crate::backbone::{
    backbone_tables, encode, rotate_field, BackboneConfig, FeatureField, Field, GroupSpec,
};
use crate::data::{
    augment, drone_params, generate_synthetic, load_image, sample_rng, AugmentationConfig, Sample,
    Split, SyntheticSceneSpec,
};
use crate::error::Result;
use crate::graph::{build_graph, gcn_propagate, Activation, NodeGraph, PatchGrid};
use crate::loss::total_loss;
use crate::model::{EgsModel, ModelConfig};
use crate::retrieval::{average_precision, rank, recall_at, Cutoff, GalleryIndex, RankingResult, View};
use crate::tape::Graph;
use crate::tensor::{rel_err, Tensor};
use crate::train::{
    load_checkpoint, save_checkpoint, save_checkpoint_parts, sgd_step, LrGroups, OptimizerState,
    TrainConfig, Trainer,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

/// Deliberate defect injected into a check's stimulus path, to verify
/// the suite notices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    None,
    /// The input-side rotation applies one extra group step.
    BrokenRotation,
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type CheckFn = fn(Fault) -> std::result::Result<(), String>;

fn fail<E: std::fmt::Display>(e: E) -> String {
    format!("{}", e)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0))
}

/// Input-side rotation with the fault hook applied.
fn stimulus_rotation(
    fault: Fault,
    spec: &GroupSpec,
    f: &FeatureField<f32>,
    r: usize,
) -> Result<FeatureField<f32>> {
    let r = match fault {
        Fault::None => r,
        Fault::BrokenRotation => (r + 1) % spec.order(),
    };
    rotate_field(spec, f, r)
}

fn check_backbone_equivariance(fault: Fault) -> std::result::Result<(), String> {
    for order in [1usize, 2, 4] {
        let spec = GroupSpec::new(order).map_err(fail)?;
        let cfg = BackboneConfig {
            group: spec,
            stage_widths: vec![2, 3],
            kernel_size: 3,
            downsample: vec![1, 1],
        };
        let tables = backbone_tables(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(900 + order as u64);
        let img = rand_tensor(&mut rng, vec![1, 6, 6]);
        let b0 = rand_tensor(&mut rng, cfg.base_shape(0, 1));
        let c0 = rand_tensor(&mut rng, vec![2]);
        let b1 = rand_tensor(&mut rng, cfg.base_shape(1, 1));
        let c1 = rand_tensor(&mut rng, vec![3]);

        let run = |input: &FeatureField<f32>| -> Result<Tensor<f32>> {
            let mut g: Graph<f32> = Graph::new();
            let inp = Field::input(&mut g, input);
            let p0 = g.param(b0.clone());
            let q0 = g.param(c0.clone());
            let p1 = g.param(b1.clone());
            let q1 = g.param(c1.clone());
            let out = encode(&mut g, &inp, &[(p0, q0), (p1, q1)], &tables, &cfg)?;
            Ok(out.read(&g).into_tensor())
        };

        let x = FeatureField::from_image(img).map_err(fail)?;
        let base = run(&x).map_err(fail)?;
        for r in 0..order {
            let rotated_in = stimulus_rotation(fault, &cfg.group, &x, r).map_err(fail)?;
            let lhs = run(&rotated_in).map_err(fail)?;
            // encoded output has one orientation slot; rotating it is a
            // plain quarter-turn of the plane
            let rhs = rotate_field(
                &cfg.group,
                &FeatureField::new(base.clone()).map_err(fail)?,
                r,
            )
            .map_err(fail)?;
            for (a, b) in lhs.values().iter().zip(rhs.data().values()) {
                if rel_err(*a as f64, *b as f64) > 1e-4 {
                    return Err(format!(
                        "order {} rotation {}: encode/rotate mismatch {} vs {}",
                        order, r, a, b
                    ));
                }
            }
        }
    }
    Ok(())
}

fn check_order8_subgroup(fault: Fault) -> std::result::Result<(), String> {
    let spec = GroupSpec::new(8).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(910);
    let img = rand_tensor(&mut rng, vec![2, 8, 8]);
    let x = FeatureField::from_image(img).map_err(fail)?;
    for r in [0usize, 2, 4, 6] {
        let a = stimulus_rotation(fault, &spec, &x, r).map_err(fail)?;
        let b = rotate_field(&spec, &x, r).map_err(fail)?;
        for (p, q) in a.data().values().iter().zip(b.data().values()) {
            if (p - q).abs() > 1e-6 {
                return Err(format!("quarter-turn element {} drifted: {} vs {}", r, p, q));
            }
        }
    }
    Ok(())
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        group_order: 4,
        stage_widths: vec![3],
        kernel_size: 3,
        downsample: vec![2],
        image_channels: 3,
        image_side: 16,
        grid_side: 2,
        gnn_widths: vec![6],
        super_node: true,
        classes: 4,
    }
}

fn check_descriptor_invariance(_fault: Fault) -> std::result::Result<(), String> {
    let model: EgsModel<f32> = EgsModel::new(tiny_model_config(), 21).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(920);
    let img = Tensor::from_fn(vec![3, 16, 16], |_| rng.gen_range(0.0f32..1.0));
    let base = model
        .embed(&[FeatureField::from_image(img.clone()).map_err(fail)?])
        .map_err(fail)?;
    for turns in 1..4 {
        let rotated = crate::backbone::rot90_tensor(&img, turns).map_err(fail)?;
        let out = model
            .embed(&[FeatureField::from_image(rotated).map_err(fail)?])
            .map_err(fail)?;
        for (a, b) in out.values().iter().zip(base.values()) {
            if rel_err(*a as f64, *b as f64) > 1e-4 {
                return Err(format!(
                    "descriptor moved under a {}-turn rotation: {} vs {}",
                    turns, a, b
                ));
            }
        }
    }
    Ok(())
}

fn check_gcn_oracle(_fault: Fault) -> std::result::Result<(), String> {
    let grid = PatchGrid::new(2, 2).map_err(fail)?;
    let graph: NodeGraph = build_graph(&grid);
    let n = graph.nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(930);
    for _ in 0..5 {
        let h = rand_tensor(&mut rng, vec![n, 3]);
        let w = rand_tensor(&mut rng, vec![3, 2]);
        let mut g: Graph<f32> = Graph::new();
        let hv = g.leaf(h.clone());
        let wv = g.param(w.clone());
        let out = gcn_propagate(&mut g, hv, &graph, wv, Activation::Identity).map_err(fail)?;
        let dense = g.value(out).clone();

        // brute force: per-target gather over explicit neighbor lists
        let mix: Tensor<f32> = graph.mixing();
        for i in 0..n {
            for c in 0..2 {
                let mut acc = 0.0f32;
                for k in 0..3 {
                    let mut msg = 0.0f32;
                    for j in 0..n {
                        msg += mix.values()[i * n + j] * h.values()[j * 3 + k];
                    }
                    acc += msg * w.values()[k * 2 + c];
                }
                let got = dense.values()[i * 2 + c];
                if got.to_bits() != acc.to_bits() {
                    return Err(format!(
                        "node {} channel {}: dense {} vs brute {}",
                        i, c, got, acc
                    ));
                }
            }
        }

        // column-stochastic mixing conserves per-channel totals
        let mut g2: Graph<f32> = Graph::new();
        let hv2 = g2.leaf(h.clone());
        let eye = g2.leaf(Tensor::from_fn(vec![3, 3], |i| {
            if i % 4 == 0 { 1.0 } else { 0.0 }
        }));
        let mixed = gcn_propagate(&mut g2, hv2, &graph, eye, Activation::Identity).map_err(fail)?;
        for k in 0..3 {
            let before: f64 = (0..n).map(|j| h.values()[j * 3 + k] as f64).sum();
            let after: f64 = (0..n)
                .map(|j| g2.value(mixed).values()[j * 3 + k] as f64)
                .sum();
            if (before - after).abs() > 1e-5 {
                return Err(format!("channel {} total drifted {} -> {}", k, before, after));
            }
        }
    }
    Ok(())
}

fn check_loss_closed_forms(_fault: Fault) -> std::result::Result<(), String> {
    let eye2 = Tensor::<f64>::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).map_err(fail)?;
    let swap = Tensor::<f64>::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).map_err(fail)?;
    let logits = Tensor::<f64>::new(vec![1, 2], vec![0.3, 0.3]).map_err(fail)?;

    let run = |u: &Tensor<f64>, v: &Tensor<f64>| -> Result<f64> {
        let mut g: Graph<f64> = Graph::new();
        let uv = g.param(u.clone());
        let vv = g.param(v.clone());
        let iv = crate::loss::infonce(&mut g, uv, vv, 1.0)?;
        Ok(g.value(iv).item())
    };
    let aligned = run(&eye2, &eye2).map_err(fail)?;
    let expect = (1.0 + (-1.0f64).exp()).ln();
    if (aligned - expect).abs() > 1e-6 {
        return Err(format!("aligned batch: {} vs {}", aligned, expect));
    }
    let crossed = run(&eye2, &swap).map_err(fail)?;
    let expect = (1.0 + 1.0f64.exp()).ln();
    if (crossed - expect).abs() > 1e-6 {
        return Err(format!("crossed batch: {} vs {}", crossed, expect));
    }

    // B=1: the pair term vanishes and the total is the classifier term
    let u1 = Tensor::<f64>::new(vec![1, 2], vec![1.0, 0.0]).map_err(fail)?;
    let mut g: Graph<f64> = Graph::new();
    let uv = g.param(u1.clone());
    let lv = g.param(logits.clone());
    let (_, value) = total_loss(&mut g, uv, uv, lv, &[0], 0.5).map_err(fail)?;
    if value.infonce != 0.0 {
        return Err(format!("B=1 pair loss should be exactly 0, got {}", value.infonce));
    }
    let expect = 2.0f64.ln();
    if (value.ce - expect).abs() > 1e-9 || (value.total - value.ce).abs() > 1e-12 {
        return Err(format!("B=1 totals: ce {} total {}", value.ce, value.total));
    }
    Ok(())
}

fn check_gradients(_fault: Fault) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(940);
    let img = Tensor::<f64>::from_fn(vec![2, 4, 4], |_| rng.gen_range(0.2..1.0));
    let kernel = Tensor::<f64>::from_fn(vec![2, 2, 3, 3], |_| rng.gen_range(-0.4..0.4));
    let report = crate::gradcheck::grad_check(&[img, kernel], 1e-5, |g, vars| {
        let conv = g.conv2d_same(vars[0], vars[1])?;
        let pooled = g.avg_pool2(conv)?;
        let flat = g.reshape(pooled, vec![2 * 2 * 2])?;
        let z = g.l2_normalize(flat);
        let row = g.reshape(z, vec![1, 8])?;
        g.cross_entropy_rows(row, &[3])
    })
    .map_err(fail)?;
    if !report.passes(1e-4) {
        return Err(format!("max relative gradient error {}", report.max_rel_err));
    }
    Ok(())
}

fn check_retrieval_oracle(_fault: Fault) -> std::result::Result<(), String> {
    // pinned rank fixtures
    let ranking = RankingResult {
        order: (0..12).collect(),
        ids: (0..12).collect(),
        distances: (0..12).map(|i| i as f64).collect(),
    };
    let rel3: BTreeSet<u64> = [2u64].into_iter().collect();
    let ap = average_precision(&ranking, &rel3).map_err(fail)?;
    if (ap - 1.0 / 3.0).abs() > 1e-12 {
        return Err(format!("single relevant at rank 3: AP {} vs 1/3", ap));
    }
    let rel6: BTreeSet<u64> = [5u64].into_iter().collect();
    let r5 = recall_at(&ranking, &rel6, Cutoff::Rank(5)).map_err(fail)?;
    let r10 = recall_at(&ranking, &rel6, Cutoff::Rank(10)).map_err(fail)?;
    if r5 != 0.0 || r10 != 1.0 {
        return Err(format!("rank-6 hit: R@5 {} R@10 {}", r5, r10));
    }

    // exact agreement with a from-definition reference on random instances
    let mut rng = ChaCha8Rng::seed_from_u64(950);
    for _ in 0..5 {
        let m = rng.gen_range(5..30);
        let d = rng.gen_range(2..6);
        let mut vals: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for r in 0..m {
            let row = &mut vals[r * d..(r + 1) * d];
            let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= norm);
        }
        let e = Tensor::new(vec![m, d], vals.iter().map(|&x| x as f32).collect()).map_err(fail)?;
        let gal = GalleryIndex::with_uniform_view(e, (0..m as u64).collect(), View::Satellite)
            .map_err(fail)?;
        let q: Vec<f32> = {
            let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            v.into_iter().map(|x| x as f32).collect()
        };
        let ranking = rank(&q, &gal).map_err(fail)?;
        let mut reference: Vec<(f64, usize)> = (0..m)
            .map(|i| {
                let mut acc = 0.0f64;
                for (a, b) in q.iter().zip(gal.row(i)) {
                    let diff = *a as f64 - *b as f64;
                    acc += diff * diff;
                }
                (acc, i)
            })
            .collect();
        reference.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let ref_order: Vec<usize> = reference.iter().map(|&(_, i)| i).collect();
        if ranking.order != ref_order {
            return Err("ranking disagrees with the from-definition reference".into());
        }
    }
    Ok(())
}

fn check_augmentation(_fault: Fault) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(960);
    let px = Tensor::from_fn(vec![3, 12, 12], |_| {
        (rng.gen_range(0..256u32) as f32) / 255.0
    });
    let sample = Sample::from_pixels(px, 1, View::Drone).map_err(fail)?;
    let off = AugmentationConfig {
        rotate: false,
        flip: false,
        crop_fraction: 1.0,
        seed: 0,
    };
    let out = augment(&sample, &off, &mut sample_rng(0, 0, 0)).map_err(fail)?;
    if out.pixels().map_err(fail)?.values() != sample.pixels().map_err(fail)?.values() {
        return Err("disabled augmentation must be the identity".into());
    }
    let on = AugmentationConfig {
        rotate: true,
        flip: true,
        crop_fraction: 0.75,
        seed: 9,
    };
    let a = augment(&sample, &on, &mut sample_rng(9, 1, 4)).map_err(fail)?;
    let b = augment(&sample, &on, &mut sample_rng(9, 1, 4)).map_err(fail)?;
    if a.pixels().map_err(fail)?.values() != b.pixels().map_err(fail)?.values() {
        return Err("same seed must reproduce the same augmentation".into());
    }
    Ok(())
}

fn check_synthetic_ground_truth(_fault: Fault) -> std::result::Result<(), String> {
    let spec = SyntheticSceneSpec {
        classes: 2,
        side: 24,
        variants: 2,
        noise: 0.0,
        tint: 0.0,
        seed: 5,
        ..Default::default()
    };
    let dir = tempfile::tempdir().map_err(fail)?;
    generate_synthetic(&spec, dir.path()).map_err(fail)?;
    for class in 0..spec.classes {
        let name = format!("{:04}", class);
        let sat = load_image(
            &dir.path()
                .join("train")
                .join("satellite")
                .join(&name)
                .join("sat.png"),
        )
        .map_err(fail)?;
        for v in 0..spec.variants {
            let p = drone_params(&spec, class, Split::Train, v);
            let drone = load_image(
                &dir.path()
                    .join("train")
                    .join("drone")
                    .join(&name)
                    .join(format!("d{:02}.png", v)),
            )
            .map_err(fail)?;
            let unrot = crate::backbone::rot90_tensor(&drone, (4 - p.turns) % 4).map_err(fail)?;
            let side = sat.shape()[1];
            for c in 0..3 {
                for y in 0..p.crop_side {
                    for x in 0..p.crop_side {
                        let got = unrot.values()[c * p.crop_side * p.crop_side + y * p.crop_side + x];
                        let want =
                            sat.values()[c * side * side + (p.top + y) * side + (p.left + x)];
                        if got.to_bits() != want.to_bits() {
                            return Err(format!(
                                "class {} variant {}: pixel ({},{},{}) {} vs {}",
                                class, v, c, y, x, got, want
                            ));
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

fn check_checkpoint_round_trip(_fault: Fault) -> std::result::Result<(), String> {
    let spec = SyntheticSceneSpec {
        classes: 4,
        side: 16,
        variants: 1,
        seed: 2,
        ..Default::default()
    };
    let dir = tempfile::tempdir().map_err(fail)?;
    let manifest = generate_synthetic(&spec, dir.path()).map_err(fail)?;
    let cfg = ModelConfig {
        classes: 4,
        ..tiny_model_config()
    };
    let model: EgsModel<f32> = EgsModel::new(cfg, 3).map_err(fail)?;
    let train_cfg = TrainConfig {
        epochs: 1,
        batch_pairs: 2,
        seed: 8,
        ..Default::default()
    };
    let mut trainer = Trainer::new(model, train_cfg, &manifest).map_err(fail)?;
    trainer.train_step().map_err(fail)?;
    let p1 = dir.path().join("a.egsc");
    let p2 = dir.path().join("b.egsc");
    save_checkpoint(&p1, &trainer).map_err(fail)?;
    let loaded = load_checkpoint(&p1).map_err(fail)?;
    save_checkpoint_parts(
        &p2,
        loaded.step,
        &loaded.config,
        &loaded.train,
        &loaded.params,
        &loaded.buffers,
        &loaded.velocity,
    )
    .map_err(fail)?;
    let a = std::fs::read(&p1).map_err(fail)?;
    let b = std::fs::read(&p2).map_err(fail)?;
    if a != b {
        return Err("save -> load -> save is not byte identical".into());
    }
    Ok(())
}

fn check_sgd_hand_cases(_fault: Fault) -> std::result::Result<(), String> {
    let mut params = BTreeMap::new();
    params.insert(
        "head.classifier.weight".to_string(),
        Tensor::<f64>::new(vec![1], vec![1.0]).map_err(fail)?,
    );
    let mut grads = BTreeMap::new();
    grads.insert(
        "head.classifier.weight".to_string(),
        Tensor::<f64>::new(vec![1], vec![2.0]).map_err(fail)?,
    );
    let mut state = OptimizerState::new(
        LrGroups {
            backbone: 0.1,
            new_layers: 0.1,
        },
        0.0,
        0.0,
    );
    sgd_step(&mut params, &grads, &mut state).map_err(fail)?;
    let p = params["head.classifier.weight"].values()[0];
    if (p - 0.8).abs() > 1e-15 {
        return Err(format!("vanilla step: {} vs 0.8", p));
    }
    Ok(())
}

const CHECKS: &[(&str, CheckFn)] = &[
    ("backbone-equivariance", check_backbone_equivariance),
    ("order8-quarter-turn-subgroup", check_order8_subgroup),
    ("descriptor-rotation-invariance", check_descriptor_invariance),
    ("gcn-brute-force-oracle", check_gcn_oracle),
    ("loss-closed-forms", check_loss_closed_forms),
    ("gradient-finite-difference", check_gradients),
    ("retrieval-metric-oracle", check_retrieval_oracle),
    ("augmentation-determinism", check_augmentation),
    ("synthetic-ground-truth", check_synthetic_ground_truth),
    ("checkpoint-round-trip", check_checkpoint_round_trip),
    ("sgd-hand-cases", check_sgd_hand_cases),
];

/// Run every named check; `fault` feeds the injection hook so a harness
/// can confirm the suite is live.
pub fn run_all(fault: Fault) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|&(name, f)| match f(fault) {
            Ok(()) => CheckOutcome {
                name,
                passed: true,
                detail: String::new(),
            },
            Err(detail) => CheckOutcome {
                name,
                passed: false,
                detail,
            },
        })
        .collect()
}
