//! End-to-end acceptance criteria. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use of3d::autodiff::{concat_cols, concat_rows, Groups, Tape, Var};
use of3d::config::RunConfig;
use of3d::decoder::{QueryMode, SelectMode};
use of3d::gradcheck::GradCheck;
use of3d::inference::{predict, Box3, Prediction};
use of3d::losses::{cls_loss, mask_losses, scene_loss, semantic_loss, total_loss, LossWeights};
use of3d::matching::{
    bench_matchers, cost_matrix, disentangled_match, hungarian, hungarian_constrained, mask_cost, Assignment,
    ConstrainedCost, CostMatrix, Matcher, PROB_CLAMP,
};
use of3d::metrics::{
    box_ap, evaluate, instance_ap, miou, panoptic_quality, GtMask, ScoredBox3, ScoredMask, MAP_THRESHOLDS,
};
use of3d::model::{forward, init_model};
use of3d::params::BoundParams;
use of3d::partition::project_ground_truth;
use of3d::scene::{generate_synthetic_scene, ClassCatalog, SyntheticParams};
use of3d::tensor::Tensor;
use of3d::trainer::{Sample, Trainer};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- criterion 1

fn matcher_equivalence() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut tie_swaps = 0;
    for trial in 0..1000 {
        let k_ins = rng.random_range(1..=64);
        let k_gt = rng.random_range(1..=16);
        // odd trials draw costs from four values to force ties
        let coarse = trial % 2 == 1;
        let entries = (0..k_ins)
            .map(|_| {
                if rng.random::<f64>() < 0.3 {
                    return None;
                }
                let k = rng.random_range(0..k_gt);
                let c = if coarse {
                    rng.random_range(0..4) as f64 * 0.25
                } else {
                    rng.random_range(-1.5..2.5)
                };
                Some((k, c))
            })
            .collect();
        let c = ok(ConstrainedCost::new(k_gt, entries))?;
        let d = disentangled_match(&c);
        let h = ok(hungarian_constrained(&c))?;
        let cost = |i: usize, k: usize| c.get(i, k);
        ensure!(
            d.total_cost(cost) == h.total_cost(cost),
            "trial {trial}: disentangled {} vs hungarian {}",
            d.total_cost(cost),
            h.total_cost(cost)
        );
        ensure!(d.unmatched_gt == h.unmatched_gt, "trial {trial}: different unmatched ground truths");
        ensure!(d.pairs.len() == h.pairs.len(), "trial {trial}: different pair counts");
        for (&(i, k), &(j, k2)) in d.pairs.iter().zip(&h.pairs) {
            ensure!(k == k2, "trial {trial}: pair order differs");
            if i != j {
                ensure!(cost(i, k) == cost(j, k), "trial {trial}: pairs differ without a tie");
                tie_swaps += 1;
            }
        }
        // the column minimum itself is the lowest index among tied proposals
        for &(i, k) in &d.pairs {
            ensure!(
                (0..k_ins).all(|r| cost(r, k) > cost(i, k) || (cost(r, k) == cost(i, k) && r >= i)),
                "trial {trial}: tie not broken toward lowest index"
            );
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.1}s");
    Ok(format!("1000 matrices, exact totals, {tie_swaps} tie swaps, {secs:.2}s"))
}

// ---------------------------------------------------------------- criterion 2

fn complexity() -> Outcome {
    let t0 = Instant::now();
    let r = ok(bench_matchers(&[64, 128, 256, 512, 1024], 3, 0))?;
    let secs = t0.elapsed().as_secs_f64();
    let detail = format!(
        "slopes {:.2} / {:.2}, speedup {:.0}x at 1024, {secs:.1}s",
        r.slope_disentangled, r.slope_hungarian, r.speedup_at_largest
    );
    ensure!(r.slope_disentangled < 1.3, "{detail}");
    ensure!(r.slope_hungarian > 2.5, "{detail}");
    ensure!(r.speedup_at_largest >= 50.0, "{detail}");
    ensure!(secs < 120.0, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 3

/// Minimum over injective maps of the smaller side into the larger one,
/// summed in column order.
fn exhaustive(c: &CostMatrix) -> f64 {
    fn by_cols(c: &CostMatrix, k: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if k == c.cols() {
            *best = best.min(acc);
            return;
        }
        for i in 0..c.rows() {
            if !used[i] {
                used[i] = true;
                by_cols(c, k + 1, used, acc + c.get(i, k), best);
                used[i] = false;
            }
        }
    }
    fn by_rows(c: &CostMatrix, i: usize, chosen: &mut Vec<usize>, best: &mut f64) {
        if i == c.rows() {
            let mut pairs: Vec<(usize, usize)> = chosen.iter().enumerate().map(|(r, &k)| (k, r)).collect();
            pairs.sort_unstable();
            *best = best.min(pairs.iter().map(|&(k, r)| c.get(r, k)).sum());
            return;
        }
        for k in 0..c.cols() {
            if !chosen.contains(&k) {
                chosen.push(k);
                by_rows(c, i + 1, chosen, best);
                chosen.pop();
            }
        }
    }
    let mut best = f64::INFINITY;
    if c.cols() <= c.rows() {
        by_cols(c, 0, &mut vec![false; c.rows()], 0.0, &mut best);
    } else {
        by_rows(c, 0, &mut Vec::new(), &mut best);
    }
    best
}

fn hungarian_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut largest = 0;
    for trial in 0..1000 {
        let (rows, cols) = if trial < 100 {
            (8, 8)
        } else {
            (rng.random_range(1..=8), rng.random_range(1..=8))
        };
        // dyadic costs sum exactly in any order; continuous ones only on tall matrices
        let dyadic = trial % 2 == 0 || cols > rows;
        let data = (0..rows * cols)
            .map(|_| {
                if dyadic {
                    rng.random_range(-64..64) as f64 / 8.0
                } else {
                    rng.random_range(-3.0..3.0)
                }
            })
            .collect();
        let c = ok(CostMatrix::new(rows, cols, data, 0.5))?;
        let a = ok(hungarian(&c))?;
        ensure!(a.pairs.len() == rows.min(cols), "trial {trial}: {} pairs for {rows}x{cols}", a.pairs.len());
        let got = a.total_cost(|i, k| c.get(i, k));
        let want = exhaustive(&c);
        ensure!(got == want, "trial {trial} ({rows}x{cols}): {got} vs exhaustive {want}");
        largest = largest.max(rows * cols);
    }
    ensure!(largest == 64, "no 8x8 case");
    Ok("1000 matrices up to 8x8 equal exhaustive search".into())
}

// ---------------------------------------------------------------- criterion 4

type ScalarFn = Box<dyn Fn(&Tape, &[Var]) -> of3d::Result<Var>>;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in `[0.1, 2)` and random sign, away from kinks.
fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let v = (0..r * c)
        .map(|_| {
            let m = rng.random_range(0.1..2.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(r, c, v).unwrap()
}

/// `Σ out ⊙ w` with a fixed random `w`, so every output entry matters.
fn weighted(out: of3d::Result<Var>, w: &Tensor) -> of3d::Result<Var> {
    let out = out?;
    let w = out.tape().constant(w.clone());
    Ok(out.mul(&w)?.sum())
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=5), rng.random_range(1..=5))
}

fn unary_case(
    rng: &mut ChaCha8Rng,
    input: impl Fn(&mut ChaCha8Rng, usize, usize) -> Tensor,
    op: fn(&Var) -> of3d::Result<Var>,
) -> (Vec<Tensor>, ScalarFn) {
    let (r, c) = dims(rng);
    let x = input(rng, r, c);
    let probe = {
        let t = Tape::new();
        op(&t.constant(x.clone())).unwrap().value()
    };
    let (pr, pc) = (probe.rows(), probe.cols());
    let w = rand_tensor(rng, pr, pc, -1.0, 1.0);
    (vec![x], Box::new(move |_, v| weighted(op(&v[0]), &w)))
}

fn op_cases() -> Vec<(&'static str, fn(&mut ChaCha8Rng) -> (Vec<Tensor>, ScalarFn))> {
    fn any(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        rand_tensor(rng, r, c, -2.0, 2.0)
    }
    fn positive(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        rand_tensor(rng, r, c, 0.2, 3.0)
    }
    fn binary(rng: &mut ChaCha8Rng, op: fn(&Var, &Var) -> of3d::Result<Var>) -> (Vec<Tensor>, ScalarFn) {
        // the second operand is full size, a row, a column or a scalar
        let (r, c) = dims(rng);
        let (br, bc) = [(r, c), (1, c), (r, 1), (1, 1)][rng.random_range(0..4)];
        let a = any(rng, r, c);
        let b = away_from_zero(rng, br, bc);
        let w = rand_tensor(rng, r, c, -1.0, 1.0);
        (vec![a, b], Box::new(move |_, v| weighted(op(&v[0], &v[1]), &w)))
    }
    vec![
        ("matmul", |rng| {
            let (m, k) = dims(rng);
            let n = rng.random_range(1..=5);
            let (a, b) = (any(rng, m, k), any(rng, k, n));
            let w = rand_tensor(rng, m, n, -1.0, 1.0);
            (vec![a, b], Box::new(move |_, v| weighted(v[0].matmul(&v[1]), &w)))
        }),
        ("transpose", |rng| unary_case(rng, any, |x| Ok(x.t()))),
        ("add", |rng| binary(rng, |a, b| a.add(b))),
        ("sub", |rng| binary(rng, |a, b| a.sub(b))),
        ("mul", |rng| binary(rng, |a, b| a.mul(b))),
        ("div", |rng| binary(rng, |a, b| a.div(b))),
        ("scale", |rng| unary_case(rng, any, |x| Ok(x.scale(-1.7)))),
        ("neg", |rng| unary_case(rng, any, |x| Ok(x.neg()))),
        ("add_scalar", |rng| unary_case(rng, any, |x| Ok(x.add_scalar(0.3)))),
        ("exp", |rng| unary_case(rng, any, |x| Ok(x.exp()))),
        ("ln", |rng| unary_case(rng, positive, |x| Ok(x.ln()))),
        ("sigmoid", |rng| unary_case(rng, any, |x| Ok(x.sigmoid()))),
        ("gelu", |rng| unary_case(rng, any, |x| Ok(x.gelu()))),
        ("relu", |rng| unary_case(rng, away_from_zero, |x| Ok(x.relu()))),
        ("softmax_rows", |rng| unary_case(rng, any, |x| x.softmax(1))),
        ("softmax_cols", |rng| unary_case(rng, any, |x| x.softmax(0))),
        ("log_softmax", |rng| unary_case(rng, any, |x| Ok(x.log_softmax()))),
        ("sum", |rng| unary_case(rng, any, |x| Ok(x.sum()))),
        ("mean", |rng| unary_case(rng, any, |x| Ok(x.mean()))),
        ("sum_axis0", |rng| unary_case(rng, any, |x| x.sum_axis(0))),
        ("sum_axis1", |rng| unary_case(rng, any, |x| x.sum_axis(1))),
        ("layer_norm", |rng| {
            let r = rng.random_range(1..=4);
            let c = rng.random_range(2..=6);
            let x = any(rng, r, c);
            let g = any(rng, 1, c);
            let b = any(rng, 1, c);
            let w = rand_tensor(rng, r, c, -1.0, 1.0);
            (vec![x, g, b], Box::new(move |_, v| weighted(v[0].layer_norm(&v[1], &v[2], 1e-5), &w)))
        }),
        ("gather_rows", |rng| {
            let (r, c) = dims(rng);
            let x = any(rng, r, c);
            let idx: Vec<usize> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..r)).collect();
            let w = rand_tensor(rng, idx.len(), c, -1.0, 1.0);
            (vec![x], Box::new(move |_, v| weighted(v[0].gather_rows(&idx), &w)))
        }),
        ("slice_cols", |rng| {
            let r = rng.random_range(1..=4);
            let c = rng.random_range(2..=6);
            let s = rng.random_range(0..c);
            let e = rng.random_range(s + 1..=c);
            let x = any(rng, r, c);
            let w = rand_tensor(rng, r, e - s, -1.0, 1.0);
            (vec![x], Box::new(move |_, v| weighted(v[0].slice_cols(s, e), &w)))
        }),
        ("group_mean", |rng| {
            let (r, c) = dims(rng);
            let g = rng.random_range(1..=4);
            let members: Vec<Vec<usize>> = (0..g)
                .map(|_| (0..rng.random_range(1..=3)).map(|_| rng.random_range(0..r)).collect())
                .collect();
            let groups = Arc::new(Groups::new(members, r).unwrap());
            let x = any(rng, r, c);
            let w = rand_tensor(rng, g, c, -1.0, 1.0);
            (vec![x], Box::new(move |_, v| weighted(v[0].group_mean(groups.clone()), &w)))
        }),
        ("bce_with_logits", |rng| {
            let (r, c) = dims(rng);
            let x = any(rng, r, c);
            let t = rand_tensor(rng, r, c, 0.0, 1.0).map(f64::round);
            let w = rand_tensor(rng, r, c, -1.0, 1.0);
            (vec![x], Box::new(move |_, v| weighted(v[0].bce_with_logits(&t), &w)))
        }),
        ("pick_per_row", |rng| {
            let (r, c) = dims(rng);
            let x = any(rng, r, c);
            let idx: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
            let w = rand_tensor(rng, r, 1, -1.0, 1.0);
            (vec![x], Box::new(move |_, v| weighted(v[0].pick_per_row(&idx), &w)))
        }),
        ("concat_rows", |rng| {
            let c = rng.random_range(1..=4);
            let (r1, r2) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let (a, b) = (any(rng, r1, c), any(rng, r2, c));
            let w = rand_tensor(rng, r1 + r2, c, -1.0, 1.0);
            (vec![a, b], Box::new(move |_, v| weighted(concat_rows(&[v[0].clone(), v[1].clone()]), &w)))
        }),
        ("concat_cols", |rng| {
            let r = rng.random_range(1..=4);
            let (c1, c2) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let (a, b) = (any(rng, r, c1), any(rng, r, c2));
            let w = rand_tensor(rng, r, c1 + c2, -1.0, 1.0);
            (vec![a, b], Box::new(move |_, v| weighted(concat_cols(&[v[0].clone(), v[1].clone()]), &w)))
        }),
        ("mlp", |rng| {
            let (n, d) = dims(rng);
            let h = rng.random_range(1..=6);
            let pts = vec![any(rng, n, d), any(rng, d, h), any(rng, 1, h), any(rng, h, 1)];
            (
                pts,
                Box::new(|_, v| Ok(v[0].matmul(&v[1])?.add(&v[2])?.gelu().matmul(&v[3])?.sigmoid().sum())),
            )
        }),
        ("cls_loss", |rng| {
            let (k, g) = (rng.random_range(2..=6), rng.random_range(1..=2));
            let width = rng.random_range(3..=5);
            let x = any(rng, k, width);
            let classes: Vec<usize> = (0..g).map(|_| rng.random_range(0..width - 1)).collect();
            let a = random_assignment(rng, k, g);
            (vec![x], Box::new(move |_, v| cls_loss(&v[0], &a, &classes)))
        }),
        ("mask_losses", |rng| {
            let (m, k, g) = (rng.random_range(1..=6), rng.random_range(2..=5), rng.random_range(1..=2));
            let x = any(rng, m, k);
            let gt = rand_tensor(rng, m, g, 0.0, 1.0).map(f64::round);
            let a = random_assignment(rng, k, g);
            (
                vec![x],
                Box::new(move |_, v| {
                    let l = mask_losses(&v[0], &a, &gt)?;
                    l.bce.add(&l.dice)
                }),
            )
        }),
        ("semantic_loss", |rng| {
            let (m, k) = dims(rng);
            let x = any(rng, m, k);
            let gt = rand_tensor(rng, m, k, 0.0, 1.0).map(f64::round);
            (vec![x], Box::new(move |_, v| semantic_loss(&v[0], &gt)))
        }),
        ("total_loss", |rng| {
            let parts: Vec<Tensor> = (0..4).map(|_| any(rng, 1, 1)).collect();
            let beta = rng.random_range(0.0..1.0);
            let w = LossWeights { beta, lambda: 0.5 };
            (parts, Box::new(move |_, v| total_loss(&v[0], &v[1], &v[2], &v[3], &w)))
        }),
    ]
}

fn random_assignment(rng: &mut ChaCha8Rng, k: usize, g: usize) -> Assignment {
    // g distinct proposals for g ground truths; the rest unmatched
    let mut rows: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        rows.swap(i, rng.random_range(0..=i));
    }
    let entries = (0..k)
        .map(|i| rows.iter().position(|&r| r == i).filter(|&p| p < g).map(|p| (p, rng.random::<f64>())))
        .collect();
    disentangled_match(&ConstrainedCost::new(g, entries).unwrap())
}

fn scene_loss_case(seed: u64) -> (Vec<String>, Vec<Tensor>, ScalarFn) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = SyntheticParams {
        n_things: rng.random_range(1..=3),
        points_per_surface: rng.random_range(6..=10),
        ..SyntheticParams::default()
    };
    let scene = generate_synthetic_scene(seed, &params).unwrap();
    let mut cfg = RunConfig::default();
    cfg.resolve_classes(&scene.catalog);
    for (k, v) in [("channels", "8"), ("encoder_depth", "1"), ("decoder_layers", "1"), ("heads", "2")] {
        cfg.set(k, v).unwrap();
    }
    let pooling = ["superpoint", "voxel"][(seed % 2) as usize];
    cfg.set("pooling", pooling).unwrap();
    let queries = ["joint", "joint", "instance", "semantic"][(seed % 4) as usize];
    cfg.set("queries", queries).unwrap();
    cfg.matcher = [Matcher::Disentangled, Matcher::Hungarian, Matcher::HungarianFull][(seed % 3) as usize];
    let store = init_model(&cfg.model, seed).unwrap();
    let sample = Sample::new(scene, &cfg).unwrap();
    let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
    let point: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let names2 = names.clone();
    let f: ScalarFn = Box::new(move |tape, vars| {
        let bound = BoundParams::from_vars(names2.iter().cloned().zip(vars.iter().cloned()));
        let prep = &sample.prep;
        let out = forward(&bound, tape, &prep.input, &prep.partition, &cfg.model, SelectMode::Train, seed)?;
        Ok(scene_loss(&out, &sample.gt, &prep.scene.catalog, cfg.matcher, &cfg.weights)?.total)
    });
    (names, point, f)
}

fn gradient_suite() -> Outcome {
    const CONFIGS: usize = 20;
    const TOL: f64 = 1e-4;
    let check = GradCheck::default();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = (0.0, "");
    let cases = op_cases();
    for (name, make) in &cases {
        for cfg in 0..CONFIGS {
            let (point, f) = make(&mut rng);
            let r = ok(check.run(f, &point))?;
            ensure!(r.max_rel_error < TOL, "{name} config {cfg}: {r:?}");
            if r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, name);
            }
        }
    }
    let sampled = GradCheck {
        max_components: Some(2),
        ..GradCheck::default()
    };
    let mut scene_worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..CONFIGS as u64 {
        let (names, point, f) = scene_loss_case(seed);
        let r = ok(sampled.clone().run(f, &point))?;
        ensure!(r.max_rel_error < TOL, "scene loss seed {seed}, parameter {}: {r:?}", names[r.input]);
        scene_worst = scene_worst.max(r.max_rel_error);
        checked += r.checked;
    }
    Ok(format!(
        "{} ops x {CONFIGS} configs, worst {:.1e} ({}); scene loss {CONFIGS} configs, {checked} components, worst {:.1e}",
        cases.len(),
        worst.0,
        worst.1,
        scene_worst
    ))
}

// ---------------------------------------------------------------- criterion 5

fn single_scene_overfit() -> Outcome {
    let t0 = Instant::now();
    let scene = ok(generate_synthetic_scene(0, &SyntheticParams::default()))?;
    let things = scene.instance_ids().len();
    let stuff = scene.catalog.stuff_ids().len();
    ensure!((1800..=2200).contains(&scene.len()), "{} points", scene.len());
    ensure!(things == 8 && stuff == 3, "{things} things, {stuff} stuff classes");
    let cfg = ok(RunConfig::parse(of3d::OVERFIT_CONFIG))?;
    ensure!(cfg.steps <= 500, "{} steps", cfg.steps);
    ensure!(cfg.model.decoder.queries == QueryMode::Joint, "not joint");
    let mut trainer = ok(Trainer::new(vec![scene.clone()], cfg))?;
    for _ in 0..trainer.cfg.steps {
        ok(trainer.train_step())?;
    }
    let sample = ok(Sample::new(scene.clone(), &trainer.cfg))?;
    let pred = ok(predict(&trainer.params, &trainer.cfg.model, &sample.prep, &trainer.cfg.inference))?;
    let r = ok(evaluate(&pred, &scene))?;
    let secs = t0.elapsed().as_secs_f64();
    let detail = format!(
        "{} points, {} steps: mAP50 {:.3} mIoU {:.3} PQ {:.3}, {secs:.0}s",
        scene.len(),
        trainer.cfg.steps,
        r.map50,
        r.miou,
        r.pq
    );
    ensure!(r.map50 == 1.0 && r.miou >= 0.95 && r.pq >= 0.90, "{detail}");
    ensure!(secs < 600.0, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 6

fn small_scene(seed: u64) -> of3d::scene::Scene {
    let p = SyntheticParams {
        n_things: 3,
        points_per_surface: 12,
        ..SyntheticParams::default()
    };
    generate_synthetic_scene(seed, &p).unwrap()
}

fn joint_ablation() -> Outcome {
    let scene = small_scene(6);
    let mut lines = Vec::new();
    for mode in ["joint", "instance", "semantic"] {
        let mut cfg = ok(RunConfig::parse(
            "steps = 3\nbatch_size = 1\nchannels = 8\nencoder_depth = 1\ndecoder_layers = 1\nheads = 2",
        ))?;
        ok(cfg.set("queries", mode))?;
        let mut trainer = ok(Trainer::new(vec![scene.clone()], cfg))?;
        let mut parts = Vec::new();
        for _ in 0..3 {
            parts.push(ok(trainer.train_step())?.parts);
        }
        let sample = ok(Sample::new(scene.clone(), &trainer.cfg))?;
        let pred = ok(predict(&trainer.params, &trainer.cfg.model, &sample.prep, &trainer.cfg.inference))?;
        let text = pred.to_text();
        let has = |section: &str| text.lines().any(|l| l.split_whitespace().next() == Some(section));
        let sections = (has("instances"), has("semantic"), has("panoptic"));
        let want = match mode {
            "joint" => (true, true, true),
            "instance" => (true, false, false),
            _ => (false, true, false),
        };
        ensure!(sections == want, "{mode}: sections {sections:?}");
        ensure!(
            (pred.instances.is_some(), pred.semantic.is_some(), pred.panoptic.is_some()) == want,
            "{mode}: prediction fields disagree with the file"
        );
        match mode {
            "instance" => ensure!(parts.iter().all(|p| p.sem == 0.0), "instance-only has a semantic loss"),
            "semantic" => ensure!(
                parts.iter().all(|p| p.cls == 0.0 && p.bce == 0.0 && p.dice == 0.0),
                "semantic-only has instance losses"
            ),
            _ => ensure!(parts.iter().all(|p| p.cls > 0.0 && p.sem > 0.0), "joint is missing a loss"),
        }
        // the emitted prediction must still evaluate
        ok(evaluate(&pred, &scene))?;
        lines.push(format!("{mode} {}{}{}", sections.0 as u8, sections.1 as u8, sections.2 as u8));
    }
    Ok(format!("sections (inst sem pan): {}", lines.join(", ")))
}

// ---------------------------------------------------------------- criterion 7

fn metric_oracles() -> Outcome {
    let b = |bits: &[u8]| bits.iter().map(|&x| x == 1).collect::<Vec<bool>>();

    // mIoU
    let gt = [0, 0, 1, 1];
    ensure!(ok(miou(&gt, &gt, 2))?.mean == 1.0, "perfect mIoU");
    ensure!(ok(miou(&[1, 1, 0, 0], &gt, 2))?.mean == 0.0, "disjoint mIoU");
    // class 0: GT {0,1}, prediction {0,2}; intersection 1, union 3
    let gt = [0, 0, 1, 1, 1, 1];
    let r = ok(miou(&[0, 1, 0, 1, 1, 1], &gt, 2))?;
    ensure!(r.per_class[0] == Some(1.0 / 3.0), "half overlap IoU {:?}", r.per_class[0]);
    // class 1: GT {2..5}, prediction {1,3,4,5}; intersection 3, union 5
    let expected_mean = (1.0 / 3.0 + 3.0 / 5.0) / 2.0;
    ensure!((r.mean - expected_mean).abs() < 1e-15, "mean {}", r.mean);
    // void ground truth is ignored entirely
    let r = ok(miou(&[0, 1, 1, 1], &[0, -1, 1, 1], 2))?;
    ensure!(r.mean == 1.0, "void handling {}", r.mean);

    // instance AP
    let gts = [GtMask { class: 2, mask: b(&[1, 1, 0, 0]) }];
    let exact = [ScoredMask { class: 2, score: 0.9, mask: b(&[1, 1, 0, 0]) }];
    let r = ok(instance_ap(&exact, &gts, &MAP_THRESHOLDS))?;
    ensure!(r.per_class[0].iter().all(|&v| v == 1.0), "exact AP");
    let fp_first = [
        ScoredMask { class: 2, score: 0.9, mask: b(&[0, 0, 1, 1]) },
        ScoredMask { class: 2, score: 0.4, mask: b(&[1, 1, 0, 0]) },
    ];
    let ap = ok(instance_ap(&fp_first, &gts, &[0.5]))?.mean();
    ensure!(ap == 0.5, "FP-first AP {ap}");
    ensure!(ok(instance_ap(&[], &gts, &[0.5]))?.mean() == 0.0, "empty AP");

    // PQ
    let cat = ClassCatalog::indoor();
    let chair = cat.thing_ids()[0] as i32;
    let floor = cat.stuff_ids()[0] as i32;
    let gt = vec![(floor, -1), (floor, -1), (chair, 4), (chair, 4)];
    ensure!(ok(panoptic_quality(&gt, &gt, &cat))?.pq == 1.0, "perfect PQ");
    let pq = ok(panoptic_quality(&[(chair, 0), (-1, -1)], &[(chair, 1), (chair, 1)], &cat))?.pq;
    ensure!(pq == 0.0, "IoU exactly 0.5 must not match, PQ {pq}");
    // one chair segment covers 4 of the 5 GT points (IoU 0.8), another is a stray FP
    let mut gt = vec![(chair, 1); 5];
    gt.extend([(floor, -1); 3]);
    let mut pred = vec![(chair, 0); 4];
    pred.push((floor, -1));
    pred.extend([(chair, 9), (floor, -1), (floor, -1)]);
    let r = ok(panoptic_quality(&pred, &gt, &cat))?;
    let pq_chair = r.per_class[&(chair as usize)];
    ensure!((pq_chair - 0.8 / 1.5).abs() < 1e-12, "PQ {pq_chair}");
    ensure!((pq_chair - 0.53333).abs() < 1e-5, "PQ {pq_chair}");

    // box AP
    let unit = Box3 { min: [0.0; 3], max: [1.0; 3] };
    let shifted = Box3 { min: [0.5, 0.0, 0.0], max: [1.5, 1.0, 1.0] };
    ensure!((unit.iou(&shifted) - 1.0 / 3.0).abs() < 1e-15, "box IoU {}", unit.iou(&shifted));
    let gt = [(2, unit)];
    let same = [ScoredBox3 { class: 2, score: 1.0, bbox: unit }];
    ensure!(ok(box_ap(&same, &gt, &[0.25, 0.5]))?.mean() == 1.0, "identical boxes");
    let off = [ScoredBox3 { class: 2, score: 1.0, bbox: shifted }];
    let r = ok(box_ap(&off, &gt, &[0.25, 0.5]))?;
    ensure!((r.mean_at(0), r.mean_at(1)) == (1.0, 0.0), "offset cubes {:?}", (r.mean_at(0), r.mean_at(1)));
    let far = [ScoredBox3 { class: 2, score: 1.0, bbox: Box3 { min: [4.0; 3], max: [5.0; 3] } }];
    ensure!(ok(box_ap(&far, &gt, &[0.25, 0.5]))?.mean() == 0.0, "disjoint boxes");
    Ok("mIoU, AP (FP-first 0.5), PQ (0.53333, IoU 0.5 edge), box IoU 1/3".into())
}

// ---------------------------------------------------------------- criterion 8

fn cost_fixtures() -> Outcome {
    let e = PROB_CLAMP;
    let w = LossWeights::default();
    ensure!(w.beta == 0.5 && w.lambda == 0.5, "default weights {w:?}");
    let identity = ok(mask_cost(&[1.0 - e], &[true]))?;
    let half = ok(mask_cost(&[0.5], &[true]))?;
    let empty = ok(mask_cost(&[e], &[false]))?;
    ensure!((identity + 1.0 / 3.0).abs() < 1e-5, "identity {identity}");
    ensure!((half - 0.49315).abs() < 1e-5, "half {half}");
    ensure!((empty + 1.0).abs() < 1e-5, "empty {empty}");
    // one proposal, class column 0 with probability 1, identity 1-segment mask
    let probs = ok(Tensor::matrix(1, 2, vec![1.0, 0.0]))?;
    let masks = ok(Tensor::matrix(1, 1, vec![1.0 - e]))?;
    let c = ok(cost_matrix(&probs, &masks, &[vec![true]], &[0], w.lambda))?.get(0, 0);
    ensure!((c + 0.83333).abs() < 1e-5, "cost {c}");
    let tape = Tape::new();
    let one = || tape.constant(Tensor::scalar(1.0));
    let total = ok(ok(total_loss(&one(), &one(), &one(), &one(), &w))?.item())?;
    ensure!(total == 3.5, "total {total}");
    Ok(format!("C {c:.5}, mask costs {identity:.5} {half:.5} {empty:.5}, total 3.5 at beta 0.5"))
}

// ---------------------------------------------------------------- criterion 9

fn of3d(args: &[&str], threads: &str) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_of3d"))
        .args(args)
        .env("OF3D_THREADS", threads)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "of3d {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = d.join("data");
    of3d(&["gen-data", "--out", &s(&data), "--scenes", "3", "--seed", "9", "--things", "3", "--points-per-surface", "12"], "1")?;
    let cfg = d.join("run.txt");
    std::fs::write(
        &cfg,
        "steps = 6\nbatch_size = 2\nlr = 0.001\nchannels = 8\nencoder_depth = 1\ndecoder_layers = 1\nheads = 2\ncheckpoint_every = 3\n",
    )
    .map_err(|e| e.to_string())?;
    let runs = [("a", "1"), ("b", "1"), ("c", "2")];
    for (name, threads) in runs {
        of3d(&["train", "--data", &s(&data), "--config", &s(&cfg), "--out", &s(&d.join(name))], threads)?;
    }
    for file in ["model.ckpt", "train.log", "config.txt", "checkpoint_000003.ckpt"] {
        let a = read(&d.join("a").join(file))?;
        ensure!(a == read(&d.join("b").join(file))?, "{file} differs between identical runs");
        ensure!(a == read(&d.join("c").join(file))?, "{file} differs with two worker threads");
    }
    let ckpt = d.join("a/model.ckpt");
    let mut preds = Vec::new();
    for i in 0..3 {
        let scene = data.join(format!("scene_{i}.of3d"));
        for k in 0..2 {
            let out = d.join(format!("p{i}_{k}.pred"));
            of3d(&["infer", "--ckpt", &s(&ckpt), "--scene", &s(&scene), "--out", &s(&out)], "1")?;
            preds.push((scene.clone(), out));
        }
    }
    for pair in preds.chunks(2) {
        ensure!(read(&pair[0].1)? == read(&pair[1].1)?, "infer is not deterministic");
        let pred = ok(Prediction::load(&pair[0].1))?;
        let scene = ok(of3d::scene::load_scene(&pair[0].0))?;
        let panoptic = pred.panoptic.clone().ok_or("no panoptic section")?;
        ensure!(ok(pred.refuse(&scene.catalog))? == Some(panoptic), "panoptic section differs from re-fusion");
        let gt = ok(project_ground_truth(&scene, &ok(pred.partition())?))?;
        ensure!(gt.num_segments() == pred.num_segments, "segment count mismatch");
    }
    Ok("train x3 (1 and 2 threads) byte-identical, infer repeatable, panoptic equals re-fusion".into())
}

// ----------------------------------------------------------------------------

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("matcher equivalence", matcher_equivalence),
        ("matcher complexity", complexity),
        ("hungarian oracle", hungarian_oracle),
        ("gradient suite", gradient_suite),
        ("single-scene overfit", single_scene_overfit),
        ("joint training switch", joint_ablation),
        ("metric fixtures", metric_oracles),
        ("cost fixtures", cost_fixtures),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        let line = match &outcome {
            Ok(d) => format!("criterion {} PASS {name} ({secs:.1}s): {d}\n", i + 1),
            Err(d) => format!("criterion {} FAIL {name} ({secs:.1}s): {d}\n", i + 1),
        };
        // bypass the test harness capture so the lines always show
        std::io::stdout().write_all(line.as_bytes()).unwrap();
        if outcome.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
