//! Acceptance suite. Each test prints one PASS/FAIL line with its measured
//! values and then asserts.

mod common;

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rnnprop::evalkit::{average_recall, evaluate_policy, iou_box, EvalImage};
use rnnprop::imagecore::{BBox, Image};
use rnnprop::inference::{greedy_merge, proposals_csv, proposals_from_segmentations, randomized_merge, top_k_sample, MergePolicy};
use rnnprop::overseg::{build_region_graph, fh_segment, RegionGraph};
use rnnprop::pipeline::{eval_images, generate_corpus, training_examples, RunConfig};
use rnnprop::rng::rng_from;
use rnnprop::rnnmodel::{encode_model, init_params, objectness_parts, Dims, MergeTree, ModelParams};
use rnnprop::training::{
    example_loss, example_loss_and_grad, greedy_augmented_tree, greedy_correct_tree, margin_delta,
    margin_delta_of_merges, train, InstanceLabeling, TrainConfig, TrainExample,
};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use common::{all_merge_sequences, brute_delta, toy_problem};

fn report(name: &str, ok: bool, detail: String) {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

// ---------------------------------------------------------------------------
// Gradient oracle

const GRAD_SEEDS: [u64; 20] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20];

fn total_loss(ex: &TrainExample, p: &ModelParams, cfg: &TrainConfig) -> f64 {
    let l = example_loss(ex, p, cfg).unwrap();
    l.merging + cfg.lambda * l.objectness
}

/// Merge structure and ReLU sign pattern of both greedy trees; a central
/// difference is only meaningful when these agree at both probes.
fn signature(ex: &TrainExample, p: &ModelParams, kappa: f64) -> Vec<i64> {
    let aug = greedy_augmented_tree(&ex.graph, &ex.features, p, &ex.labeling, kappa).unwrap();
    let cor = greedy_correct_tree(&ex.graph, &ex.features, p, &ex.labeling).unwrap();
    let mut sig = Vec::new();
    for tree in [&aug.tree, &cor] {
        for node in &tree.nodes {
            if let Some((a, b)) = node.children {
                sig.extend([a as i64, b as i64]);
            }
            sig.extend(node.pre_activation.0.iter().map(|v| (*v > 0.0) as i64));
            let (obj_pre, _, _) = objectness_parts(p, &node.semantic).unwrap();
            sig.extend(obj_pre.0.iter().map(|v| (*v > 0.0) as i64));
        }
        sig.push(-1);
    }
    sig
}

#[test]
fn gradient_oracle() {
    let start = Instant::now();
    let h = 1e-5;
    let cfg = TrainConfig { kappa: 1.0, lambda: 1.0, ..TrainConfig::default() };
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut active = 0usize;
    for &seed in &GRAD_SEEDS {
        let n = 3 + (seed as usize % 4);
        let toy = toy_problem(n, 8, 2, seed);
        let ex = &toy.example;
        let mut params = init_params(Dims { feature: 8, semantic: 4 }, seed).unwrap();
        // Nonzero biases keep pre-activations off the ReLU kink at 0.
        let mut rng = rng_from(seed, 44);
        for b in [&mut params.b_s, &mut params.b_c, &mut params.b_o0] {
            b.0.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
        let mut grads = params.grad_store();
        let loss = example_loss_and_grad(ex, &params, &cfg, &mut grads).unwrap();
        if loss.merging > 0.0 {
            active += 1;
        }
        let base = signature(ex, &params, cfg.kappa);
        for t in 0..8 {
            for i in 0..grads.tensors[t].data.len() {
                let mut plus = params.clone();
                plus.tensors_mut()[t][i] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[t][i] -= h;
                if signature(ex, &plus, cfg.kappa) != base || signature(ex, &minus, cfg.kappa) != base {
                    skipped += 1;
                    continue;
                }
                let numeric = (total_loss(ex, &plus, &cfg) - total_loss(ex, &minus, &cfg)) / (2.0 * h);
                let analytic = grads.tensors[t].data[i];
                // Relative error with a floor so that entries that are
                // zero analytically compare absolutely.
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        "gradient oracle",
        worst < 1e-4 && elapsed < Duration::from_secs(30) && active >= 10,
        format!(
            "{} seeds, {checked} coordinates checked, {skipped} at kinks skipped, hinge active on {active}, \
             max relative error {worst:.2e} (< 1e-4), {:.1}s (< 30s)",
            GRAD_SEEDS.len(),
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// Tree oracle

fn fig4() -> (RegionGraph, Vec<(u32, u32)>, InstanceLabeling) {
    // g1=0 g2=1 on top, b1=2 b2=3 below.
    let edges = vec![(0, 1), (0, 2), (1, 3), (2, 3)];
    (RegionGraph::from_edges(4, &edges), edges, InstanceLabeling::from_instances(vec![0, 0, 1, 1]))
}

#[test]
fn tree_oracle() {
    let (_, _, lab) = fig4();
    let fig = [
        (vec![(0, 1), (2, 3), (4, 5)], 0),
        (vec![(0, 1), (2, 4), (3, 5)], 2),
        (vec![(0, 2), (1, 3), (4, 5)], 3),
    ];
    let fig_ok = fig.iter().all(|(m, d)| {
        margin_delta_of_merges(m, &lab) == *d && brute_delta(4, m, &lab.region_instance) == *d
    });

    let mut sequences = 0usize;
    let mut delta_mismatch = 0usize;
    let mut greedy_over = 0usize;
    let mut graphs = 0usize;
    let kappa = 0.7;
    for seed in 0..30u64 {
        let n = 3 + (seed as usize % 4);
        for classes in [2, 3] {
            let toy = toy_problem(n, 5, classes, seed * 10 + classes as u64);
            let ex = &toy.example;
            let params = init_params(Dims { feature: 5, semantic: 3 }, seed + 100).unwrap();
            let mut best_aug = f64::NEG_INFINITY;
            let mut best_correct = f64::NEG_INFINITY;
            for merges in all_merge_sequences(n, &toy.edges) {
                sequences += 1;
                let tree = MergeTree::from_merges(&params, &toy.graph, &ex.features, &merges).unwrap();
                let d = margin_delta(&tree, &ex.labeling);
                if d != brute_delta(n, &merges, &toy.instances) {
                    delta_mismatch += 1;
                }
                best_aug = best_aug.max(tree.score() + kappa * d as f64);
                if d == 0 {
                    best_correct = best_correct.max(tree.score());
                }
            }
            let aug = greedy_augmented_tree(&toy.graph, &ex.features, &params, &ex.labeling, kappa).unwrap();
            let cor = greedy_correct_tree(&toy.graph, &ex.features, &params, &ex.labeling).unwrap();
            if aug.augmented_score > best_aug || cor.score() > best_correct || margin_delta(&cor, &ex.labeling) != 0 {
                greedy_over += 1;
            }
            graphs += 1;
        }
    }
    report(
        "tree oracle",
        fig_ok && delta_mismatch == 0 && greedy_over == 0,
        format!(
            "Fig. 4 deltas (0, 2, 3) reproduced: {fig_ok}; {sequences} merge sequences on {graphs} graphs of 3-6 \
             regions, delta mismatches {delta_mismatch}, greedy above brute-force max {greedy_over}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Greedy equivalence

#[test]
fn greedy_equivalence() {
    let mut identical = 0;
    let draws = 100;
    for draw in 0..draws as u64 {
        let mut rng = rng_from(draw, 5);
        let n = rng.gen_range(1..=14);
        let toy = toy_problem(n, 6, 3, draw + 1000);
        let mut params = init_params(Dims { feature: 6, semantic: 5 }, draw).unwrap();
        for b in [&mut params.b_s, &mut params.b_c, &mut params.b_o0] {
            b.0.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
        let feats = &toy.example.features;
        let policy = MergePolicy { k: 1, repeats: 1, seed: draw };
        let fast = randomized_merge(&toy.graph, feats, &params, &policy, 0).unwrap();
        let naive = greedy_merge(&toy.graph, feats, &params).unwrap();
        if fast == naive && fast.internal_count() == n - 1 {
            identical += 1;
        }
    }
    report(
        "greedy equivalence",
        identical == draws,
        format!("randomized k=1 bit-identical to reference greedy on {identical}/{draws} weight/graph draws"),
    );
}

// ---------------------------------------------------------------------------
// Multinomial fidelity

#[test]
fn multinomial_fidelity() {
    let draws = 100_000;
    let mut min_p = 1.0f64;
    for set in 0..10u64 {
        let mut rng = rng_from(set, 9);
        let m = 2 + (set as usize % 7);
        let k = 2 + (set as usize % (m - 1));
        let scores: Vec<(f64, (usize, usize))> = (0..m).map(|i| (rng.gen_range(-2.0..2.0), (i, 100 + i))).collect();
        let mut top = scores.clone();
        top.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        top.truncate(k);
        let z: f64 = top.iter().map(|(s, _)| s.exp()).sum();
        let mut counts = vec![0usize; k];
        let mut draw_rng = rng_from(set, 10);
        for _ in 0..draws {
            let pair = top_k_sample(&scores, k, &mut draw_rng).unwrap();
            counts[top.iter().position(|t| t.1 == pair).expect("pair from the top k")] += 1;
        }
        let chi2: f64 = top
            .iter()
            .zip(&counts)
            .map(|((s, _), &c)| {
                let e = draws as f64 * s.exp() / z;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        let p = 1.0 - ChiSquared::new((k - 1) as f64).unwrap().cdf(chi2);
        min_p = min_p.min(p);
    }
    report(
        "multinomial fidelity",
        min_p > 0.001,
        format!("10 score sets x 1e5 draws, smallest chi-square p-value {min_p:.4} (> 0.001)"),
    );
}

// ---------------------------------------------------------------------------
// Segmentation sanity

#[test]
fn segmentation_sanity() {
    let mut halves = Image::filled(4, 4, [255, 0, 0]).unwrap();
    for y in 0..4 {
        for x in 2..4 {
            halves.set_pixel(x, y, [0, 0, 255]);
        }
    }
    let seg = fh_segment(&halves, 10.0, 1, 0.0).unwrap();
    let (left, right) = (seg.region_of[0], seg.region_of[2]);
    let two = seg.region_count == 2
        && left != right
        && (0..16).all(|p| seg.region_of[p] == if p % 4 < 2 { left } else { right });
    let uniform = Image::filled(9, 7, [40, 90, 10]).unwrap();
    let one = [1.0, 100.0, 5000.0].iter().all(|&k| fh_segment(&uniform, k, 1, 0.8).unwrap().region_count == 1);

    let mut violations = 0;
    let mut smallest = usize::MAX;
    for i in 0..50u64 {
        let mut rng = rng_from(i, 33);
        let data: Vec<u8> = (0..16 * 16 * 3).map(|_| rng.gen()).collect();
        let img = Image::new(16, 16, data).unwrap();
        let k = rng.gen_range(10.0..500.0);
        let seg = fh_segment(&img, k, 20, 0.8).unwrap();
        let graph = build_region_graph(&seg);
        for node in &graph.nodes {
            smallest = smallest.min(node.pixel_count);
            if node.pixel_count < 20 {
                violations += 1;
            }
        }
    }
    report(
        "segmentation sanity",
        two && one && violations == 0,
        format!(
            "two-region halves exact: {two}; uniform gives one region: {one}; 50 noise images with min_size 20: \
             {violations} undersized regions (smallest {smallest} px)"
        ),
    );
}

// ---------------------------------------------------------------------------
// End-to-end learning and randomization direction (shared trained model)

struct Trained {
    params: ModelParams,
    test: Vec<EvalImage>,
    epochs: usize,
    train_time: Duration,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let cfg = RunConfig::default();
        let train_scenes = generate_corpus(&cfg.scene, 0, 80).unwrap();
        let test_scenes = generate_corpus(&cfg.scene, 80, 20).unwrap();
        let examples = training_examples(&train_scenes, &cfg).unwrap();
        let out = train(&examples, &cfg.train).unwrap();
        let train_time = start.elapsed();
        Trained { params: out.params, test: eval_images(&test_scenes, &cfg).unwrap(), epochs: cfg.train.epochs, train_time }
    })
}

#[test]
fn end_to_end_learning() {
    let start = Instant::now();
    let t = trained();
    let random = evaluate_policy(&t.test, &t.params, "random", &MergePolicy::default(), &[100]).unwrap();
    let greedy = evaluate_policy(&t.test, &t.params, "greedy", &MergePolicy::greedy(), &[100]).unwrap();
    let total = t.train_time + start.elapsed();
    let recall = random.recall[0][0];
    report(
        "end-to-end learning",
        recall >= 0.9 && t.epochs <= 50 && total < Duration::from_secs(600),
        format!(
            "80/20 corpus (seed 42), {} epochs: R@0.5 budget 100 = {recall:.4} (random k=5 x8, >= 0.9), \
             greedy {:.4}; {} test objects; train+eval {:.1}s (< 600s)",
            t.epochs,
            greedy.recall[0][0],
            random.gt_count,
            total.as_secs_f64()
        ),
    );
}

#[test]
fn randomization_direction() {
    let t = trained();
    let greedy = evaluate_policy(&t.test, &t.params, "greedy", &MergePolicy::greedy(), &[500]).unwrap().ar[0];
    let sweep: Vec<f64> = [1, 2, 4, 8]
        .iter()
        .map(|&r| {
            let policy = MergePolicy { repeats: r, ..MergePolicy::default() };
            evaluate_policy(&t.test, &t.params, "random", &policy, &[500]).unwrap().ar[0]
        })
        .collect();
    let monotone = sweep.windows(2).all(|w| w[1] >= w[0] - 0.01);
    report(
        "randomization direction",
        sweep[3] >= greedy && monotone,
        format!("AR@500 greedy {greedy:.4}, random k=5 repeats 1/2/4/8: {sweep:.4?} (x8 >= greedy, non-decreasing within 0.01)"),
    );
}

// ---------------------------------------------------------------------------
// Metric arithmetic

#[test]
fn metric_arithmetic() {
    let gt = vec![vec![BBox::new(0, 0, 4, 1)]];
    let props = vec![vec![BBox::new(0, 0, 3, 1)]];
    let iou_075 = iou_box(&props[0][0], &gt[0][0]).unwrap();
    let ar = average_recall(&props, &gt, 1).unwrap();
    let third = iou_box(&BBox::new(0, 0, 10, 10), &BBox::new(5, 0, 15, 10)).unwrap();
    report(
        "metric arithmetic",
        iou_075 == 0.75 && ar == 0.6 && third == 50.0 / 150.0,
        format!("IoU 0.75 single object -> AR {ar} (0.6); (0,0,10,10) vs (5,0,15,10) -> IoU {third} (1/3)"),
    );
}

// ---------------------------------------------------------------------------
// Determinism

#[test]
fn determinism() {
    let cfg = RunConfig {
        train: TrainConfig { epochs: 2, ..TrainConfig::default() },
        ..RunConfig::default()
    };
    let scenes = generate_corpus(&cfg.scene, 0, 6).unwrap();
    let run = || {
        let examples = training_examples(&scenes, &cfg).unwrap();
        let params = train(&examples, &cfg.train).unwrap().params;
        let segs = eval_images(&scenes[..2], &cfg).unwrap();
        let csv: String = segs
            .iter()
            .map(|img| proposals_csv(&proposals_from_segmentations(&img.segs, &params, &cfg.policy, 200).unwrap()))
            .collect();
        (encode_model(&params), csv)
    };
    let (model_a, csv_a) = run();
    let (model_b, csv_b) = run();
    report(
        "determinism",
        model_a == model_b && csv_a == csv_b,
        format!(
            "train reruns byte-identical: {} ({} bytes); propose reruns byte-identical: {} ({} bytes)",
            model_a == model_b,
            model_a.len(),
            csv_a == csv_b,
            csv_a.len()
        ),
    );
}
