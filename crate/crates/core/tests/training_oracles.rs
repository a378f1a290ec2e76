mod common;

use std::collections::{BTreeSet, HashSet};

use rand::Rng;
use rnnprop::imagecore::{GroundTruth, LabelMask};
use rnnprop::inference::greedy_merge;
use rnnprop::nnet::{Matrix, Vector};
use rnnprop::overseg::{build_region_graph, RegionGraph, Segmentation};
use rnnprop::rng::rng_from;
use rnnprop::pipeline::{generate_corpus, training_examples, RunConfig};
use rnnprop::rnnmodel::{encode_model, init_params, Dims, MergeTree, ModelParams};
use rnnprop::training::{
    example_loss, example_loss_and_grad, greedy_augmented_tree, greedy_correct_tree, label_regions, margin_delta,
    margin_delta_of_merges, merge_ok, merging_loss_and_grad, sgd_step, train, InstanceLabeling, LabelCounts,
    OptimizerState, TrainConfig,
};

use common::{all_merge_sequences, brute_delta, random_connected_graph, toy_problem};

#[test]
fn three_leaf_trees_match_brute_force() {
    // g1=0, g2=1 green, b1=2 blue, all pairwise adjacent.
    let edges = [(0, 1), (0, 2), (1, 2)];
    let instances = [0, 0, 1];
    let lab = InstanceLabeling::from_instances(instances.to_vec());
    let seqs = all_merge_sequences(3, &edges);
    assert_eq!(seqs.len(), 3);
    for merges in &seqs {
        assert_eq!(margin_delta_of_merges(merges, &lab), brute_delta(3, merges, &instances));
    }
    assert_eq!(margin_delta_of_merges(&[(0, 2), (1, 3)], &lab), 2);
    assert_eq!(margin_delta_of_merges(&[(1, 2), (0, 3)], &lab), 2);
    assert_eq!(margin_delta_of_merges(&[(0, 1), (2, 3)], &lab), 0);
}

#[test]
fn fig4_merge_rules() {
    let lab = InstanceLabeling::from_instances(vec![0, 0, 1]);
    let leaf = |r: usize| LabelCounts::leaf(lab.region_instance[r]);
    assert!(merge_ok(&leaf(0), &leaf(1), &lab));
    let green = LabelCounts::merged(&leaf(0), &leaf(1));
    assert!(merge_ok(&green, &leaf(2), &lab));
    assert!(!merge_ok(&leaf(0), &leaf(2), &lab));
}

#[test]
fn correct_merge_always_exists() {
    let mut states = 0usize;
    for seed in 0..40u64 {
        let n = 2 + (seed as usize % 7);
        let edges = random_connected_graph(n, 0.25, seed + 500);
        let mut rng = rng_from(seed, 501);
        let classes: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let instances = common::instances_from_classes(&classes, &edges);
        let lab = InstanceLabeling::from_instances(instances.clone());
        let mut adj = vec![0u64; n];
        for &(a, b) in &edges {
            adj[a as usize] |= 1 << b;
            adj[b as usize] |= 1 << a;
        }
        let counts_of = |set: u64| {
            (0..n)
                .filter(|&r| set >> r & 1 == 1)
                .map(|r| LabelCounts::leaf(instances[r]))
                .reduce(|a, b| LabelCounts::merged(&a, &b))
                .unwrap()
        };
        // Depth-first over every forest reachable through merge_ok merges.
        let mut seen: HashSet<Vec<u64>> = HashSet::new();
        let mut stack = vec![(0..n).map(|r| 1u64 << r).collect::<Vec<u64>>()];
        while let Some(forest) = stack.pop() {
            let mut key = forest.clone();
            key.sort_unstable();
            if !seen.insert(key) {
                continue;
            }
            states += 1;
            if forest.len() == 1 {
                continue;
            }
            let mut found = false;
            for i in 0..forest.len() {
                for j in i + 1..forest.len() {
                    let touching = (0..n).any(|r| forest[i] >> r & 1 == 1 && adj[r] & forest[j] != 0);
                    if touching && merge_ok(&counts_of(forest[i]), &counts_of(forest[j]), &lab) {
                        found = true;
                        let mut next: Vec<u64> =
                            forest.iter().enumerate().filter(|&(k, _)| k != i && k != j).map(|(_, &s)| s).collect();
                        next.push(forest[i] | forest[j]);
                        stack.push(next);
                    }
                }
            }
            assert!(found, "seed {seed}: stuck forest {forest:?}");
        }
    }
    assert!(states > 100);
}

fn sum_model() -> ModelParams {
    // Leaf semantic relu(v), parent = relu(first + second), score = value.
    let mut p = ModelParams::zeros(Dims { feature: 1, semantic: 1 });
    p.w_s = Matrix { rows: 1, cols: 1, data: vec![1.0] };
    p.w_c = Matrix { rows: 1, cols: 2, data: vec![1.0, 1.0] };
    p.w_m = Matrix { rows: 1, cols: 1, data: vec![1.0] };
    p
}

#[test]
fn large_kappa_prefers_violations() {
    // Triangle g1=0, g2=1, b1=2; raw pair scores (0,1)=6, (0,2)=4, (1,2)=4.
    let graph = RegionGraph::from_edges(3, &[(0, 1), (0, 2), (1, 2)]);
    let feats: Vec<Vector> = [3.0, 3.0, 1.0].iter().map(|&v| Vector(vec![v])).collect();
    let lab = InstanceLabeling::from_instances(vec![0, 0, 1]);
    let p = sum_model();
    let plain = greedy_augmented_tree(&graph, &feats, &p, &lab, 0.0).unwrap();
    assert_eq!(plain.tree.merges()[0], (0, 1));
    assert_eq!(plain.delta, 0);
    let aug = greedy_augmented_tree(&graph, &feats, &p, &lab, 5.0).unwrap();
    assert_eq!(aug.tree.merges()[0], (0, 2));
    assert_eq!(aug.delta, 2);
    assert_eq!(aug.augmented_score, aug.tree.score() + 10.0);
    // A violating pair that already scores highest stays chosen.
    let feats: Vec<Vector> = [1.0, 1.0, 5.0].iter().map(|&v| Vector(vec![v])).collect();
    for kappa in [0.0, 10.0] {
        let t = greedy_augmented_tree(&graph, &feats, &p, &lab, kappa).unwrap();
        assert_eq!(t.tree.merges()[0], (0, 2));
    }
    let cor = greedy_correct_tree(&graph, &feats, &p, &lab).unwrap();
    assert_eq!(cor.merges(), vec![(0, 1), (2, 3)]);
}

#[test]
fn kappa_zero_and_single_instance_reduce_to_greedy() {
    for seed in 0..25u64 {
        let toy = toy_problem(2 + seed as usize % 8, 4, 3, seed);
        let ex = &toy.example;
        let params = init_params(Dims { feature: 4, semantic: 6 }, seed).unwrap();
        let plain = greedy_merge(&ex.graph, &ex.features, &params).unwrap();
        let aug = greedy_augmented_tree(&ex.graph, &ex.features, &params, &ex.labeling, 0.0).unwrap();
        assert_eq!(aug.tree, plain);
        let one = InstanceLabeling::from_instances(vec![0; ex.graph.len()]);
        assert_eq!(greedy_correct_tree(&ex.graph, &ex.features, &params, &one).unwrap(), plain);
    }
}

#[test]
fn greedy_choice_invariant_to_score_scale() {
    for seed in 0..20u64 {
        let toy = toy_problem(3 + seed as usize % 6, 4, 2, seed + 40);
        let ex = &toy.example;
        let params = init_params(Dims { feature: 4, semantic: 5 }, seed).unwrap();
        let mut scaled = params.clone();
        scaled.w_m.data.iter_mut().for_each(|w| *w *= 3.5);
        let a = greedy_augmented_tree(&ex.graph, &ex.features, &params, &ex.labeling, 0.0).unwrap();
        let b = greedy_augmented_tree(&ex.graph, &ex.features, &scaled, &ex.labeling, 0.0).unwrap();
        assert_eq!(a.tree.merges(), b.tree.merges());
    }
}

#[test]
fn identical_trees_give_zero_merging_gradient() {
    let mut hits = 0;
    for seed in 0..60u64 {
        let toy = toy_problem(3 + seed as usize % 5, 4, 2, seed + 900);
        let ex = &toy.example;
        let params = init_params(Dims { feature: 4, semantic: 3 }, seed).unwrap();
        let aug = greedy_augmented_tree(&ex.graph, &ex.features, &params, &ex.labeling, 0.1).unwrap();
        let cor = greedy_correct_tree(&ex.graph, &ex.features, &params, &ex.labeling).unwrap();
        let mut g = params.grad_store();
        let loss = merging_loss_and_grad(ex, &params, 0.1, &mut g).unwrap();
        assert!(loss >= 0.0);
        if aug.tree.structure() == cor.structure() {
            hits += 1;
            assert_eq!(loss, 0.0);
            assert_eq!(g.max_abs(), 0.0);
        }
    }
    assert!(hits >= 5, "only {hits} coinciding trees");
}

#[test]
fn clamped_hinge_and_exact_hinge_are_nonnegative() {
    let kappa = 0.5;
    for seed in 0..20u64 {
        let n = 3 + seed as usize % 4;
        let toy = toy_problem(n, 4, 2, seed + 70);
        let ex = &toy.example;
        let params = init_params(Dims { feature: 4, semantic: 3 }, seed).unwrap();
        let mut g = params.grad_store();
        assert!(merging_loss_and_grad(ex, &params, kappa, &mut g).unwrap() >= 0.0);
        let mut best_all = f64::NEG_INFINITY;
        let mut best_correct = f64::NEG_INFINITY;
        for merges in all_merge_sequences(n, &toy.edges) {
            let tree = MergeTree::from_merges(&params, &toy.graph, &ex.features, &merges).unwrap();
            let d = margin_delta(&tree, &ex.labeling);
            best_all = best_all.max(tree.score() + kappa * d as f64);
            if d == 0 {
                best_correct = best_correct.max(tree.score());
            }
        }
        assert!(best_all - best_correct >= 0.0);
    }
}

#[test]
fn small_sgd_step_does_not_increase_loss() {
    let cfg = TrainConfig { momentum: 0.0, weight_decay: 0.0, ..TrainConfig::default() };
    let mut checked = 0;
    for seed in 0..10u64 {
        let toy = toy_problem(3 + seed as usize % 4, 6, 2, seed + 300);
        let ex = &toy.example;
        let mut params = init_params(Dims { feature: 6, semantic: 4 }, seed).unwrap();
        let before = example_loss(ex, &params, &cfg).unwrap();
        let mut g = params.grad_store();
        example_loss_and_grad(ex, &params, &cfg, &mut g).unwrap();
        let mut state = OptimizerState::new(&params);
        sgd_step(&mut params, &g, &mut state, 1e-3, &cfg, 0).unwrap();
        let after = example_loss(ex, &params, &cfg).unwrap();
        let total = |l: rnnprop::training::ExampleLoss| l.merging + cfg.lambda * l.objectness;
        assert!(total(after) <= total(before) + 1e-9, "seed {seed}: {before:?} -> {after:?}");
        checked += 1;
    }
    assert_eq!(checked, 10);
}

#[test]
fn zero_epochs_and_reproducibility() {
    let toy = toy_problem(5, 6, 2, 1);
    let data = vec![toy.example.clone(), toy_problem(4, 6, 2, 2).example];
    let cfg = TrainConfig { epochs: 0, semantic_dim: 4, ..TrainConfig::default() };
    let out = train(&data, &cfg).unwrap();
    assert_eq!(out.params, init_params(Dims { feature: 6, semantic: 4 }, cfg.seed).unwrap());
    assert!(out.log.is_empty());
    let cfg = TrainConfig { epochs: 3, ..cfg };
    let a = train(&data, &cfg).unwrap();
    let b = train(&data, &cfg).unwrap();
    assert_eq!(encode_model(&a.params), encode_model(&b.params));
    assert_eq!(a.log, b.log);
    assert!(train(&[], &cfg).is_err());
}

#[test]
fn training_reduces_loss_on_small_corpus() {
    let cfg = RunConfig {
        train: TrainConfig { epochs: 30, ..TrainConfig::default() },
        ..RunConfig::default()
    };
    let scenes = generate_corpus(&cfg.scene, 0, 20).unwrap();
    let examples = training_examples(&scenes, &cfg).unwrap();
    let log = train(&examples, &cfg.train).unwrap().log;
    assert_eq!(log.len(), 30);
    assert!(log[29].mean_total_loss < log[0].mean_total_loss, "{:?} vs {:?}", log[0], log[29]);
}

#[test]
fn sixty_percent_object_region_is_object() {
    let seg = Segmentation::from_labels(5, 1, &[0; 5]).unwrap();
    let graph = build_region_graph(&seg);
    let gt = GroundTruth::from_mask(LabelMask::new(5, 1, vec![1, 1, 1, 0, 0]).unwrap());
    let lab = label_regions(&seg, &graph, &gt).unwrap();
    assert_eq!(lab.region_class, vec![1]);
}

#[test]
fn instances_are_connected_on_real_scenes() {
    let cfg = RunConfig::default();
    let scenes = generate_corpus(&cfg.scene, 0, 5).unwrap();
    for ex in training_examples(&scenes, &cfg).unwrap() {
        let adj = ex.graph.neighbors();
        for l in 0..ex.labeling.instance_count() as u32 {
            let members: BTreeSet<usize> = (0..ex.graph.len()).filter(|&r| ex.labeling.region_instance[r] == l).collect();
            let start = *members.iter().next().unwrap();
            let mut seen = BTreeSet::from([start]);
            let mut stack = vec![start];
            while let Some(r) = stack.pop() {
                for &nb in &adj[r] {
                    let nb = nb as usize;
                    if members.contains(&nb) && seen.insert(nb) {
                        stack.push(nb);
                    }
                }
            }
            assert_eq!(seen, members);
            assert_eq!(members.len(), ex.labeling.instance_size[l as usize] as usize);
        }
        let cor = greedy_correct_tree(&ex.graph, &ex.features, &init_params(Dims { feature: 64, semantic: 8 }, 3).unwrap(), &ex.labeling).unwrap();
        assert_eq!(margin_delta(&cor, &ex.labeling), 0);
        assert_eq!(cor.internal_count(), ex.graph.len() - 1);
    }
}
