//! Structured max-margin training of the merge network.
//!
//! A merge is *correct* when both children are pure pieces of the same
//! instance, or when both children are label-complete (every instance they
//! touch lies entirely inside one of them). A node is incorrect when its
//! own merge is not correct or when either child is incorrect. The margin
//! loss of a tree counts its incorrect internal nodes.

use std::collections::VecDeque;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{contract, io_err, Error, Result};
use crate::evalkit::iou;
use crate::forest::{Forest, Merger, PairScorer};
use crate::imagecore::{BBox, GroundTruth};
use crate::nnet::GradStore;
use crate::overseg::{RegionGraph, Segmentation};
use crate::regionfeat::FeatureVector;
use crate::rng::rng_from;
use crate::rnnmodel::{backward_tree, init_params, Dims, MergeNode, MergeTree, ModelParams};

/// Ground-truth bookkeeping for the initial regions of one segmentation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceLabeling {
    /// Majority ground-truth label per region (0 is background).
    pub region_class: Vec<u32>,
    /// Connected-component instance label per region.
    pub region_instance: Vec<u32>,
    /// Ground-truth class of each instance label.
    pub instance_class: Vec<u32>,
    /// Number of regions carrying each instance label.
    pub instance_size: Vec<u32>,
}

impl InstanceLabeling {
    /// Labeling where every region's instance is given directly.
    pub fn from_instances(region_instance: Vec<u32>) -> Self {
        let count = region_instance.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let mut instance_size = vec![0; count];
        for &l in &region_instance {
            instance_size[l as usize] += 1;
        }
        InstanceLabeling {
            region_class: region_instance.clone(),
            instance_class: (0..count as u32).collect(),
            region_instance,
            instance_size,
        }
    }

    pub fn region_count(&self) -> usize {
        self.region_instance.len()
    }

    pub fn instance_count(&self) -> usize {
        self.instance_size.len()
    }
}

/// Majority-pixel class per region (ties go to background, then to the
/// smaller label), then connected components of same-class regions.
pub fn label_regions(seg: &Segmentation, graph: &RegionGraph, gt: &GroundTruth) -> Result<InstanceLabeling> {
    if seg.width != gt.mask.width() || seg.height != gt.mask.height() {
        return contract("segmentation and ground truth differ in size");
    }
    let labels = gt.mask.labels();
    let classes = gt.mask.max_label() as usize + 1;
    let mut region_class = Vec::with_capacity(graph.len());
    for node in &graph.nodes {
        let mut votes = vec![0u32; classes];
        for &p in &node.pixels {
            votes[labels[p as usize] as usize] += 1;
        }
        let best = votes.iter().copied().max().unwrap_or(0);
        // First index with the maximum count: background wins ties.
        region_class.push(votes.iter().position(|&v| v == best).unwrap_or(0) as u32);
    }

    let adj = graph.neighbors();
    const UNSET: u32 = u32::MAX;
    let mut region_instance = vec![UNSET; graph.len()];
    let mut instance_class = Vec::new();
    let mut instance_size = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..graph.len() {
        if region_instance[start] != UNSET {
            continue;
        }
        let label = instance_class.len() as u32;
        let class = region_class[start];
        region_instance[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(r) = queue.pop_front() {
            size += 1;
            for &n in &adj[r] {
                let n = n as usize;
                if region_instance[n] == UNSET && region_class[n] == class {
                    region_instance[n] = label;
                    queue.push_back(n);
                }
            }
        }
        instance_class.push(class);
        instance_size.push(size);
    }
    Ok(InstanceLabeling { region_class, region_instance, instance_class, instance_size })
}

/// Per-instance region counts inside one node, sorted by instance label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelCounts(pub Vec<(u32, u32)>);

impl LabelCounts {
    pub fn leaf(instance: u32) -> Self {
        LabelCounts(vec![(instance, 1)])
    }

    pub fn merged(a: &LabelCounts, b: &LabelCounts) -> Self {
        let mut out = Vec::with_capacity(a.0.len() + b.0.len());
        let (mut i, mut j) = (0, 0);
        while i < a.0.len() || j < b.0.len() {
            match (a.0.get(i), b.0.get(j)) {
                (Some(&(la, ca)), Some(&(lb, cb))) if la == lb => {
                    out.push((la, ca + cb));
                    i += 1;
                    j += 1;
                }
                (Some(&x), Some(&y)) if x.0 < y.0 => {
                    out.push(x);
                    i += 1;
                }
                (Some(_), Some(&y)) => {
                    out.push(y);
                    j += 1;
                }
                (Some(&x), None) => {
                    out.push(x);
                    i += 1;
                }
                (None, Some(&y)) => {
                    out.push(y);
                    j += 1;
                }
                (None, None) => unreachable!(),
            }
        }
        LabelCounts(out)
    }

    pub fn is_pure(&self) -> bool {
        self.0.len() == 1
    }

    /// Every instance touched by this node lies entirely inside it.
    pub fn is_complete(&self, labeling: &InstanceLabeling) -> bool {
        self.0.iter().all(|&(l, c)| labeling.instance_size[l as usize] == c)
    }
}

/// Whether merging two forest roots keeps the tree correct.
pub fn merge_ok(a: &LabelCounts, b: &LabelCounts, labeling: &InstanceLabeling) -> bool {
    let same_pure = a.is_pure() && b.is_pure() && a.0[0].0 == b.0[0].0;
    same_pure || (a.is_complete(labeling) && b.is_complete(labeling))
}

/// Label counts and inherited incorrectness per node id.
#[derive(Clone, Debug)]
pub struct CorrectnessTracker<'a> {
    labeling: &'a InstanceLabeling,
    pub counts: Vec<LabelCounts>,
    pub incorrect: Vec<bool>,
}

impl<'a> CorrectnessTracker<'a> {
    pub fn new(labeling: &'a InstanceLabeling) -> Self {
        CorrectnessTracker {
            labeling,
            counts: labeling.region_instance.iter().map(|&l| LabelCounts::leaf(l)).collect(),
            incorrect: vec![false; labeling.region_count()],
        }
    }

    /// Whether the parent of `a` and `b` would be incorrect.
    pub fn violates(&self, a: usize, b: usize) -> bool {
        self.incorrect[a] || self.incorrect[b] || !merge_ok(&self.counts[a], &self.counts[b], self.labeling)
    }

    pub fn record(&mut self, a: usize, b: usize, parent: usize) {
        debug_assert_eq!(parent, self.counts.len());
        let bad = self.violates(a, b);
        self.counts.push(LabelCounts::merged(&self.counts[a], &self.counts[b]));
        self.incorrect.push(bad);
    }
}

/// Number of incorrect internal nodes of `tree`.
pub fn margin_delta(tree: &MergeTree, labeling: &InstanceLabeling) -> usize {
    margin_delta_of_merges(&tree.merges(), labeling)
}

/// [`margin_delta`] for a bare merge list in creation order.
pub fn margin_delta_of_merges(merges: &[(usize, usize)], labeling: &InstanceLabeling) -> usize {
    let mut track = CorrectnessTracker::new(labeling);
    for (i, &(a, b)) in merges.iter().enumerate() {
        track.record(a, b, labeling.region_count() + i);
    }
    track.incorrect.iter().filter(|&&bad| bad).count()
}

struct AugmentedScorer<'a> {
    params: &'a ModelParams,
    kappa: f64,
    track: CorrectnessTracker<'a>,
}

impl PairScorer for AugmentedScorer<'_> {
    fn score(&mut self, tree: &MergeTree, a: usize, b: usize) -> Result<Option<(f64, MergeNode)>> {
        let node = tree.evaluate_merge(self.params, a, b)?;
        let viol = if self.track.violates(a, b) { 1.0 } else { 0.0 };
        Ok(Some((node.merge_score + self.kappa * viol, node)))
    }

    fn merged(&mut self, _: &MergeTree, a: usize, b: usize, parent: usize) {
        self.track.record(a, b, parent);
    }
}

struct CorrectOnlyScorer<'a> {
    params: &'a ModelParams,
    track: CorrectnessTracker<'a>,
}

impl PairScorer for CorrectOnlyScorer<'_> {
    fn score(&mut self, tree: &MergeTree, a: usize, b: usize) -> Result<Option<(f64, MergeNode)>> {
        if self.track.violates(a, b) {
            return Ok(None);
        }
        let node = tree.evaluate_merge(self.params, a, b)?;
        Ok(Some((node.merge_score, node)))
    }

    fn merged(&mut self, _: &MergeTree, a: usize, b: usize, parent: usize) {
        self.track.record(a, b, parent);
    }
}

/// Result of loss-augmented greedy construction.
#[derive(Clone, Debug)]
pub struct AugmentedTree {
    pub tree: MergeTree,
    /// Number of incorrect internal nodes.
    pub delta: usize,
    /// `tree_score(tree) + κ·delta`.
    pub augmented_score: f64,
}

fn check_inputs(graph: &RegionGraph, features: &[FeatureVector], labeling: &InstanceLabeling) -> Result<()> {
    if graph.len() != features.len() || graph.len() != labeling.region_count() {
        return contract(format!(
            "{} regions, {} features, {} labels",
            graph.len(),
            features.len(),
            labeling.region_count()
        ));
    }
    Ok(())
}

/// Greedily merges the adjacent pair maximizing `score + κ·violation`.
pub fn greedy_augmented_tree(
    graph: &RegionGraph,
    features: &[FeatureVector],
    params: &ModelParams,
    labeling: &InstanceLabeling,
    kappa: f64,
) -> Result<AugmentedTree> {
    check_inputs(graph, features, labeling)?;
    let scorer = AugmentedScorer { params, kappa, track: CorrectnessTracker::new(labeling) };
    let mut merger = Merger::new(Forest::new(params, graph, features)?, scorer)?;
    merger.run(1, |_| 0)?;
    let (forest, scorer) = merger.into_parts();
    let delta = scorer.track.incorrect.iter().filter(|&&b| b).count();
    let tree = forest.into_tree();
    let augmented_score = tree.score() + kappa * delta as f64;
    Ok(AugmentedTree { tree, delta, augmented_score })
}

/// Greedily merges the highest-scoring pair among correct merges only.
pub fn greedy_correct_tree(
    graph: &RegionGraph,
    features: &[FeatureVector],
    params: &ModelParams,
    labeling: &InstanceLabeling,
) -> Result<MergeTree> {
    check_inputs(graph, features, labeling)?;
    let scorer = CorrectOnlyScorer { params, track: CorrectnessTracker::new(labeling) };
    let mut merger = Merger::new(Forest::new(params, graph, features)?, scorer)?;
    merger.run(1, |_| 0)?;
    let (forest, _) = merger.into_parts();
    if forest.live_count() > 1 && !forest.adjacent_pairs().is_empty() {
        return contract("no correct merge available among adjacent roots");
    }
    Ok(forest.into_tree())
}

/// Per-node objectness labels: max IoU > 0.5 is positive, < 0.2 negative,
/// anything in between is skipped. Without boxes every node is negative.
pub fn objectness_samples(tree: &MergeTree, gt_boxes: &[BBox]) -> Vec<(usize, usize)> {
    tree.nodes
        .iter()
        .filter_map(|node| {
            let best = gt_boxes.iter().map(|g| iou(&node.bbox, g)).fold(0.0, f64::max);
            if best > 0.5 {
                Some((node.id, 1))
            } else if best < 0.2 {
                Some((node.id, 0))
            } else {
                None
            }
        })
        .collect()
}

/// Summed cross-entropy over `samples` of `tree`, gradients into `grads`.
pub fn objectness_loss_and_grad(
    params: &ModelParams,
    features: &[FeatureVector],
    tree: &MergeTree,
    samples: &[(usize, usize)],
    grads: &mut GradStore,
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    backward_tree(params, features, tree, 0.0, samples, 1.0, grads)
}

/// One training item: a segmentation's regions with their descriptors,
/// labels and the image's ground-truth boxes.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub graph: RegionGraph,
    pub features: Vec<FeatureVector>,
    pub labeling: InstanceLabeling,
    pub gt_boxes: Vec<BBox>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ExampleLoss {
    pub merging: f64,
    pub objectness: f64,
}

/// Structured hinge `max(0, s(t̂) + κΔ(t̂) − s(t_correct))` and its gradient.
pub fn merging_loss_and_grad(
    example: &TrainExample,
    params: &ModelParams,
    kappa: f64,
    grads: &mut GradStore,
) -> Result<f64> {
    let (aug, correct) = both_trees(example, params, kappa)?;
    merging_from_trees(example, params, &aug, &correct, grads)
}

fn both_trees(example: &TrainExample, params: &ModelParams, kappa: f64) -> Result<(AugmentedTree, MergeTree)> {
    let aug = greedy_augmented_tree(&example.graph, &example.features, params, &example.labeling, kappa)?;
    let correct = greedy_correct_tree(&example.graph, &example.features, params, &example.labeling)?;
    Ok((aug, correct))
}

fn merging_from_trees(
    example: &TrainExample,
    params: &ModelParams,
    aug: &AugmentedTree,
    correct: &MergeTree,
    grads: &mut GradStore,
) -> Result<f64> {
    let loss = (aug.augmented_score - correct.score()).max(0.0);
    if loss > 0.0 {
        backward_tree(params, &example.features, &aug.tree, 1.0, &[], 0.0, grads)?;
        backward_tree(params, &example.features, correct, -1.0, &[], 0.0, grads)?;
    }
    Ok(loss)
}

/// `L_m + λ·L_o` for one example; objectness samples come from the nodes
/// of both greedy trees.
pub fn example_loss_and_grad(
    example: &TrainExample,
    params: &ModelParams,
    config: &TrainConfig,
    grads: &mut GradStore,
) -> Result<ExampleLoss> {
    let (aug, correct) = both_trees(example, params, config.kappa)?;
    let merging = merging_from_trees(example, params, &aug, &correct, grads)?;
    let mut objectness = 0.0;
    for tree in [&aug.tree, &correct] {
        let samples = objectness_samples(tree, &example.gt_boxes);
        if !samples.is_empty() {
            objectness += backward_tree(params, &example.features, tree, 0.0, &samples, config.lambda, grads)?;
        }
    }
    Ok(ExampleLoss { merging, objectness })
}

/// Loss only, no gradient.
pub fn example_loss(example: &TrainExample, params: &ModelParams, config: &TrainConfig) -> Result<ExampleLoss> {
    let mut scratch = params.grad_store();
    example_loss_and_grad(example, params, config, &mut scratch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Margin scale κ.
    pub kappa: f64,
    /// Objectness weight λ.
    pub lambda: f64,
    /// L2 weight decay η (not applied to biases).
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Multiply the learning rate by `lr_decay_factor` every this many
    /// epochs; 0 disables decay.
    pub lr_decay_epochs: usize,
    pub lr_decay_factor: f64,
    /// Rescale each batch gradient to at most this Euclidean norm; 0 disables.
    pub grad_clip: f64,
    pub semantic_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            kappa: 0.1,
            lambda: 1.0,
            weight_decay: 5e-4,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 2,
            epochs: 20,
            lr_decay_epochs: 10,
            lr_decay_factor: 0.1,
            grad_clip: 100.0,
            semantic_dim: 32,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.kappa, self.lambda, self.weight_decay, self.learning_rate, self.grad_clip];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return contract("kappa, lambda, weight_decay, learning_rate and grad_clip must be >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return contract("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.semantic_dim == 0 {
            return contract("batch_size and semantic_dim must be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_epochs {
            0 => self.learning_rate,
            n => self.learning_rate * self.lr_decay_factor.powi((epoch / n) as i32),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: GradStore,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState { velocity: params.grad_store(), step: 0 }
    }
}

/// Momentum SGD: `v ← μv − lr(g + ηθ)`, `θ ← θ + v`, no decay on biases.
/// A non-finite gradient aborts before anything is modified.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &GradStore,
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
    example: usize,
) -> Result<()> {
    let shapes_match = grads.tensors.len() == 8
        && grads.same_shape(&state.velocity)
        && params.tensors().iter().zip(&grads.tensors).all(|(p, g)| p.len() == g.data.len());
    if !shapes_match {
        return contract("gradient shapes do not match parameters");
    }
    if let Some(tensor) = grads.first_non_finite() {
        return Err(Error::NonFinite { example, tensor });
    }
    for (i, theta) in params.tensors_mut().into_iter().enumerate() {
        let decay = if ModelParams::is_bias(i) { 0.0 } else { config.weight_decay };
        let v = &mut state.velocity.tensors[i].data;
        for ((t, v), g) in theta.iter_mut().zip(v.iter_mut()).zip(&grads.tensors[i].data) {
            *v = config.momentum * *v - lr * (g + decay * *t);
            *t += *v;
        }
    }
    state.step += 1;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_merging_loss: f64,
    pub mean_objectness_loss: f64,
    pub mean_total_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

/// Model dimensions implied by a dataset and config.
pub fn dataset_dims(dataset: &[TrainExample], config: &TrainConfig) -> Result<Dims> {
    let feature = match dataset.iter().flat_map(|e| e.features.first()).next() {
        Some(v) => v.len(),
        None => return contract("training set has no regions"),
    };
    Ok(Dims { feature, semantic: config.semantic_dim })
}

/// Trains from `init_params(dims, config.seed)`.
pub fn train(dataset: &[TrainExample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dims = dataset_dims(dataset, config)?;
    train_from(init_params(dims, config.seed)?, dataset, config)
}

/// Minibatch momentum SGD with a per-epoch seeded shuffle. Batch gradients
/// are summed in example order.
pub fn train_from(mut params: ModelParams, dataset: &[TrainExample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return contract("empty training set");
    }
    params.validate()?;
    let mut state = OptimizerState::new(&params);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut batch_grads = params.grad_store();
    let mut example_grads = params.grad_store();

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng_from(config.seed, 1 + epoch as u64));
        let mut totals = ExampleLoss::default();
        for batch in order.chunks(config.batch_size) {
            batch_grads.zero();
            for &i in batch {
                example_grads.zero();
                let loss = example_loss_and_grad(&dataset[i], &params, config, &mut example_grads)?;
                if let Some(tensor) = example_grads.first_non_finite() {
                    return Err(Error::NonFinite { example: i, tensor });
                }
                batch_grads.add_assign(&example_grads)?;
                totals.merging += loss.merging;
                totals.objectness += loss.objectness;
            }
            if config.grad_clip > 0.0 {
                let norm = batch_grads.norm();
                if norm > config.grad_clip {
                    batch_grads.scale(config.grad_clip / norm);
                }
            }
            sgd_step(&mut params, &batch_grads, &mut state, lr, config, batch[0])?;
        }
        let n = dataset.len() as f64;
        log.push(EpochLog {
            epoch: epoch + 1,
            mean_merging_loss: totals.merging / n,
            mean_objectness_loss: totals.objectness / n,
            mean_total_loss: (totals.merging + config.lambda * totals.objectness) / n,
            lr,
        });
    }
    Ok(TrainOutcome { params, log })
}

pub fn write_train_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,mean_merging_loss,mean_objectness_loss,mean_total_loss,lr\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.mean_merging_loss, e.mean_objectness_loss, e.mean_total_loss, e.lr
        ));
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(out.as_bytes()).map_err(io_err(path))
}
