//! Proposal generation by greedy or randomized top-k merging.

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::forest::{Forest, Merger, ModelScorer};
use crate::imagecore::{BBox, Image};
use crate::overseg::{build_region_graph, fh_segment_with, RegionGraph, SegParams, Segmentation};
use crate::regionfeat::{extract_all, FeatureVector};
use crate::rng::{rng_from, Rng};
use crate::rnnmodel::{MergeTree, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergePolicy {
    /// Sampling width; 1 is plain greedy merging.
    pub k: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for MergePolicy {
    fn default() -> Self {
        MergePolicy { k: 5, repeats: 8, seed: 42 }
    }
}

impl MergePolicy {
    pub fn greedy() -> Self {
        MergePolicy { k: 1, repeats: 1, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.repeats == 0 {
            return contract("merge policy needs k >= 1 and repeats >= 1");
        }
        Ok(())
    }
}

/// Reference greedy merging: rescans every adjacent root pair each step and
/// merges the highest score, ties to the smaller pair.
pub fn greedy_merge(graph: &RegionGraph, features: &[FeatureVector], params: &ModelParams) -> Result<MergeTree> {
    let mut forest = Forest::new(params, graph, features)?;
    loop {
        let mut best = None;
        for (a, b) in forest.adjacent_pairs() {
            let node = forest.tree.evaluate_merge(params, a, b)?;
            match &best {
                Some((score, _)) if node.merge_score <= *score => {}
                _ => best = Some((node.merge_score, node)),
            }
        }
        match best {
            Some((_, node)) => {
                forest.merge(node)?;
            }
            None => return Ok(forest.into_tree()),
        }
    }
}

/// Picks one pair among the `k` best (ties to the smaller pair) with
/// probability proportional to `exp(score)`. Uses exactly one draw.
pub fn top_k_sample(scores: &[(f64, (usize, usize))], k: usize, rng: &mut Rng) -> Result<(usize, usize)> {
    if scores.is_empty() || k == 0 {
        return contract("top-k sampling needs at least one candidate and k >= 1");
    }
    let mut top = scores.to_vec();
    top.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    top.truncate(k);
    Ok(top[sample_index(&top, rng)].1)
}

// Assumes `top` is sorted best first.
fn sample_index(top: &[(f64, (usize, usize))], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let max = top[0].0;
    let weights: Vec<f64> = top.iter().map(|(s, _)| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u * total < acc {
            return i;
        }
    }
    top.len() - 1
}

/// Algorithm: score all adjacent pairs, then repeatedly sample among the
/// top `k`, merge, drop scores touching the children and score the new
/// root against its neighbours. Seeded by `(policy.seed, repeat)`.
pub fn randomized_merge(
    graph: &RegionGraph,
    features: &[FeatureVector],
    params: &ModelParams,
    policy: &MergePolicy,
    repeat: usize,
) -> Result<MergeTree> {
    policy.validate()?;
    let mut rng = rng_from(policy.seed, repeat as u64);
    let mut merger = Merger::new(Forest::new(params, graph, features)?, ModelScorer { params })?;
    merger.run(policy.k, |top| sample_index(top, &mut rng))?;
    Ok(merger.into_parts().0.into_tree())
}

/// One over-segmentation of an image with its regions described.
#[derive(Clone, Debug)]
pub struct SegmentedImage {
    pub params: SegParams,
    pub seg: Segmentation,
    pub graph: RegionGraph,
    pub features: Vec<FeatureVector>,
}

pub fn segment_image(image: &Image, configs: &[SegParams], feature_dim: usize) -> Result<Vec<SegmentedImage>> {
    configs
        .iter()
        .map(|p| {
            let seg = fh_segment_with(image, p)?;
            let graph = build_region_graph(&seg);
            let features = extract_all(image, &graph, feature_dim)?;
            Ok(SegmentedImage { params: *p, seg, graph, features })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    /// Index into the segmentations the proposal came from.
    pub seg_index: usize,
    pub seg_k: f64,
    pub repeat: usize,
    pub node_id: usize,
    /// Initial regions forming the proposal's mask.
    pub regions: Vec<u32>,
}

impl Proposal {
    /// Binary mask (255 inside) over the source segmentation.
    pub fn mask(&self, seg: &Segmentation) -> Vec<u8> {
        let mut inside = vec![false; seg.region_count];
        for &r in &self.regions {
            inside[r as usize] = true;
        }
        seg.region_of.iter().map(|&r| if inside[r as usize] { 255 } else { 0 }).collect()
    }
}

/// Every node of every tree, deduplicated by box (max objectness kept,
/// earliest on ties), sorted by objectness, then larger area, then
/// provenance, and truncated to `n`.
pub fn proposals_from_segmentations(
    segs: &[SegmentedImage],
    params: &ModelParams,
    policy: &MergePolicy,
    n: usize,
) -> Result<Vec<Proposal>> {
    policy.validate()?;
    let mut trees = Vec::new();
    for (si, s) in segs.iter().enumerate() {
        for repeat in 0..policy.repeats {
            trees.push((si, repeat, randomized_merge(&s.graph, &s.features, params, policy, repeat)?));
        }
    }
    let mut by_box: HashMap<BBox, usize> = HashMap::new();
    // (objectness, bbox, tree index, node id), in provenance order.
    let mut cands: Vec<(f64, BBox, usize, usize)> = Vec::new();
    for (ti, (_, _, tree)) in trees.iter().enumerate() {
        for node in &tree.nodes {
            match by_box.get(&node.bbox) {
                Some(&i) if cands[i].0 >= node.objectness => {}
                Some(&i) => cands[i] = (node.objectness, node.bbox, ti, node.id),
                None => {
                    by_box.insert(node.bbox, cands.len());
                    cands.push((node.objectness, node.bbox, ti, node.id));
                }
            }
        }
    }
    cands.sort_by(|x, y| {
        y.0.total_cmp(&x.0).then(y.1.area().cmp(&x.1.area())).then((x.2, x.3).cmp(&(y.2, y.3)))
    });
    cands.truncate(n);
    Ok(cands
        .into_iter()
        .map(|(objectness, bbox, ti, node_id)| {
            let (seg_index, repeat, tree) = &trees[ti];
            Proposal {
                bbox,
                objectness,
                seg_index: *seg_index,
                seg_k: segs[*seg_index].params.k,
                repeat: *repeat,
                node_id,
                regions: tree.leaves_of(node_id),
            }
        })
        .collect())
}

pub fn generate_proposals(
    image: &Image,
    params: &ModelParams,
    seg_configs: &[SegParams],
    policy: &MergePolicy,
    n: usize,
) -> Result<Vec<Proposal>> {
    params.validate()?;
    let segs = segment_image(image, seg_configs, params.dims.feature)?;
    proposals_from_segmentations(&segs, params, policy, n)
}

/// CSV dump: `rank,x0,y0,x1,y1,objectness,seg_k,repeat,node_id`, rank from 1.
pub fn proposals_csv(proposals: &[Proposal]) -> String {
    let mut out = String::from("rank,x0,y0,x1,y1,objectness,seg_k,repeat,node_id\n");
    for (i, p) in proposals.iter().enumerate() {
        let b = p.bbox;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            i + 1,
            b.x0,
            b.y0,
            b.x1,
            b.y1,
            p.objectness,
            p.seg_k,
            p.repeat,
            p.node_id
        ));
    }
    out
}
