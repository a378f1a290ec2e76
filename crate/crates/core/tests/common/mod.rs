//! Brute-force oracles and toy-problem builders shared by the integration
//! tests.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use rnnprop::imagecore::BBox;
use rnnprop::nnet::Vector;
use rnnprop::overseg::RegionGraph;
use rnnprop::rng::rng_from;
use rnnprop::training::{InstanceLabeling, TrainExample};

/// Random connected graph on `n` nodes: a random spanning tree plus extra
/// edges with probability `p_extra`.
pub fn random_connected_graph(n: usize, p_extra: f64, seed: u64) -> Vec<(u32, u32)> {
    let mut rng = rng_from(seed, 77);
    let mut edges = BTreeSet::new();
    for v in 1..n {
        let u = rng.gen_range(0..v);
        edges.insert((u as u32, v as u32));
    }
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen::<f64>() < p_extra {
                edges.insert((a as u32, b as u32));
            }
        }
    }
    edges.into_iter().collect()
}

/// Connected components of same-class nodes, numbered by smallest member.
pub fn instances_from_classes(classes: &[u32], edges: &[(u32, u32)]) -> Vec<u32> {
    let n = classes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut Vec<usize>, x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for &(a, b) in edges {
        let (a, b) = (a as usize, b as usize);
        if classes[a] == classes[b] {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut label = vec![u32::MAX; n];
    let mut next = 0;
    for v in 0..n {
        let r = find(&mut parent, v);
        if label[r] == u32::MAX {
            label[r] = next;
            next += 1;
        }
        label[v] = label[r];
    }
    label
}

pub struct Toy {
    pub graph: RegionGraph,
    pub edges: Vec<(u32, u32)>,
    pub instances: Vec<u32>,
    pub example: TrainExample,
}

/// Labeled random graph with random features in [0, 1).
pub fn toy_problem(n: usize, feature_dim: usize, classes: u32, seed: u64) -> Toy {
    let edges = random_connected_graph(n, 0.35, seed);
    let mut rng = rng_from(seed, 78);
    let class: Vec<u32> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    let instances = instances_from_classes(&class, &edges);
    let graph = RegionGraph::from_edges(n, &edges);
    let features: Vec<Vector> = (0..n).map(|_| Vector((0..feature_dim).map(|_| rng.gen()).collect())).collect();
    // Regions sit at x = 0..n on one row; an instance's box spans its regions.
    let count = instances.iter().max().map_or(0, |m| m + 1);
    let gt_boxes = (0..count)
        .map(|l| {
            let xs: Vec<u32> = (0..n as u32).filter(|&r| instances[r as usize] == l).collect();
            BBox::new(xs[0], 0, xs[xs.len() - 1] + 1, 1)
        })
        .collect();
    let example = TrainExample {
        graph: graph.clone(),
        features,
        labeling: InstanceLabeling::from_instances(instances.clone()),
        gt_boxes,
    };
    Toy { graph, edges, instances, example }
}

/// Every adjacency-respecting merge sequence down to a single root. Node ids
/// follow creation order, so a sequence is a list of `(lower, higher)` ids.
pub fn all_merge_sequences(n: usize, edges: &[(u32, u32)]) -> Vec<Vec<(usize, usize)>> {
    fn rec(
        sets: &mut Vec<u64>,
        alive: &mut Vec<bool>,
        adj: &[u64],
        prefix: &mut Vec<(usize, usize)>,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        let live: Vec<usize> = (0..sets.len()).filter(|&i| alive[i]).collect();
        let touches = |a: u64, b: u64| (0..64).any(|r| a >> r & 1 == 1 && adj[r] & b != 0);
        let mut any = false;
        for (i, &a) in live.iter().enumerate() {
            for &b in &live[i + 1..] {
                if !touches(sets[a], sets[b]) {
                    continue;
                }
                any = true;
                let merged = sets[a] | sets[b];
                sets.push(merged);
                alive.push(true);
                alive[a] = false;
                alive[b] = false;
                prefix.push((a, b));
                rec(sets, alive, adj, prefix, out);
                prefix.pop();
                alive[a] = true;
                alive[b] = true;
                alive.pop();
                sets.pop();
            }
        }
        if !any {
            out.push(prefix.clone());
        }
    }
    let mut adj = vec![0u64; n];
    for &(a, b) in edges {
        adj[a as usize] |= 1 << b;
        adj[b as usize] |= 1 << a;
    }
    let mut out = Vec::new();
    rec(&mut (0..n).map(|i| 1u64 << i).collect(), &mut vec![true; n], &adj, &mut Vec::new(), &mut out);
    out
}

/// Incorrect-subtree count computed straight from leaf sets: a merge is bad
/// unless both sides are single-instance with the same instance, or each
/// side holds whole instances only; a node counts when any merge in its
/// subtree is bad.
pub fn brute_delta(n: usize, merges: &[(usize, usize)], instances: &[u32]) -> usize {
    let mut sets: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut children: Vec<Option<(usize, usize)>> = vec![None; n];
    for &(a, b) in merges {
        let mut s = sets[a].clone();
        s.extend(&sets[b]);
        sets.push(s);
        children.push(Some((a, b)));
    }
    let labels_of = |s: &[usize]| -> BTreeSet<u32> { s.iter().map(|&r| instances[r]).collect() };
    let whole = |s: &[usize]| {
        labels_of(s).iter().all(|&l| {
            let total = instances.iter().filter(|&&x| x == l).count();
            let inside = s.iter().filter(|&&r| instances[r] == l).count();
            total == inside
        })
    };
    let bad_merge = |d: usize| -> bool {
        let (a, b) = children[d].unwrap();
        let (la, lb) = (labels_of(&sets[a]), labels_of(&sets[b]));
        let same_pure = la.len() == 1 && la == lb;
        !(same_pure || (whole(&sets[a]) && whole(&sets[b])))
    };
    fn subtree(d: usize, children: &[Option<(usize, usize)>], out: &mut Vec<usize>) {
        if let Some((a, b)) = children[d] {
            out.push(d);
            subtree(a, children, out);
            subtree(b, children, out);
        }
    }
    (n..sets.len())
        .filter(|&d| {
            let mut nodes = Vec::new();
            subtree(d, &children, &mut nodes);
            nodes.into_iter().any(bad_merge)
        })
        .count()
}
