//! Bottom-up merging machinery: a forest of live roots over the region
//! adjacency graph, and a ranked set of scored candidate merges that is
//! kept in sync as roots are merged.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use crate::error::{contract, Result};
use crate::nnet::Vector;
use crate::overseg::RegionGraph;
use crate::rnnmodel::{MergeNode, MergeTree, ModelParams};

/// A partially built merge tree plus adjacency between its current roots.
#[derive(Clone, Debug)]
pub struct Forest {
    pub tree: MergeTree,
    adjacency: Vec<BTreeSet<usize>>,
    alive: Vec<bool>,
    live: usize,
}

impl Forest {
    pub fn new(params: &ModelParams, graph: &RegionGraph, features: &[Vector]) -> Result<Self> {
        let tree = MergeTree::with_leaves(params, graph, features)?;
        let mut adjacency = vec![BTreeSet::new(); graph.len()];
        for &(a, b) in &graph.edges {
            adjacency[a as usize].insert(b as usize);
            adjacency[b as usize].insert(a as usize);
        }
        Ok(Forest { tree, alive: vec![true; graph.len()], live: graph.len(), adjacency })
    }

    pub fn live_count(&self) -> usize {
        self.live
    }

    pub fn is_root(&self, id: usize) -> bool {
        self.alive.get(id).copied().unwrap_or(false)
    }

    pub fn neighbors(&self, id: usize) -> &BTreeSet<usize> {
        &self.adjacency[id]
    }

    /// Every adjacent pair of live roots as `(lower, higher)`, ascending.
    pub fn adjacent_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for (a, nbrs) in self.adjacency.iter().enumerate() {
            if self.alive[a] {
                pairs.extend(nbrs.range(a + 1..).map(|&b| (a, b)));
            }
        }
        pairs
    }

    /// Inserts `node` (evaluated from two adjacent roots) as a new root.
    pub fn merge(&mut self, node: MergeNode) -> Result<usize> {
        let (a, b) = match node.children {
            Some(pair) => pair,
            None => return contract("merge expects an internal node"),
        };
        if !self.is_root(a) || !self.is_root(b) || !self.adjacency[a].contains(&b) {
            return contract(format!("nodes {a} and {b} are not adjacent roots"));
        }
        let id = self.tree.push(node);
        let mut nbrs: BTreeSet<usize> = &self.adjacency[a] | &self.adjacency[b];
        nbrs.remove(&a);
        nbrs.remove(&b);
        for &n in &nbrs {
            self.adjacency[n].remove(&a);
            self.adjacency[n].remove(&b);
            self.adjacency[n].insert(id);
        }
        self.adjacency[a].clear();
        self.adjacency[b].clear();
        self.adjacency.push(nbrs);
        self.alive[a] = false;
        self.alive[b] = false;
        self.alive.push(true);
        self.live -= 1;
        Ok(id)
    }

    pub fn into_tree(self) -> MergeTree {
        self.tree
    }
}

/// Decides whether and how strongly a pair of adjacent roots should merge.
pub trait PairScorer {
    /// Ranking key and evaluated parent for the pair, or `None` when the
    /// pair is not allowed to merge.
    fn score(&mut self, tree: &MergeTree, a: usize, b: usize) -> Result<Option<(f64, MergeNode)>>;

    /// Called after `a` and `b` were merged into `parent`.
    fn merged(&mut self, _tree: &MergeTree, _a: usize, _b: usize, _parent: usize) {}
}

/// Plain model scoring: key is the merge score.
pub struct ModelScorer<'a> {
    pub params: &'a ModelParams,
}

impl PairScorer for ModelScorer<'_> {
    fn score(&mut self, tree: &MergeTree, a: usize, b: usize) -> Result<Option<(f64, MergeNode)>> {
        let node = tree.evaluate_merge(self.params, a, b)?;
        Ok(Some((node.merge_score, node)))
    }
}

#[derive(Clone, Copy, Debug)]
struct Rank {
    key: f64,
    pair: (usize, usize),
}

// Higher key first, then the smaller pair.
impl Ord for Rank {
    fn cmp(&self, other: &Self) -> Ordering {
        other.key.total_cmp(&self.key).then(self.pair.cmp(&other.pair))
    }
}

impl PartialOrd for Rank {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Rank {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Rank {}

/// Forest plus the live candidate set. Each allowed adjacent root pair has
/// exactly one entry; entries touching merged roots are dropped and pairs
/// with the new root are scored after every merge.
pub struct Merger<S> {
    forest: Forest,
    scorer: S,
    ranked: BTreeSet<Rank>,
    candidates: HashMap<(usize, usize), (f64, MergeNode)>,
}

impl<S: PairScorer> Merger<S> {
    pub fn new(forest: Forest, mut scorer: S) -> Result<Self> {
        let mut ranked = BTreeSet::new();
        let mut candidates = HashMap::new();
        for pair in forest.adjacent_pairs() {
            if let Some((key, node)) = scorer.score(&forest.tree, pair.0, pair.1)? {
                ranked.insert(Rank { key, pair });
                candidates.insert(pair, (key, node));
            }
        }
        Ok(Merger { forest, scorer, ranked, candidates })
    }

    pub fn forest(&self) -> &Forest {
        &self.forest
    }

    pub fn scorer(&self) -> &S {
        &self.scorer
    }

    pub fn has_candidates(&self) -> bool {
        !self.ranked.is_empty()
    }

    /// Up to `width` best candidates as `(key, pair)`, best first.
    pub fn top(&self, width: usize) -> Vec<(f64, (usize, usize))> {
        self.ranked.iter().take(width).map(|r| (r.key, r.pair)).collect()
    }

    /// Pairs currently holding a score, ascending.
    pub fn live_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<_> = self.candidates.keys().copied().collect();
        pairs.sort_unstable();
        pairs
    }

    pub fn candidate_key(&self, pair: (usize, usize)) -> Option<f64> {
        self.candidates.get(&pair).map(|c| c.0)
    }

    /// Merges a candidate pair and rescores the new root against its
    /// neighbours. Returns the new node id.
    pub fn merge(&mut self, pair: (usize, usize)) -> Result<usize> {
        let (key, node) = match self.candidates.remove(&pair) {
            Some(c) => c,
            None => return contract(format!("pair {pair:?} is not a live candidate")),
        };
        self.ranked.remove(&Rank { key, pair });
        let (a, b) = pair;
        for &child in &[a, b] {
            for &n in self.forest.neighbors(child) {
                let stale = (child.min(n), child.max(n));
                if let Some((key, _)) = self.candidates.remove(&stale) {
                    self.ranked.remove(&Rank { key, pair: stale });
                }
            }
        }
        let id = self.forest.merge(node)?;
        self.scorer.merged(&self.forest.tree, a, b, id);
        let nbrs: Vec<usize> = self.forest.neighbors(id).iter().copied().collect();
        for n in nbrs {
            if let Some((key, node)) = self.scorer.score(&self.forest.tree, n, id)? {
                self.ranked.insert(Rank { key, pair: (n, id) });
                self.candidates.insert((n, id), (key, node));
            }
        }
        Ok(id)
    }

    /// Repeatedly merges the candidate chosen by `choose` among the top
    /// `width` until no candidate is left.
    pub fn run(&mut self, width: usize, mut choose: impl FnMut(&[(f64, (usize, usize))]) -> usize) -> Result<()> {
        while self.has_candidates() {
            let top = self.top(width.max(1));
            let pick = choose(&top);
            self.merge(top[pick].1)?;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (Forest, S) {
        (self.forest, self.scorer)
    }
}
