//! The recursive network: semantic mapper, feature combiner, merging scorer
//! and objectness scorer, evaluated over binary merge trees.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{contract, io_err, Error, Result};
use crate::imagecore::BBox;
use crate::nnet::{affine, affine_backward, relu, relu_backward, softmax2, softmax2_ce_backward, GradStore, Matrix, Vector};
use crate::overseg::RegionGraph;
use crate::regionfeat::FeatureVector;
use crate::rng::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Region descriptor length.
    #[serde(rename = "F")]
    pub feature: usize,
    /// Semantic vector length.
    #[serde(rename = "D")]
    pub semantic: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims { feature: crate::regionfeat::FEATURE_DIM, semantic: 32 }
    }
}

pub const W_S: usize = 0;
pub const B_S: usize = 1;
pub const W_C: usize = 2;
pub const B_C: usize = 3;
pub const W_M: usize = 4;
pub const W_O0: usize = 5;
pub const B_O0: usize = 6;
pub const W_O1: usize = 7;
pub const TENSOR_NAMES: [&str; 8] = ["W_s", "b_s", "W_c", "b_c", "W_m", "W_o0", "b_o0", "W_o1"];

/// All learnable weights. Biases are stored as vectors; the merging scorer
/// has none.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: Dims,
    pub w_s: Matrix,
    pub b_s: Vector,
    pub w_c: Matrix,
    pub b_c: Vector,
    pub w_m: Matrix,
    pub w_o0: Matrix,
    pub b_o0: Vector,
    pub w_o1: Matrix,
}

impl ModelParams {
    pub fn zeros(dims: Dims) -> Self {
        let (f, d) = (dims.feature, dims.semantic);
        ModelParams {
            dims,
            w_s: Matrix::zeros(d, f),
            b_s: Vector::zeros(d),
            w_c: Matrix::zeros(d, 2 * d),
            b_c: Vector::zeros(d),
            w_m: Matrix::zeros(1, d),
            w_o0: Matrix::zeros(d, d),
            b_o0: Vector::zeros(d),
            w_o1: Matrix::zeros(2, d),
        }
    }

    /// `(name, rows, cols)` per tensor in serialization order.
    pub fn shapes(&self) -> [(&'static str, usize, usize); 8] {
        let (f, d) = (self.dims.feature, self.dims.semantic);
        [
            (TENSOR_NAMES[W_S], d, f),
            (TENSOR_NAMES[B_S], d, 1),
            (TENSOR_NAMES[W_C], d, 2 * d),
            (TENSOR_NAMES[B_C], d, 1),
            (TENSOR_NAMES[W_M], 1, d),
            (TENSOR_NAMES[W_O0], d, d),
            (TENSOR_NAMES[B_O0], d, 1),
            (TENSOR_NAMES[W_O1], 2, d),
        ]
    }

    pub fn tensors(&self) -> [&[f64]; 8] {
        [
            &self.w_s.data,
            &self.b_s.0,
            &self.w_c.data,
            &self.b_c.0,
            &self.w_m.data,
            &self.w_o0.data,
            &self.b_o0.0,
            &self.w_o1.data,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.w_s.data,
            &mut self.b_s.0,
            &mut self.w_c.data,
            &mut self.b_c.0,
            &mut self.w_m.data,
            &mut self.w_o0.data,
            &mut self.b_o0.0,
            &mut self.w_o1.data,
        ]
    }

    pub fn is_bias(index: usize) -> bool {
        matches!(index, B_S | B_C | B_O0)
    }

    pub fn grad_store(&self) -> GradStore {
        GradStore::new(&self.shapes())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self
            .shapes()
            .iter()
            .zip(self.tensors())
            .all(|(&(_, r, c), t)| t.len() == r * c);
        if !ok || self.dims.feature == 0 || self.dims.semantic == 0 {
            return contract("parameter shapes inconsistent with dims");
        }
        if !self.is_finite() {
            return contract("non-finite parameter");
        }
        Ok(())
    }

    pub fn expect_dims(&self, expected: Dims) -> Result<()> {
        if self.dims == expected {
            return Ok(());
        }
        Err(crate::Error::DimMismatch {
            expected_f: expected.feature,
            expected_d: expected.semantic,
            found_f: self.dims.feature,
            found_d: self.dims.semantic,
        })
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(dims: Dims, seed: u64) -> Result<ModelParams> {
    if dims.feature == 0 || dims.semantic == 0 {
        return contract("model dims must be positive");
    }
    let mut params = ModelParams::zeros(dims);
    let mut rng = rng_from(seed, 0x1417);
    let shapes = params.shapes();
    for (i, tensor) in params.tensors_mut().into_iter().enumerate() {
        if ModelParams::is_bias(i) {
            continue;
        }
        let (_, rows, cols) = shapes[i];
        let a = (6.0 / (rows + cols) as f64).sqrt();
        for v in tensor.iter_mut() {
            *v = rng.gen_range(-a..=a);
        }
    }
    Ok(params)
}

fn check_len(v: &Vector, want: usize, what: &str) -> Result<()> {
    if v.len() != want {
        return contract(format!("{what}: expected length {want}, got {}", v.len()));
    }
    Ok(())
}

/// Pre-activation and output of the semantic mapper.
pub fn semantic_map_pre(params: &ModelParams, v: &FeatureVector) -> Result<(Vector, Vector)> {
    check_len(v, params.dims.feature, "semantic_map")?;
    let pre = affine(&params.w_s, v, &params.b_s)?;
    let x = relu(&pre);
    Ok((pre, x))
}

pub fn semantic_map(params: &ModelParams, v: &FeatureVector) -> Result<Vector> {
    Ok(semantic_map_pre(params, v)?.1)
}

pub fn combine_pre(params: &ModelParams, first: &Vector, second: &Vector) -> Result<(Vector, Vector)> {
    check_len(first, params.dims.semantic, "combine")?;
    check_len(second, params.dims.semantic, "combine")?;
    let pre = affine(&params.w_c, &Vector::concat(first, second), &params.b_c)?;
    let x = relu(&pre);
    Ok((pre, x))
}

/// Parent semantics from `[first, second]`.
pub fn combine(params: &ModelParams, first: &Vector, second: &Vector) -> Result<Vector> {
    Ok(combine_pre(params, first, second)?.1)
}

/// Linear merge confidence `W_m · x`.
pub fn merge_score(params: &ModelParams, x: &Vector) -> Result<f64> {
    check_len(x, params.dims.semantic, "merge_score")?;
    Ok(params.w_m.row(0).iter().zip(&x.0).map(|(w, v)| w * v).sum())
}

/// Hidden pre-activation, hidden output and `(p_neg, p_pos)`.
pub fn objectness_parts(params: &ModelParams, x: &Vector) -> Result<(Vector, Vector, Vector)> {
    check_len(x, params.dims.semantic, "objectness")?;
    let pre = affine(&params.w_o0, x, &params.b_o0)?;
    let hidden = relu(&pre);
    let probs = softmax2(&params.w_o1.matvec(&hidden.0)?)?;
    Ok((pre, hidden, probs))
}

pub fn objectness(params: &ModelParams, x: &Vector) -> Result<(f64, f64)> {
    let (_, _, p) = objectness_parts(params, x)?;
    Ok((p.0[0], p.0[1]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeNode {
    pub id: usize,
    /// Concatenation order `(first, second)`; `None` for leaves.
    pub children: Option<(usize, usize)>,
    pub semantic: Vector,
    pub pre_activation: Vector,
    pub pixel_count: usize,
    pub bbox: BBox,
    /// Zero for leaves.
    pub merge_score: f64,
    /// Positive-class probability.
    pub objectness: f64,
}

impl MergeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// Binary merge tree. Nodes `0..leaf_count` are the initial regions; each
/// internal node is appended when created, so children always precede
/// their parent.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeTree {
    pub nodes: Vec<MergeNode>,
    pub leaf_count: usize,
}

impl MergeTree {
    /// Leaves evaluated through the semantic mapper.
    pub fn with_leaves(params: &ModelParams, graph: &RegionGraph, features: &[FeatureVector]) -> Result<Self> {
        if features.len() != graph.len() {
            return contract(format!("{} features for {} regions", features.len(), graph.len()));
        }
        let nodes = graph
            .nodes
            .iter()
            .zip(features)
            .enumerate()
            .map(|(id, (region, v))| {
                let (pre, x) = semantic_map_pre(params, v)?;
                let (_, p_pos) = objectness(params, &x)?;
                Ok(MergeNode {
                    id,
                    children: None,
                    semantic: x,
                    pre_activation: pre,
                    pixel_count: region.pixel_count,
                    bbox: region.bbox,
                    merge_score: 0.0,
                    objectness: p_pos,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MergeTree { leaf_count: nodes.len(), nodes })
    }

    /// Evaluates the parent of two existing nodes without inserting it.
    /// The lower id goes first in the concatenation.
    pub fn evaluate_merge(&self, params: &ModelParams, a: usize, b: usize) -> Result<MergeNode> {
        if a == b || a >= self.nodes.len() || b >= self.nodes.len() {
            return contract(format!("cannot merge nodes {a} and {b}"));
        }
        let (first, second) = (a.min(b), a.max(b));
        let (l, r) = (&self.nodes[first], &self.nodes[second]);
        let (pre, x) = combine_pre(params, &l.semantic, &r.semantic)?;
        let score = merge_score(params, &x)?;
        let (_, p_pos) = objectness(params, &x)?;
        Ok(MergeNode {
            id: self.nodes.len(),
            children: Some((first, second)),
            semantic: x,
            pre_activation: pre,
            pixel_count: l.pixel_count + r.pixel_count,
            bbox: l.bbox.union(&r.bbox),
            merge_score: score,
            objectness: p_pos,
        })
    }

    /// Appends a node produced by [`evaluate_merge`](Self::evaluate_merge)
    /// on this tree and returns its id.
    pub fn push(&mut self, mut node: MergeNode) -> usize {
        node.id = self.nodes.len();
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    /// Replays a merge sequence from the leaves.
    pub fn from_merges(
        params: &ModelParams,
        graph: &RegionGraph,
        features: &[FeatureVector],
        merges: &[(usize, usize)],
    ) -> Result<Self> {
        let mut tree = MergeTree::with_leaves(params, graph, features)?;
        for &(a, b) in merges {
            let node = tree.evaluate_merge(params, a, b)?;
            tree.push(node);
        }
        Ok(tree)
    }

    pub fn internal_count(&self) -> usize {
        self.nodes.len() - self.leaf_count
    }

    /// The last node created; the root once the tree is complete.
    pub fn root(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Child pairs of the internal nodes in creation order.
    pub fn merges(&self) -> Vec<(usize, usize)> {
        self.nodes.iter().filter_map(|n| n.children).collect()
    }

    /// Initial regions under `id`, ascending.
    pub fn leaves_of(&self, id: usize) -> Vec<u32> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            match self.nodes[n].children {
                Some((a, b)) => {
                    stack.push(a);
                    stack.push(b);
                }
                None => out.push(n as u32),
            }
        }
        out.sort_unstable();
        out
    }

    /// Sum of the stored merge scores.
    pub fn score(&self) -> f64 {
        self.nodes.iter().filter(|n| !n.is_leaf()).map(|n| n.merge_score).sum()
    }

    /// Subtree leaf sets for every node, each as a sorted leaf list. Two
    /// trees with the same multiset of these are the same tree.
    pub fn structure(&self) -> Vec<Vec<u32>> {
        let mut sets: Vec<Vec<u32>> = (self.leaf_count..self.nodes.len()).map(|i| self.leaves_of(i)).collect();
        sets.sort();
        sets
    }
}

/// Sum of merge scores over the internal nodes of `tree`.
pub fn tree_score(tree: &MergeTree) -> f64 {
    tree.score()
}

/// Reverse pass through a built tree.
///
/// Each internal node's merge score is weighted by `score_coeff`; every
/// `(node, label)` in `samples` adds a cross-entropy term on that node's
/// objectness, weighted by `ce_weight`. Gradients accumulate into `grads`;
/// the unweighted summed cross-entropy is returned.
pub fn backward_tree(
    params: &ModelParams,
    features: &[FeatureVector],
    tree: &MergeTree,
    score_coeff: f64,
    samples: &[(usize, usize)],
    ce_weight: f64,
    grads: &mut GradStore,
) -> Result<f64> {
    let d = params.dims.semantic;
    let mut upstream: Vec<Vec<f64>> = vec![vec![0.0; d]; tree.nodes.len()];
    let mut ce = 0.0;

    for &(node, label) in samples {
        let x = &tree.nodes[node].semantic;
        let (pre, hidden, probs) = objectness_parts(params, x)?;
        ce -= probs.0[label].max(f64::MIN_POSITIVE).ln();
        if ce_weight == 0.0 {
            continue;
        }
        let mut dz = softmax2_ce_backward(&probs, label)?;
        dz.0.iter_mut().for_each(|g| *g *= ce_weight);
        let dh = affine_backward(&params.w_o1, &hidden, &dz.0, &mut grads.tensors[W_O1].data, None)?;
        let dpre = relu_backward(&pre, &dh.0)?;
        let (gw, gb) = grads.pair_mut(W_O0, B_O0);
        let dx = affine_backward(&params.w_o0, x, &dpre.0, gw, Some(gb))?;
        for (u, g) in upstream[node].iter_mut().zip(&dx.0) {
            *u += g;
        }
    }

    for id in (0..tree.nodes.len()).rev() {
        let node = &tree.nodes[id];
        match node.children {
            Some((first, second)) => {
                if score_coeff != 0.0 {
                    for (u, w) in upstream[id].iter_mut().zip(params.w_m.row(0)) {
                        *u += score_coeff * w;
                    }
                    for (g, x) in grads.tensors[W_M].data.iter_mut().zip(&node.semantic.0) {
                        *g += score_coeff * x;
                    }
                }
                let dpre = relu_backward(&node.pre_activation, &upstream[id])?;
                if dpre.0.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let input = Vector::concat(&tree.nodes[first].semantic, &tree.nodes[second].semantic);
                let (gw, gb) = grads.pair_mut(W_C, B_C);
                let dinput = affine_backward(&params.w_c, &input, &dpre.0, gw, Some(gb))?;
                for (u, g) in upstream[first].iter_mut().zip(&dinput.0[..d]) {
                    *u += g;
                }
                for (u, g) in upstream[second].iter_mut().zip(&dinput.0[d..]) {
                    *u += g;
                }
            }
            None => {
                let dpre = relu_backward(&node.pre_activation, &upstream[id])?;
                if dpre.0.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let (gw, gb) = grads.pair_mut(W_S, B_S);
                affine_backward(&params.w_s, &features[id], &dpre.0, gw, Some(gb))?;
            }
        }
    }
    grads.accumulated += 1;
    Ok(ce)
}

// ---------------------------------------------------------------------------
// Serialization: u64 LE header length, JSON header, then little-endian f64
// tensors in `TENSOR_NAMES` order.

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: u32,
    #[serde(rename = "F")]
    feature: usize,
    #[serde(rename = "D")]
    semantic: usize,
}

pub fn encode_model(params: &ModelParams) -> Vec<u8> {
    let header = serde_json::to_vec(&ModelHeader {
        format: 1,
        feature: params.dims.feature,
        semantic: params.dims.semantic,
    })
    .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelParams> {
    let bad = |m: &str| Error::ModelFormat(m.to_string());
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("missing header length"))?.try_into().unwrap();
    let len = u64::from_le_bytes(len_bytes) as usize;
    let header_bytes = bytes.get(8..8usize.saturating_add(len)).ok_or_else(|| bad("truncated header"))?;
    let header: ModelHeader =
        serde_json::from_slice(header_bytes).map_err(|e| Error::ModelFormat(format!("bad header: {e}")))?;
    if header.format != 1 {
        return Err(Error::ModelFormat(format!("unsupported format {}", header.format)));
    }
    if header.feature == 0 || header.semantic == 0 {
        return Err(bad("zero dims"));
    }
    let mut params = ModelParams::zeros(Dims { feature: header.feature, semantic: header.semantic });
    let mut payload = bytes[8 + len..].chunks_exact(8);
    let expected: usize = params.shapes().iter().map(|&(_, r, c)| r * c).sum();
    if payload.len() != expected || !payload.remainder().is_empty() {
        return Err(Error::ModelFormat(format!(
            "payload holds {} bytes, expected {}",
            bytes.len() - 8 - len,
            expected * 8
        )));
    }
    for tensor in params.tensors_mut() {
        for v in tensor.iter_mut() {
            *v = f64::from_le_bytes(payload.next().unwrap().try_into().unwrap());
        }
    }
    if !params.is_finite() {
        return Err(bad("non-finite weight"));
    }
    Ok(params)
}

pub fn save_model(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode_model(params)).map_err(io_err(path))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_model(&bytes)
}
