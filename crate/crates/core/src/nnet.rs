//! Dense vectors and matrices with the handful of forward/backward
//! primitives the recursive network needs. All arithmetic is `f64`.

use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn concat(a: &Vector, b: &Vector) -> Vector {
        let mut v = Vec::with_capacity(a.len() + b.len());
        v.extend_from_slice(&a.0);
        v.extend_from_slice(&b.0);
        Vector(v)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return contract("ragged matrix rows");
        }
        Ok(Matrix { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `y = W x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.cols {
            return contract(format!("matvec: {}x{} matrix with vector of length {}", self.rows, self.cols, x.len()));
        }
        Ok(Vector((0..self.rows).map(|r| dot(self.row(r), x)).collect()))
    }

    /// `y = Wᵀ g`.
    pub fn matvec_t(&self, g: &[f64]) -> Result<Vector> {
        if g.len() != self.rows {
            return contract(format!("matvec_t: {}x{} matrix with vector of length {}", self.rows, self.cols, g.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * gr;
            }
        }
        Ok(Vector(out))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y = W x + b`.
pub fn affine(w: &Matrix, x: &Vector, b: &Vector) -> Result<Vector> {
    if w.rows != b.len() {
        return contract(format!("affine: {} rows but bias of length {}", w.rows, b.len()));
    }
    let mut y = w.matvec(&x.0)?;
    for (v, bias) in y.0.iter_mut().zip(&b.0) {
        *v += bias;
    }
    Ok(y)
}

pub fn relu(x: &Vector) -> Vector {
    Vector(x.0.iter().map(|&v| v.max(0.0)).collect())
}

/// Two-way softmax with max shift.
pub fn softmax2(z: &Vector) -> Result<Vector> {
    if z.len() != 2 {
        return contract(format!("softmax2 expects 2 logits, got {}", z.len()));
    }
    let m = z.0[0].max(z.0[1]);
    let e0 = (z.0[0] - m).exp();
    let e1 = (z.0[1] - m).exp();
    let s = e0 + e1;
    Ok(Vector(vec![e0 / s, e1 / s]))
}

/// Backward pass of `y = W x + b`: accumulates `g xᵀ` into `grad_w` and `g`
/// into `grad_b` (when present) and returns `Wᵀ g`.
pub fn affine_backward(
    w: &Matrix,
    x: &Vector,
    upstream: &[f64],
    grad_w: &mut [f64],
    grad_b: Option<&mut [f64]>,
) -> Result<Vector> {
    if upstream.len() != w.rows || x.len() != w.cols || grad_w.len() != w.data.len() {
        return contract("affine_backward shape mismatch");
    }
    for (r, &g) in upstream.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &mut grad_w[r * w.cols..(r + 1) * w.cols];
        for (gw, &xv) in row.iter_mut().zip(&x.0) {
            *gw += g * xv;
        }
    }
    if let Some(gb) = grad_b {
        if gb.len() != upstream.len() {
            return contract("affine_backward bias shape mismatch");
        }
        for (b, g) in gb.iter_mut().zip(upstream) {
            *b += g;
        }
    }
    w.matvec_t(upstream)
}

/// Gates `upstream` by the pre-activation sign; the derivative at 0 is 0.
pub fn relu_backward(pre_activation: &Vector, upstream: &[f64]) -> Result<Vector> {
    if pre_activation.len() != upstream.len() {
        return contract("relu_backward shape mismatch");
    }
    Ok(Vector(
        pre_activation
            .0
            .iter()
            .zip(upstream)
            .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
            .collect(),
    ))
}

/// Gradient of `-ln p_label` with respect to the logits: `p - onehot(label)`.
pub fn softmax2_ce_backward(probs: &Vector, label: usize) -> Result<Vector> {
    if probs.len() != 2 || label > 1 {
        return contract("softmax2_ce_backward expects two probabilities and a binary label");
    }
    let mut g = probs.0.clone();
    g[label] -= 1.0;
    Ok(Vector(g))
}

/// One named gradient buffer, shape-matched to a parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradTensor {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Gradient buffers for every parameter tensor plus a count of how many
/// contributions were accumulated since the last reset.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore {
    pub tensors: Vec<GradTensor>,
    pub accumulated: usize,
}

impl GradStore {
    pub fn new(shapes: &[(&'static str, usize, usize)]) -> Self {
        GradStore {
            tensors: shapes
                .iter()
                .map(|&(name, rows, cols)| GradTensor { name, rows, cols, data: vec![0.0; rows * cols] })
                .collect(),
            accumulated: 0,
        }
    }

    pub fn zero(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        self.accumulated = 0;
    }

    pub fn same_shape(&self, other: &GradStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.rows == b.rows && a.cols == b.cols)
    }

    /// `self += other`, tensor by tensor in order.
    pub fn add_assign(&mut self, other: &GradStore) -> Result<()> {
        if !self.same_shape(other) {
            return contract("gradient stores differ in shape");
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        self.accumulated += other.accumulated;
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Mutable access to two distinct tensors at once.
    pub fn pair_mut(&mut self, i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
        assert!(i < j, "pair_mut expects ascending indices");
        let (lo, hi) = self.tensors.split_at_mut(j);
        (&mut lo[i].data, &mut hi[0].data)
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors.iter().find(|t| t.data.iter().any(|v| !v.is_finite())).map(|t| t.name)
    }

    /// Euclidean norm over all tensors.
    pub fn norm(&self) -> f64 {
        self.tensors.iter().flat_map(|t| t.data.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().flat_map(|t| t.data.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}
