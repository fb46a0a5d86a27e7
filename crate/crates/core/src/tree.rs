//! Binary-tree-indexed covariate processes.
//!
//! A depth-`T` tree stores one d-vector per node in heap order (root at
//! index 1, children of node `i` at `2i` and `2i+1`). A uniform random sign
//! path through the tree generates covariates that are deterministic
//! functions of past signs; the left child is taken on sign −1, the right
//! on +1.

use crate::gram::{pinv, quad, Matrix, Vector};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exhaustive path enumeration is limited to this depth.
pub const MAX_ENUM_DEPTH: usize = 20;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("depth {0} outside supported range")]
    BadDepth(usize),
    #[error("node list has length {got}, expected {expected}")]
    BadNodeCount { expected: usize, got: usize },
    #[error("node {0} has wrong dimension or non-finite entries")]
    BadNode(usize),
    #[error("path enumeration limited to depth {MAX_ENUM_DEPTH}, got {0}")]
    TooDeep(usize),
    #[error("unsupported indexing scheme {0:?} (only \"heap\")")]
    BadIndexing(String),
}

#[derive(Debug, Clone)]
pub struct DyadicTree {
    depth: usize,
    dim: usize,
    /// Heap order, `nodes[0]` is the root (heap index 1).
    nodes: Vec<Vector>,
}

/// Serialized form: nodes concatenated node-major into one flat array.
#[derive(Debug, Serialize, Deserialize)]
struct TreeJson {
    depth: usize,
    dim: usize,
    indexing: String,
    nodes: Vec<f64>,
}

impl Serialize for DyadicTree {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        let mut flat = Vec::with_capacity(self.nodes.len() * self.dim);
        for n in &self.nodes {
            flat.extend(n.iter().cloned());
        }
        TreeJson {
            depth: self.depth,
            dim: self.dim,
            indexing: "heap".to_string(),
            nodes: flat,
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for DyadicTree {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let raw = TreeJson::deserialize(de)?;
        if raw.indexing != "heap" {
            return Err(serde::de::Error::custom(TreeError::BadIndexing(
                raw.indexing,
            )));
        }
        let count = (1usize << raw.depth) - 1;
        if raw.nodes.len() != count * raw.dim {
            return Err(serde::de::Error::custom(TreeError::BadNodeCount {
                expected: count * raw.dim,
                got: raw.nodes.len(),
            }));
        }
        let nodes = raw
            .nodes
            .chunks(raw.dim)
            .map(Vector::from_row_slice)
            .collect();
        DyadicTree::new(raw.depth, raw.dim, nodes).map_err(serde::de::Error::custom)
    }
}

impl DyadicTree {
    pub fn new(depth: usize, dim: usize, nodes: Vec<Vector>) -> Result<Self, TreeError> {
        if depth == 0 || depth > 30 {
            return Err(TreeError::BadDepth(depth));
        }
        let expected = (1usize << depth) - 1;
        if nodes.len() != expected {
            return Err(TreeError::BadNodeCount {
                expected,
                got: nodes.len(),
            });
        }
        for (i, n) in nodes.iter().enumerate() {
            if n.len() != dim || !n.iter().all(|e| e.is_finite()) {
                return Err(TreeError::BadNode(i));
            }
        }
        Ok(Self { depth, dim, nodes })
    }

    /// Tree whose every node equals `v`.
    pub fn constant(depth: usize, v: Vector) -> Result<Self, TreeError> {
        let count = (1usize << depth) - 1;
        let dim = v.len();
        Self::new(depth, dim, vec![v; count])
    }

    /// Nodes drawn i.i.d. standard normal per coordinate, each node then
    /// multiplied by `10^u` with `u ~ U(-scale_decades, scale_decades)`.
    pub fn random<R: Rng + ?Sized>(
        depth: usize,
        dim: usize,
        scale_decades: f64,
        rng: &mut R,
    ) -> Result<Self, TreeError> {
        let count = (1usize << depth) - 1;
        let mut nodes = Vec::with_capacity(count);
        for _ in 0..count {
            let scale = 10f64.powf(rng.random_range(-scale_decades..=scale_decades));
            let node = Vector::from_fn(dim, |_, _| {
                let g: f64 = rng.sample(rand_distr::StandardNormal);
                g * scale
            });
            nodes.push(node);
        }
        Self::new(depth, dim, nodes)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Node at 1-based heap index.
    pub fn node(&self, heap_idx: usize) -> &Vector {
        &self.nodes[heap_idx - 1]
    }

    pub fn node_mut(&mut self, heap_idx: usize) -> &mut Vector {
        &mut self.nodes[heap_idx - 1]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Heap index of the child reached from `idx` under `sign` (−1 left,
    /// +1 right).
    pub fn child(idx: usize, sign: i8) -> usize {
        2 * idx + usize::from(sign > 0)
    }

    pub fn max_node_norm(&self) -> f64 {
        self.nodes.iter().map(|n| n.norm()).fold(0.0, f64::max)
    }

    /// Same tree divided by its maximum node norm, so every node lies in the
    /// unit ball. Self-normalized path statistics are unchanged.
    pub fn rescaled_to_unit(&self) -> DyadicTree {
        let m = self.max_node_norm();
        if m == 0.0 {
            return self.clone();
        }
        let nodes = self.nodes.iter().map(|n| n / m).collect();
        DyadicTree {
            depth: self.depth,
            dim: self.dim,
            nodes,
        }
    }

    /// One uniform sign path: `x_1` is the root, `x_{t+1}` the node selected
    /// by the realized prefix, signs i.i.d. uniform ±1.
    pub fn sample_path(&self, rng: &mut dyn RngCore) -> Vec<(Vector, i8)> {
        let mut out = Vec::with_capacity(self.depth);
        let mut idx = 1usize;
        for _ in 0..self.depth {
            let sign: i8 = if rng.random::<bool>() { 1 } else { -1 };
            out.push((self.node(idx).clone(), sign));
            idx = Self::child(idx, sign);
        }
        out
    }

    /// All `2^T` sign sequences with their covariate paths. Guarded by
    /// [`MAX_ENUM_DEPTH`]; prefer [`DyadicTree::fold_paths`] for bulk work.
    pub fn enumerate_paths(&self) -> Result<Vec<(Vec<i8>, Vec<Vector>)>, TreeError> {
        if self.depth > MAX_ENUM_DEPTH {
            return Err(TreeError::TooDeep(self.depth));
        }
        let mut out = Vec::with_capacity(1usize << self.depth);
        for mask in 0u32..(1u32 << self.depth) {
            let mut signs = Vec::with_capacity(self.depth);
            let mut xs = Vec::with_capacity(self.depth);
            let mut idx = 1usize;
            for level in 0..self.depth {
                let sign: i8 = if (mask >> level) & 1 == 1 { 1 } else { -1 };
                signs.push(sign);
                xs.push(self.node(idx).clone());
                idx = Self::child(idx, sign);
            }
            out.push((signs, xs));
        }
        Ok(out)
    }

    /// Depth-first walk over all `2^T` paths, calling `f(S_T, V_T)` at each
    /// leaf. Prefix sums are shared across paths.
    pub fn fold_paths<F: FnMut(&Vector, &Matrix)>(&self, f: &mut F) -> Result<(), TreeError> {
        if self.depth > MAX_ENUM_DEPTH {
            return Err(TreeError::TooDeep(self.depth));
        }
        let s = Vector::zeros(self.dim);
        let v = Matrix::zeros(self.dim, self.dim);
        self.fold_rec(1, &s, &v, f);
        Ok(())
    }

    fn fold_rec<F: FnMut(&Vector, &Matrix)>(&self, idx: usize, s: &Vector, v: &Matrix, f: &mut F) {
        let x = self.node(idx);
        let v2 = v + x * x.transpose();
        for sign in [-1i8, 1] {
            let s2 = if sign > 0 { s + x } else { s - x };
            if 2 * idx > self.nodes.len() {
                f(&s2, &v2);
            } else {
                self.fold_rec(Self::child(idx, sign), &s2, &v2, f);
            }
        }
    }

    /// Exact `E[R_T]` over the uniform sign measure, with the convention
    /// `R_T = 0` when `V_T = 0`.
    pub fn expected_selfnorm(&self, tol: f64) -> Result<f64, TreeError> {
        let mut total = 0.0f64;
        self.fold_paths(&mut |s, v| total += selfnorm_from_sv(s, v, tol))?;
        Ok(total / (1u64 << self.depth) as f64)
    }
}

/// `R = Sᵀ V† S` from raw accumulators. Fast closed forms for d ≤ 2, the
/// eigendecomposition pseudoinverse otherwise. `R = 0` when `V = 0`.
pub fn selfnorm_from_sv(s: &Vector, v: &Matrix, tol: f64) -> f64 {
    match s.len() {
        1 => {
            let vv = v[(0, 0)];
            if vv > 0.0 {
                s[0] * s[0] / vv
            } else {
                0.0
            }
        }
        2 => {
            let (a, b, c) = (v[(0, 0)], v[(0, 1)], v[(1, 1)]);
            if a == 0.0 && b == 0.0 && c == 0.0 {
                return 0.0;
            }
            let tr = a + c;
            let disc = ((a - c) * (a - c) + 4.0 * b * b).sqrt();
            let l1 = 0.5 * (tr + disc);
            let l2 = 0.5 * (tr - disc);
            let cutoff = tol * l1.max(0.0);
            let mut r = 0.0;
            for lam in [l1, l2] {
                if lam > cutoff {
                    // Eigenvector for lam: (b, lam−a) unless degenerate.
                    let (e0, e1) = if b.abs() > 1e-300 * (a.abs() + c.abs()).max(1.0) {
                        (b, lam - a)
                    } else if (lam - a).abs() <= (lam - c).abs() {
                        (1.0, 0.0)
                    } else {
                        (0.0, 1.0)
                    };
                    let n = (e0 * e0 + e1 * e1).sqrt();
                    let proj = (s[0] * e0 + s[1] * e1) / n;
                    r += proj * proj / lam;
                }
            }
            r.max(0.0)
        }
        _ => match pinv(v, tol) {
            Ok(p) => quad(&p, s).max(0.0),
            Err(_) => 0.0,
        },
    }
}
