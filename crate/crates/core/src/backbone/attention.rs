//! KNN vector attention with relative-position encoding.
//!
//! For query `j` and neighbor `n`:
//! `delta = pos_mlp(p_j - p_n)`, `w = softmax_n(attn_mlp(q_j - k_n + delta))`
//! per channel, and `out_j = x_j + sum_n w ⊙ v_n`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{relu_backward, Linear, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub pos1: Linear,
    pub pos2: Linear,
    pub attn1: Linear,
    pub attn2: Linear,
}

/// Activations recorded for the backward pass. One row per (query, neighbor) edge.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Matrix,
    /// `offsets[j]..offsets[j + 1]` are the edges of query `j`.
    offsets: Vec<usize>,
    edge_neighbor: Vec<usize>,
    v: Matrix,
    rel: Matrix,
    pos_pre: Matrix,
    pos_hidden: Matrix,
    u: Matrix,
    attn_pre: Matrix,
    attn_hidden: Matrix,
    weights: Matrix,
}

impl AttentionCache {
    /// Attention weights of query `j`, one row per neighbor.
    pub fn weights_of(&self, j: usize) -> Vec<&[f64]> {
        (self.offsets[j]..self.offsets[j + 1])
            .map(|e| self.weights.row(e))
            .collect()
    }

    pub fn num_queries(&self) -> usize {
        self.offsets.len() - 1
    }
}

impl AttentionBlock {
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::init(dim, dim, rng),
            key: Linear::init(dim, dim, rng),
            value: Linear::init(dim, dim, rng),
            pos1: Linear::init(3, dim, rng),
            pos2: Linear::init(dim, dim, rng),
            attn1: Linear::init(dim, dim, rng),
            attn2: Linear::init(dim, dim, rng),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            query: Linear::zeros(dim, dim),
            key: Linear::zeros(dim, dim),
            value: Linear::zeros(dim, dim),
            pos1: Linear::zeros(3, dim),
            pos2: Linear::zeros(dim, dim),
            attn1: Linear::zeros(dim, dim),
            attn2: Linear::zeros(dim, dim),
        }
    }

    pub(crate) fn linears(&self) -> [(&'static str, &Linear); 7] {
        [
            ("query", &self.query),
            ("key", &self.key),
            ("value", &self.value),
            ("pos1", &self.pos1),
            ("pos2", &self.pos2),
            ("attn1", &self.attn1),
            ("attn2", &self.attn2),
        ]
    }

    pub(crate) fn linears_mut(&mut self) -> [(&'static str, &mut Linear); 7] {
        [
            ("query", &mut self.query),
            ("key", &mut self.key),
            ("value", &mut self.value),
            ("pos1", &mut self.pos1),
            ("pos2", &mut self.pos2),
            ("attn1", &mut self.attn1),
            ("attn2", &mut self.attn2),
        ]
    }

    /// `neighbors[j]` lists the neighbor rows of query `j` (itself included).
    pub fn forward(
        &self,
        x: &Matrix,
        positions: &[[f64; 3]],
        neighbors: &[Vec<usize>],
        record: bool,
    ) -> (Matrix, Option<AttentionCache>) {
        let dim = x.cols();
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);

        let num_edges: usize = neighbors.iter().map(Vec::len).sum();
        let mut cache = record.then(|| AttentionCache {
            x: x.clone(),
            offsets: Vec::with_capacity(neighbors.len() + 1),
            edge_neighbor: Vec::with_capacity(num_edges),
            v: v.clone(),
            rel: Matrix::zeros(num_edges, 3),
            pos_pre: Matrix::zeros(num_edges, dim),
            pos_hidden: Matrix::zeros(num_edges, dim),
            u: Matrix::zeros(num_edges, dim),
            attn_pre: Matrix::zeros(num_edges, dim),
            attn_hidden: Matrix::zeros(num_edges, dim),
            weights: Matrix::zeros(num_edges, dim),
        });

        let mut out = x.clone();
        let mut pos_pre = vec![0.0; dim];
        let mut pos_hidden = vec![0.0; dim];
        let mut delta = vec![0.0; dim];
        let mut u = vec![0.0; dim];
        let mut attn_pre = vec![0.0; dim];
        let mut attn_hidden = vec![0.0; dim];
        let mut logits: Vec<f64> = Vec::new();
        let mut edge = 0usize;

        for (j, nbrs) in neighbors.iter().enumerate() {
            if let Some(c) = cache.as_mut() {
                c.offsets.push(edge);
            }
            let kn = nbrs.len();
            logits.clear();
            logits.resize(kn * dim, 0.0);
            for (slot, &n) in nbrs.iter().enumerate() {
                let rel = [
                    positions[j][0] - positions[n][0],
                    positions[j][1] - positions[n][1],
                    positions[j][2] - positions[n][2],
                ];
                self.pos1.forward_row(&rel, &mut pos_pre);
                for (h, &p) in pos_hidden.iter_mut().zip(&pos_pre) {
                    *h = p.max(0.0);
                }
                self.pos2.forward_row(&pos_hidden, &mut delta);
                let (qj, kn_row) = (q.row(j), k.row(n));
                for c in 0..dim {
                    u[c] = qj[c] - kn_row[c] + delta[c];
                }
                self.attn1.forward_row(&u, &mut attn_pre);
                for (h, &p) in attn_hidden.iter_mut().zip(&attn_pre) {
                    *h = p.max(0.0);
                }
                self.attn2
                    .forward_row(&attn_hidden, &mut logits[slot * dim..(slot + 1) * dim]);

                if let Some(c) = cache.as_mut() {
                    let e = edge + slot;
                    c.edge_neighbor.push(n);
                    c.rel.row_mut(e).copy_from_slice(&rel);
                    c.pos_pre.row_mut(e).copy_from_slice(&pos_pre);
                    c.pos_hidden.row_mut(e).copy_from_slice(&pos_hidden);
                    c.u.row_mut(e).copy_from_slice(&u);
                    c.attn_pre.row_mut(e).copy_from_slice(&attn_pre);
                    c.attn_hidden.row_mut(e).copy_from_slice(&attn_hidden);
                }
            }

            // Channel-wise softmax over the neighbors, in place.
            for c in 0..dim {
                let max = (0..kn)
                    .map(|s| logits[s * dim + c])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in 0..kn {
                    let e = (logits[s * dim + c] - max).exp();
                    logits[s * dim + c] = e;
                    sum += e;
                }
                for s in 0..kn {
                    logits[s * dim + c] /= sum;
                }
            }

            let out_j = out.row_mut(j);
            for (slot, &n) in nbrs.iter().enumerate() {
                let w = &logits[slot * dim..(slot + 1) * dim];
                let vn = v.row(n);
                for c in 0..dim {
                    out_j[c] += w[c] * vn[c];
                }
            }
            if let Some(c) = cache.as_mut() {
                for slot in 0..kn {
                    c.weights
                        .row_mut(edge + slot)
                        .copy_from_slice(&logits[slot * dim..(slot + 1) * dim]);
                }
            }
            edge += kn;
        }
        if let Some(c) = cache.as_mut() {
            c.offsets.push(edge);
        }
        (out, cache)
    }

    /// Accumulates parameter gradients into `grad`, returns `dL/dx`.
    pub fn backward(&self, cache: &AttentionCache, d_out: &Matrix, grad: &mut AttentionBlock) -> Matrix {
        let dim = d_out.cols();
        let num_edges = cache.edge_neighbor.len();
        let rows = cache.x.rows();

        let mut dx = d_out.clone();
        let mut dq = Matrix::zeros(rows, dim);
        let mut dk = Matrix::zeros(rows, dim);
        let mut dv = Matrix::zeros(rows, dim);
        let mut d_logits = Matrix::zeros(num_edges, dim);

        for j in 0..rows {
            let (start, end) = (cache.offsets[j], cache.offsets[j + 1]);
            let g = d_out.row(j);
            // dL/dw for each edge, and the per-channel weighted mean for the softmax Jacobian.
            let mut mean = vec![0.0; dim];
            for e in start..end {
                let n = cache.edge_neighbor[e];
                let w = cache.weights.row(e);
                let vn = cache.v.row(n);
                let dvn = dv.row_mut(n);
                for c in 0..dim {
                    dvn[c] += g[c] * w[c];
                    mean[c] += w[c] * g[c] * vn[c];
                }
            }
            for e in start..end {
                let n = cache.edge_neighbor[e];
                let w = cache.weights.row(e);
                let vn = cache.v.row(n);
                let dl = d_logits.row_mut(e);
                for c in 0..dim {
                    dl[c] = w[c] * (g[c] * vn[c] - mean[c]);
                }
            }
        }

        let d_attn_hidden = self
            .attn2
            .backward(&cache.attn_hidden, &d_logits, &mut grad.attn2);
        let d_attn_pre = relu_backward(&cache.attn_pre, &d_attn_hidden);
        let du = self.attn1.backward(&cache.u, &d_attn_pre, &mut grad.attn1);

        for j in 0..rows {
            for e in cache.offsets[j]..cache.offsets[j + 1] {
                let n = cache.edge_neighbor[e];
                let due = du.row(e);
                for c in 0..dim {
                    dq.data_mut()[j * dim + c] += due[c];
                    dk.data_mut()[n * dim + c] -= due[c];
                }
            }
        }

        let d_pos_hidden = self.pos2.backward(&cache.pos_hidden, &du, &mut grad.pos2);
        let d_pos_pre = relu_backward(&cache.pos_pre, &d_pos_hidden);
        self.pos1.backward(&cache.rel, &d_pos_pre, &mut grad.pos1);

        dx.add_assign(&self.query.backward(&cache.x, &dq, &mut grad.query));
        dx.add_assign(&self.key.backward(&cache.x, &dk, &mut grad.key));
        dx.add_assign(&self.value.backward(&cache.x, &dv, &mut grad.value));
        dx
    }
}
