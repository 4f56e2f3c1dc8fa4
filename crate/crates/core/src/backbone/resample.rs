//! Grid pooling (downsampling) and inverse-distance interpolation (upsampling).

use std::collections::BTreeMap;

use crate::cloud::{voxel_key, VoxelKey};
use crate::error::Result;
use crate::spatial::{NeighborIndex, SearchStrategy};
use crate::tensor::Matrix;

/// Regularizer for coincident points in inverse-distance weights.
pub const IDW_EPSILON: f64 = 1e-8;

/// Input rows merged into each pooled row. Groups are ordered by voxel key,
/// members by input row.
#[derive(Debug, Clone)]
pub struct Pooling {
    pub groups: Vec<Vec<usize>>,
    pub input_rows: usize,
}

/// Mean-pool positions and features over occupied voxels of size `voxel_size`.
pub fn grid_pool(
    positions: &[[f64; 3]],
    features: &Matrix,
    voxel_size: f64,
) -> (Vec<[f64; 3]>, Matrix, Pooling) {
    let mut cells: BTreeMap<VoxelKey, Vec<usize>> = BTreeMap::new();
    for (i, p) in positions.iter().enumerate() {
        cells
            .entry(voxel_key(p, voxel_size, &[0.0; 3]))
            .or_default()
            .push(i);
    }
    let groups: Vec<Vec<usize>> = cells.into_values().collect();
    let dim = features.cols();
    let mut out_pos = Vec::with_capacity(groups.len());
    let mut out_feat = Matrix::zeros(groups.len(), dim);
    for (g, members) in groups.iter().enumerate() {
        let inv = 1.0 / members.len() as f64;
        let mut p = [0.0; 3];
        let row = out_feat.row_mut(g);
        for &i in members {
            for a in 0..3 {
                p[a] += positions[i][a];
            }
            for (r, &f) in row.iter_mut().zip(features.row(i)) {
                *r += f;
            }
        }
        for v in row.iter_mut() {
            *v *= inv;
        }
        out_pos.push([p[0] * inv, p[1] * inv, p[2] * inv]);
    }
    (
        out_pos,
        out_feat,
        Pooling {
            groups,
            input_rows: positions.len(),
        },
    )
}

impl Pooling {
    pub fn backward(&self, d_out: &Matrix) -> Matrix {
        let mut d_in = Matrix::zeros(self.input_rows, d_out.cols());
        for (g, members) in self.groups.iter().enumerate() {
            let inv = 1.0 / members.len() as f64;
            for &i in members {
                for (d, &s) in d_in.row_mut(i).iter_mut().zip(d_out.row(g)) {
                    *d += s * inv;
                }
            }
        }
        d_in
    }
}

/// Normalized inverse-distance weights from source rows to each target point.
#[derive(Debug, Clone)]
pub struct Interpolation {
    pub weights: Vec<Vec<(usize, f64)>>,
    pub source_rows: usize,
}

impl Interpolation {
    /// Returns the interpolation plan and the number of distance evaluations spent.
    pub fn plan(
        source: &[[f64; 3]],
        targets: &[[f64; 3]],
        k: usize,
        search: SearchStrategy,
    ) -> Result<(Self, u64)> {
        let index = NeighborIndex::build_with(source, search)?;
        let mut weights = Vec::with_capacity(targets.len());
        for t in targets {
            let nbrs = index.knn(t, k)?;
            let raw: Vec<(usize, f64)> = nbrs
                .iter()
                .map(|n| (n.id, 1.0 / (n.distance + IDW_EPSILON)))
                .collect();
            let total: f64 = raw.iter().map(|r| r.1).sum();
            weights.push(raw.into_iter().map(|(i, w)| (i, w / total)).collect());
        }
        Ok((
            Self {
                weights,
                source_rows: source.len(),
            },
            index.distance_evaluations(),
        ))
    }

    pub fn forward(&self, source: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.weights.len(), source.cols());
        for (t, ws) in self.weights.iter().enumerate() {
            let row = out.row_mut(t);
            for &(i, w) in ws {
                for (o, &s) in row.iter_mut().zip(source.row(i)) {
                    *o += w * s;
                }
            }
        }
        out
    }

    pub fn backward(&self, d_out: &Matrix) -> Matrix {
        let mut d_src = Matrix::zeros(self.source_rows, d_out.cols());
        for (t, ws) in self.weights.iter().enumerate() {
            for &(i, w) in ws {
                for (d, &g) in d_src.row_mut(i).iter_mut().zip(d_out.row(t)) {
                    *d += w * g;
                }
            }
        }
        d_src
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_averages_each_voxel() {
        let pos = vec![[0.1, 0.1, 0.1], [0.3, 0.3, 0.3], [1.5, 0.1, 0.1]];
        let f = Matrix::from_rows(&[[1.0], [3.0], [10.0]]);
        let (p, g, pool) = grid_pool(&pos, &f, 1.0);
        assert_eq!(g.data(), &[2.0, 10.0]);
        assert!((p[0][0] - 0.2).abs() < 1e-15);
        assert_eq!(pool.groups, vec![vec![0, 1], vec![2]]);
        let d = pool.backward(&Matrix::from_rows(&[[1.0], [1.0]]));
        assert_eq!(d.data(), &[0.5, 0.5, 1.0]);
    }

    #[test]
    fn coincident_source_dominates() {
        let src = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let (plan, _) = Interpolation::plan(&src, &[[0.0; 3]], 3, SearchStrategy::KdTree).unwrap();
        let w0 = plan.weights[0][0];
        assert_eq!(w0.0, 0);
        assert!(1.0 - w0.1 < 1e-7);
    }

    #[test]
    fn uniform_features_are_preserved() {
        let src = vec![[0.0; 3], [1.0, 0.2, 0.0], [0.3, 1.0, 0.5], [2.0, 2.0, 2.0]];
        let feats = Matrix::from_rows(&[[0.7, -1.25]; 4]);
        let targets = vec![[0.5, 0.5, 0.5], [3.0, 0.0, 1.0]];
        let (plan, _) = Interpolation::plan(&src, &targets, 3, SearchStrategy::KdTree).unwrap();
        let out = plan.forward(&feats);
        for r in 0..2 {
            assert!((out.get(r, 0) - 0.7).abs() < 1e-14);
            assert!((out.get(r, 1) + 1.25).abs() < 1e-14);
        }
    }

    #[test]
    fn equidistant_pair_gives_mean() {
        // Both sources at distance 1 from the query: weights 1/(1+eps) each, normalized to 1/2.
        let src = vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let feats = Matrix::from_rows(&[[2.0, 0.0], [4.0, 6.0]]);
        let (plan, _) = Interpolation::plan(&src, &[[0.0; 3]], 3, SearchStrategy::KdTree).unwrap();
        let out = plan.forward(&feats);
        assert!((out.get(0, 0) - 3.0).abs() < 1e-15);
        assert!((out.get(0, 1) - 3.0).abs() < 1e-15);
    }
}
