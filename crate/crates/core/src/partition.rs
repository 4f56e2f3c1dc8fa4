//! Disjoint multi-resolution partitioning.
//!
//! Scale `i` voxelizes the points not yet claimed by scales `1..i` at
//! `voxel_sizes[i]` and keeps one uniformly chosen point per occupied voxel.
//! The choice inside a voxel is drawn from a generator keyed by
//! `(seed, scale, voxel key)`, so results do not depend on iteration order.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{check_voxel_size, voxel_key, PointCloud, VoxelKey};
use crate::error::{Error, Result};

/// Voxel sizes used for the four-scale indoor setting, coarsest first.
pub const DEFAULT_VOXEL_SIZES: [f64; 4] = [0.16, 0.12, 0.08, 0.06];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    /// Strictly decreasing, coarsest first.
    pub voxel_sizes: Vec<f64>,
    pub rng_seed: u64,
    /// Grid origin; the default grid is anchored at `(0, 0, 0)`.
    pub origin: [f64; 3],
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            voxel_sizes: DEFAULT_VOXEL_SIZES.to_vec(),
            rng_seed: 0,
            origin: [0.0; 3],
        }
    }
}

impl PartitionConfig {
    pub fn new(voxel_sizes: Vec<f64>, rng_seed: u64) -> Result<Self> {
        let cfg = Self {
            voxel_sizes,
            rng_seed,
            origin: [0.0; 3],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn num_scales(&self) -> usize {
        self.voxel_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxel_sizes.is_empty() {
            return Err(Error::Config("at least one voxel size is required".into()));
        }
        for &v in &self.voxel_sizes {
            check_voxel_size(v).map_err(|_| Error::Config(format!("invalid voxel size {v}")))?;
        }
        if self.voxel_sizes.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(
                "voxel sizes must be strictly decreasing (coarsest first)".into(),
            ));
        }
        if !self.origin.iter().all(|c| c.is_finite()) {
            return Err(Error::Config("grid origin must be finite".into()));
        }
        Ok(())
    }
}

/// `s` pairwise-disjoint index lists into a source cloud, coarsest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSet {
    pub partitions: Vec<Vec<usize>>,
    pub voxel_sizes: Vec<f64>,
    pub source_point_count: usize,
}

impl PartitionSet {
    pub fn num_scales(&self) -> usize {
        self.partitions.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.partitions.iter().map(Vec::len).collect()
    }

    pub fn total_selected(&self) -> usize {
        self.partitions.iter().map(Vec::len).sum()
    }

    /// Sorted union of partitions `1..=upto` (1-based scale numbers).
    pub fn union_upto(&self, upto: usize) -> Vec<usize> {
        let mut all: Vec<usize> = self.partitions[..upto.min(self.partitions.len())]
            .iter()
            .flatten()
            .copied()
            .collect();
        all.sort_unstable();
        all
    }
}

/// Build the disjoint resolution partitions of `cloud`.
pub fn build_partitions(cloud: &PointCloud, cfg: &PartitionConfig) -> Result<PartitionSet> {
    cfg.validate()?;
    let n = cloud.len();
    let mut pool: Vec<usize> = (0..n).collect();
    let mut partitions = Vec::with_capacity(cfg.num_scales());

    for (scale, &voxel_size) in cfg.voxel_sizes.iter().enumerate() {
        let mut cells: HashMap<VoxelKey, Vec<usize>> = HashMap::new();
        // The pool stays sorted, so every candidate list is in ascending index order.
        for &i in &pool {
            cells
                .entry(voxel_key(&cloud.positions()[i], voxel_size, &cfg.origin))
                .or_default()
                .push(i);
        }
        let mut selected: Vec<usize> = cells
            .iter()
            .map(|(key, candidates)| {
                let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(cfg.rng_seed, scale, key));
                candidates[rng.random_range(0..candidates.len())]
            })
            .collect();
        selected.sort_unstable();

        let mut taken = selected.iter().peekable();
        pool.retain(|i| {
            if taken.peek() == Some(&i) {
                taken.next();
                false
            } else {
                true
            }
        });
        partitions.push(selected);
    }

    let set = PartitionSet {
        partitions,
        voxel_sizes: cfg.voxel_sizes.clone(),
        source_point_count: n,
    };
    let sizes = set.sizes();
    if n > 0 && sizes.windows(2).any(|w| w[1] <= w[0]) {
        log::warn!("partition sizes are not strictly increasing: {sizes:?}");
    }
    Ok(set)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn cell_seed(seed: u64, scale: usize, key: &VoxelKey) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ scale as u64);
    for &k in key {
        h = splitmix64(h ^ k as u64);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn corners() -> PointCloud {
        let mut positions = Vec::new();
        for &x in &[0.1, 0.9] {
            for &y in &[0.1, 0.9] {
                for &z in &[0.1, 0.9] {
                    positions.push([x, y, z]);
                }
            }
        }
        PointCloud::new(positions, vec![[0.2; 3]; 8], None, 1).unwrap()
    }

    #[test]
    fn single_point() {
        let c = PointCloud::new(vec![[0.3, 0.3, 0.3]], vec![[0.0; 3]], None, 1).unwrap();
        let set = build_partitions(&c, &PartitionConfig::new(vec![1.0], 7).unwrap()).unwrap();
        assert_eq!(set.partitions, vec![vec![0]]);
    }

    #[test]
    fn corners_split_one_then_seven() {
        for seed in 0..20 {
            let cfg = PartitionConfig::new(vec![1.0, 0.5], seed).unwrap();
            let set = build_partitions(&corners(), &cfg).unwrap();
            assert_eq!(set.sizes(), vec![1, 7]);
            let mut all: Vec<usize> = set.partitions.concat();
            all.sort_unstable();
            assert_eq!(all, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn seed_changes_coarse_choice() {
        let picks: HashSet<usize> = (0..64)
            .map(|seed| {
                let cfg = PartitionConfig::new(vec![1.0, 0.5], seed).unwrap();
                build_partitions(&corners(), &cfg).unwrap().partitions[0][0]
            })
            .collect();
        assert!(picks.len() > 1);
    }

    #[test]
    fn empty_cloud_gives_empty_partitions() {
        let c = PointCloud::empty(3, false);
        let set = build_partitions(&c, &PartitionConfig::default()).unwrap();
        assert_eq!(set.partitions, vec![Vec::<usize>::new(); 4]);
    }

    #[test]
    fn config_validation() {
        assert!(PartitionConfig::new(vec![], 0).is_err());
        assert!(PartitionConfig::new(vec![0.1, 0.2], 0).is_err());
        assert!(PartitionConfig::new(vec![0.1, 0.1], 0).is_err());
        assert!(PartitionConfig::new(vec![0.1, -0.05], 0).is_err());
        assert!(PartitionConfig::new(vec![0.2, 0.1], 0).is_ok());
    }

    #[test]
    fn union_upto_is_sorted() {
        let set = PartitionSet {
            partitions: vec![vec![4, 1], vec![0, 3]],
            voxel_sizes: vec![1.0, 0.5],
            source_point_count: 5,
        };
        assert_eq!(set.union_upto(1), vec![1, 4]);
        assert_eq!(set.union_upto(2), vec![0, 1, 3, 4]);
    }
}
