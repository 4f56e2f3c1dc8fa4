//! Point-cloud representation and voxel-grid helpers.

use crate::error::{Error, Result};

/// Integer voxel coordinate.
pub type VoxelKey = [i64; 3];

/// A colored, optionally labeled point cloud.
///
/// Positions are meters, colors are normalized to `[0, 1]`. All fields have
/// one entry per point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
    labels: Option<Vec<u16>>,
    num_classes: usize,
}

impl PointCloud {
    pub fn new(
        positions: Vec<[f64; 3]>,
        colors: Vec<[f64; 3]>,
        labels: Option<Vec<u16>>,
        num_classes: usize,
    ) -> Result<Self> {
        if positions.len() != colors.len() {
            return Err(Error::LengthMismatch(format!(
                "{} positions vs {} colors",
                positions.len(),
                colors.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != positions.len() {
                return Err(Error::LengthMismatch(format!(
                    "{} positions vs {} labels",
                    positions.len(),
                    l.len()
                )));
            }
        }
        for (index, p) in positions.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFiniteCoordinate { index });
            }
        }
        for (index, c) in colors.iter().enumerate() {
            if !c.iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(Error::ColorOutOfRange { index });
            }
        }
        if let Some(l) = &labels {
            for (index, &label) in l.iter().enumerate() {
                if label as usize >= num_classes {
                    return Err(Error::LabelOutOfRange {
                        index,
                        label: label as usize,
                        num_classes,
                    });
                }
            }
        }
        Ok(Self {
            positions,
            colors,
            labels,
            num_classes,
        })
    }

    pub fn empty(num_classes: usize, labeled: bool) -> Self {
        Self {
            positions: Vec::new(),
            colors: Vec::new(),
            labels: labeled.then(Vec::new),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// The 6-channel `xyzrgb` row of point `i`.
    pub fn xyzrgb(&self, i: usize) -> [f64; 6] {
        let p = self.positions[i];
        let c = self.colors[i];
        [p[0], p[1], p[2], c[0], c[1], c[2]]
    }

    /// Sub-cloud made of `indices`, in that order. Labels are carried along.
    pub fn gather(&self, indices: &[usize]) -> Result<PointCloud> {
        let len = self.len();
        if let Some(&index) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::IndexOutOfRange { index, len });
        }
        Ok(PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            colors: indices.iter().map(|&i| self.colors[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
        })
    }
}

/// Voxel key of a single position, `floor((p - origin) / voxel_size)` per axis.
pub fn voxel_key(p: &[f64; 3], voxel_size: f64, origin: &[f64; 3]) -> VoxelKey {
    [
        ((p[0] - origin[0]) / voxel_size).floor() as i64,
        ((p[1] - origin[1]) / voxel_size).floor() as i64,
        ((p[2] - origin[2]) / voxel_size).floor() as i64,
    ]
}

/// Voxel keys of every point in `cloud` on a grid anchored at the origin.
pub fn voxel_keys(cloud: &PointCloud, voxel_size: f64) -> Result<Vec<VoxelKey>> {
    voxel_keys_with_origin(cloud.positions(), voxel_size, &[0.0; 3])
}

pub fn voxel_keys_with_origin(
    positions: &[[f64; 3]],
    voxel_size: f64,
    origin: &[f64; 3],
) -> Result<Vec<VoxelKey>> {
    check_voxel_size(voxel_size)?;
    positions
        .iter()
        .enumerate()
        .map(|(index, p)| {
            if p.iter().all(|c| c.is_finite()) {
                Ok(voxel_key(p, voxel_size, origin))
            } else {
                Err(Error::NonFiniteCoordinate { index })
            }
        })
        .collect()
}

pub(crate) fn check_voxel_size(voxel_size: f64) -> Result<()> {
    if voxel_size > 0.0 && voxel_size.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidVoxelSize(voxel_size))
    }
}
