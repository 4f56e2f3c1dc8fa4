//! Versioned binary checkpoint of one scale.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic "RSCK" | u32 version | u32 config_len | config (UTF-8 key=value lines)
//! | u32 tensor_count | tensors...
//! tensor: u16 name_len | name | u8 ndim | u64 dims[ndim] | f64 data[prod(dims)]
//! ```
//!
//! Every float is written with its exact bit pattern, so write → read → write
//! reproduces the same bytes.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{BackboneConfig, Network, ScaleModel};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;

const MAGIC: &[u8; 4] = b"RSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn to_bytes(model: &ScaleModel) -> Vec<u8> {
    let cfg = &model.config;
    let config_text = format!(
        "scale_id={}\nbase_voxel={:?}\nfrozen={}\nfusion={}\nk_fuse={}\nfeature_dim={}\n\
         attention_neighbors={}\nencoder_stages={}\ndownsample_factor={:?}\nnum_classes={}\n\
         interp_neighbors={}\nsearch={}\n",
        model.scale_id,
        model.base_voxel,
        model.is_frozen(),
        model.has_fusion(),
        model.fusion_config.k_fuse,
        cfg.feature_dim,
        cfg.attention_neighbors,
        cfg.encoder_stages,
        cfg.downsample_factor,
        cfg.num_classes,
        cfg.interp_neighbors,
        match cfg.search {
            crate::spatial::SearchStrategy::KdTree => "kdtree",
            crate::spatial::SearchStrategy::Exhaustive => "exhaustive",
        },
    );

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());

    let mut tensors: Vec<(String, Vec<u64>, Vec<f64>)> = Vec::new();
    model.net.for_each_linear(|name, l| {
        tensors.push((
            format!("{name}.weight"),
            vec![l.out_dim as u64, l.in_dim as u64],
            l.weight.clone(),
        ));
        tensors.push((format!("{name}.bias"), vec![l.out_dim as u64], l.bias.clone()));
    });

    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, values) in &tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn parse_field<T: std::str::FromStr>(map: &HashMap<&str, &str>, key: &str) -> Result<T> {
    map.get(key)
        .ok_or_else(|| Error::Checkpoint(format!("missing config key {key}")))?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad value for {key}")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<ScaleModel> {
    let mut r = Reader { buf: bytes, at: 0 };
    let magic = r.take(4).map_err(|_| Error::TruncatedHeader)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: "RSCK".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let map: HashMap<&str, &str> = config_text
        .lines()
        .filter_map(|l| l.split_once('='))
        .collect();

    let config = BackboneConfig {
        feature_dim: parse_field(&map, "feature_dim")?,
        attention_neighbors: parse_field(&map, "attention_neighbors")?,
        encoder_stages: parse_field(&map, "encoder_stages")?,
        downsample_factor: parse_field(&map, "downsample_factor")?,
        num_classes: parse_field(&map, "num_classes")?,
        interp_neighbors: parse_field(&map, "interp_neighbors")?,
        search: parse_field::<String>(&map, "search")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad search strategy".into()))?,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid stored config: {e}")))?;
    let scale_id: usize = parse_field(&map, "scale_id")?;
    let base_voxel: f64 = parse_field(&map, "base_voxel")?;
    let frozen: bool = parse_field(&map, "frozen")?;
    let with_fusion: bool = parse_field(&map, "fusion")?;
    let fusion_config = FusionConfig::new(parse_field(&map, "k_fuse")?, config.feature_dim)
        .map_err(|e| Error::Checkpoint(format!("invalid stored config: {e}")))?;

    let count = r.u32()? as usize;
    let mut tensors: HashMap<String, (Vec<u64>, Vec<f64>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let len = dims.iter().product::<u64>() as usize;
        if len > (bytes.len() - r.at) / 8 {
            return Err(Error::Checkpoint(format!("tensor {name} runs past end of file")));
        }
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if tensors.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }

    let mut net = Network::init(&config, with_fusion, 0);
    let mut problem: Option<String> = None;
    let mut used = 0;
    net.for_each_linear_mut(|name, l| {
        for (suffix, dst, want) in [
            ("weight", &mut l.weight, vec![l.out_dim as u64, l.in_dim as u64]),
            ("bias", &mut l.bias, vec![l.out_dim as u64]),
        ] {
            let key = format!("{name}.{suffix}");
            match tensors.get(&key) {
                Some((dims, data)) if *dims == want => {
                    dst.copy_from_slice(data);
                    used += 1;
                }
                Some((dims, _)) => {
                    problem.get_or_insert(format!("tensor {key} has shape {dims:?}, expected {want:?}"));
                }
                None => {
                    problem.get_or_insert(format!("missing tensor {key}"));
                }
            }
        }
    });
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    if used != tensors.len() {
        return Err(Error::Checkpoint("checkpoint holds unexpected tensors".into()));
    }
    Ok(ScaleModel::from_parts(
        scale_id,
        base_voxel,
        config,
        fusion_config,
        net,
        frozen,
    ))
}

pub fn save(model: &ScaleModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ScaleModel> {
    from_bytes(&fs::read(path)?)
}

/// SHA-256 of the serialized checkpoint, hex encoded.
pub fn checksum(model: &ScaleModel) -> String {
    Sha256::digest(to_bytes(model))
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
