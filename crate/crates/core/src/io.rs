//! Point-cloud files: a little-endian binary container and a plain-text twin.
//!
//! Binary layout:
//!
//! ```text
//! "RSPC" | u32 version | u64 count | u8 has_labels | u16 num_classes
//! record: f64 x, y, z | u8 r, g, b | u16 label (only when has_labels)
//! ```
//!
//! Text layout: an optional `# num_classes=N labeled=true` line, then
//! `x y z r g b [label]` per point with colors as 0..=255 integers.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RSPC";
pub const CLOUD_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 1 + 2;
/// Class count assumed for text files without a header line.
pub const DEFAULT_NUM_CLASSES: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Binary,
    Ascii,
}

impl CloudFormat {
    /// `.txt`, `.xyz`, `.asc` and `.pts` are text; everything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
            Some(e) if matches!(e.as_str(), "txt" | "xyz" | "asc" | "pts") => Self::Ascii,
            _ => Self::Binary,
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" | "bin" => Ok(Self::Binary),
            "ascii" | "text" | "txt" => Ok(Self::Ascii),
            other => Err(Error::Config(format!("unknown cloud format {other:?}"))),
        }
    }
}

fn quantize(c: f64) -> u8 {
    (c * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn encode_binary(cloud: &PointCloud) -> Vec<u8> {
    let labels = cloud.labels();
    let rec = 24 + 3 + if labels.is_some() { 2 } else { 0 };
    let mut out = Vec::with_capacity(HEADER_LEN + rec * cloud.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    out.push(labels.is_some() as u8);
    out.extend_from_slice(&(cloud.num_classes() as u16).to_le_bytes());
    for i in 0..cloud.len() {
        for v in cloud.positions()[i] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in cloud.colors()[i] {
            out.push(quantize(c));
        }
        if let Some(l) = labels {
            out.extend_from_slice(&l[i].to_le_bytes());
        }
    }
    out
}

pub fn decode_binary(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedHeader);
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            expected: "RSPC".into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedHeader);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CLOUD_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let has_labels = match bytes[16] {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Parse {
                line: 0,
                message: format!("has_labels flag must be 0 or 1, got {other}"),
            })
        }
    };
    let num_classes = u16::from_le_bytes(bytes[17..19].try_into().expect("2 bytes")) as usize;
    let rec = 27 + if has_labels { 2 } else { 0 };
    let body = &bytes[HEADER_LEN..];
    let complete = (body.len() / rec) as u64;
    if complete < count {
        return Err(Error::TruncatedRecord {
            expected: count,
            complete,
        });
    }
    if body.len() as u64 != count * rec as u64 {
        return Err(Error::TrailingBytes);
    }

    let n = count as usize;
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut labels = has_labels.then(|| Vec::with_capacity(n));
    for r in body.chunks_exact(rec) {
        let f = |k: usize| f64::from_le_bytes(r[8 * k..8 * k + 8].try_into().expect("8 bytes"));
        positions.push([f(0), f(1), f(2)]);
        colors.push([r[24], r[25], r[26]].map(|c| c as f64 / 255.0));
        if let Some(l) = labels.as_mut() {
            l.push(u16::from_le_bytes([r[27], r[28]]));
        }
    }
    PointCloud::new(positions, colors, labels, num_classes)
}

pub fn encode_ascii(cloud: &PointCloud) -> String {
    let labels = cloud.labels();
    let mut out = format!(
        "# num_classes={} labeled={}\n",
        cloud.num_classes(),
        labels.is_some()
    );
    for i in 0..cloud.len() {
        let [x, y, z] = cloud.positions()[i];
        let [r, g, b] = cloud.colors()[i].map(quantize);
        match labels {
            Some(l) => out.push_str(&format!("{x:?} {y:?} {z:?} {r} {g} {b} {}\n", l[i])),
            None => out.push_str(&format!("{x:?} {y:?} {z:?} {r} {g} {b}\n")),
        }
    }
    out
}

pub fn decode_ascii(text: &str) -> Result<PointCloud> {
    let mut num_classes = DEFAULT_NUM_CLASSES;
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut labels: Vec<u16> = Vec::new();
    let mut labeled: Option<bool> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if let Some(comment) = line.strip_prefix('#') {
            for (key, v) in comment.split_whitespace().filter_map(|t| t.split_once('=')) {
                let bad = || Error::Parse {
                    line: line_no,
                    message: format!("bad {key} {v:?}"),
                };
                match key {
                    "num_classes" => num_classes = v.parse().map_err(|_| bad())?,
                    "labeled" => labeled = Some(v.parse().map_err(|_| bad())?),
                    _ => {}
                }
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let has_label = match fields.len() {
            6 => false,
            7 => true,
            n => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 6 or 7 fields, found {n}"),
                })
            }
        };
        if *labeled.get_or_insert(has_label) != has_label {
            return Err(Error::Parse {
                line: line_no,
                message: "some points have labels and some do not".into(),
            });
        }
        let bad = |what: &str, s: &str| Error::Parse {
            line: line_no,
            message: format!("bad {what} {s:?}"),
        };
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = fields[k].parse().map_err(|_| bad("coordinate", fields[k]))?;
        }
        let mut c = [0.0; 3];
        for k in 0..3 {
            let v: u8 = fields[3 + k].parse().map_err(|_| bad("color", fields[3 + k]))?;
            c[k] = v as f64 / 255.0;
        }
        positions.push(p);
        colors.push(c);
        if has_label {
            labels.push(fields[6].parse().map_err(|_| bad("label", fields[6]))?);
        }
    }
    let labels = labeled.unwrap_or(false).then_some(labels);
    PointCloud::new(positions, colors, labels, num_classes)
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    match CloudFormat::from_path(path) {
        CloudFormat::Binary => decode_binary(&fs::read(path)?),
        CloudFormat::Ascii => decode_ascii(&fs::read_to_string(path)?),
    }
}

pub fn write_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    let mut f = fs::File::create(path)?;
    match format {
        CloudFormat::Binary => f.write_all(&encode_binary(cloud))?,
        CloudFormat::Ascii => f.write_all(encode_ascii(cloud).as_bytes())?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> PointCloud {
        PointCloud::new(
            vec![[0.1, -2.5, 3.0], [1e-9, 12345.678, -0.0]],
            vec![[1.0, 0.0, 0.2], [0.0, 128.0 / 255.0, 1.0]],
            Some(vec![2, 0]),
            4,
        )
        .unwrap()
    }

    #[test]
    fn binary_roundtrip_is_bit_exact() {
        let bytes = encode_binary(&sample());
        let back = decode_binary(&bytes).unwrap();
        assert_eq!(encode_binary(&back), bytes);
        for (a, b) in back.positions().iter().zip(sample().positions()) {
            for k in 0..3 {
                assert_eq!(a[k].to_bits(), b[k].to_bits());
            }
        }
    }

    #[test]
    fn parses_reference_line() {
        let c = decode_ascii("0.0 0.0 0.0 255 0 0 2\n").unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.positions()[0], [0.0, 0.0, 0.0]);
        assert_eq!(c.colors()[0], [1.0, 0.0, 0.0]);
        assert_eq!(c.labels().unwrap(), &[2]);
    }

    #[test]
    fn truncated_file_reports_truncated_record() {
        let bytes = encode_binary(&sample());
        let err = decode_binary(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(err, Error::TruncatedRecord { expected: 2, complete: 1 }));
        assert!(err.to_string().contains("truncated record"));
    }

    #[test]
    fn malformed_inputs_have_distinct_errors() {
        let bytes = encode_binary(&sample());
        assert!(matches!(decode_binary(&bytes[..10]), Err(Error::TruncatedHeader)));
        let mut b = bytes.clone();
        b[1] = b'X';
        assert!(matches!(decode_binary(&b), Err(Error::BadMagic { .. })));
        let mut b = bytes.clone();
        b[4] = 2;
        assert!(matches!(decode_binary(&b), Err(Error::UnsupportedVersion(2))));
        let mut b = bytes.clone();
        b.push(0);
        assert!(matches!(decode_binary(&b), Err(Error::TrailingBytes)));
        let mut b = bytes.clone();
        b[17] = 2; // num_classes = 2 but a label is 2
        assert!(matches!(decode_binary(&b), Err(Error::LabelOutOfRange { label: 2, .. })));
        assert!(matches!(decode_ascii("1 2 3 4 5\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(decode_ascii("1 2 3 4 5 300\n"), Err(Error::Parse { .. })));
        assert!(matches!(
            decode_ascii("1 2 3 0 0 0 1\n1 2 3 0 0 0\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn files_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        for (name, fmt) in [("a.rspc", CloudFormat::Binary), ("a.txt", CloudFormat::Ascii)] {
            let p = dir.path().join(name);
            assert_eq!(CloudFormat::from_path(&p), fmt);
            write_cloud(&sample(), &p, fmt).unwrap();
            assert_eq!(read_cloud(&p).unwrap(), decode_binary(&encode_binary(&sample())).unwrap());
        }
    }

    proptest! {
        #[test]
        fn ascii_roundtrip(
            pts in prop::collection::vec((-1e4f64..1e4, -1e4f64..1e4, -1e4f64..1e4, 0u8..=255, 0u16..13), 0..30)
        ) {
            let cloud = PointCloud::new(
                pts.iter().map(|p| [p.0, p.1, p.2]).collect(),
                pts.iter().map(|p| [p.3 as f64 / 255.0; 3]).collect(),
                Some(pts.iter().map(|p| p.4).collect()),
                13,
            ).unwrap();
            let back = decode_ascii(&encode_ascii(&cloud)).unwrap();
            prop_assert_eq!(back.labels(), cloud.labels());
            prop_assert_eq!(back.colors(), cloud.colors());
            for (a, b) in back.positions().iter().zip(cloud.positions()) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() <= 1e-9 * b[k].abs());
                }
            }
        }
    }
}
