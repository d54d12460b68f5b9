//! On-disk formats: the MQDF binary feature file and the text prior
//! checkpoint.
//!
//! MQDF layout, all integers little-endian:
//!
//! | offset | size     | field                         |
//! |--------|----------|-------------------------------|
//! | 0      | 4        | magic `MQDF`                  |
//! | 4      | 1        | version (`1`)                 |
//! | 5      | 4        | `d` (u32)                     |
//! | 9      | 4        | class count (u32)             |
//! | 13     | 8        | `n` (u64)                     |
//! | 21     | `4·n·d`  | features, f32 row-major       |
//! | ...    | `4·n`    | labels, u32                   |

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::classifier::Mode;
use crate::episodes::FeatureDataset;
use crate::error::{Error, Result};
use crate::niw::NiwPrior;
use crate::numerics::{LowerTriangular, Matrix};

pub const MAGIC: [u8; 4] = *b"MQDF";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: u64 = 21;

fn truncated(expected: u64, found: usize) -> Error {
    Error::TruncatedFile {
        expected,
        found: found as u64,
    }
}

/// Parses an MQDF image.
pub fn decode_features(bytes: &[u8], name: impl Into<String>) -> Result<FeatureDataset> {
    if bytes.len() < 4 {
        return Err(truncated(HEADER_LEN, bytes.len()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < 5 {
        return Err(truncated(HEADER_LEN, bytes.len()));
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    if (bytes.len() as u64) < HEADER_LEN {
        return Err(truncated(HEADER_LEN, bytes.len()));
    }
    let d = u32::from_le_bytes(bytes[5..9].try_into().expect("u32")) as u64;
    let classes = u32::from_le_bytes(bytes[9..13].try_into().expect("u32")) as u64;
    let n = u64::from_le_bytes(bytes[13..21].try_into().expect("u64"));
    let expected = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_add(n))
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(HEADER_LEN))
        .unwrap_or(u64::MAX);
    if (bytes.len() as u64) < expected {
        return Err(truncated(expected, bytes.len()));
    }
    if (bytes.len() as u64) > expected {
        return Err(Error::TrailingBytes {
            expected,
            found: bytes.len() as u64,
        });
    }
    let (n, d) = (n as usize, d as usize);
    let feat_end = HEADER_LEN as usize + 4 * n * d;
    let mut data = Vec::with_capacity(n * d);
    for (i, chunk) in bytes[HEADER_LEN as usize..feat_end].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("f32"));
        if !v.is_finite() {
            return Err(Error::NonFiniteFeature {
                row: (i / d.max(1)) as u64,
            });
        }
        data.push(v as f64);
    }
    let labels: Vec<u32> = bytes[feat_end..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("u32")))
        .collect();
    if let Some(&bad) = labels.iter().find(|&&l| l as u64 >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad as usize,
            classes: classes as usize,
        });
    }
    FeatureDataset::new(Matrix::from_row_major(n, d, data)?, labels, classes as usize, name)
}

/// Serializes a dataset; features are narrowed to f32.
pub fn encode_features(dataset: &FeatureDataset) -> Vec<u8> {
    let n = dataset.len();
    let d = dataset.dim();
    let mut out = Vec::with_capacity(HEADER_LEN as usize + 4 * n * (d + 1));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.class_count() as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for v in dataset.features().as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for l in dataset.labels() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    decode_features(&bytes, name)
}

pub fn write_feature_file(dataset: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(dataset)).map_err(|e| Error::io(path, e))
}

/// Feature preprocessing a prior was trained with.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Normalization {
    #[default]
    None,
    /// Center by `center`, then scale rows to unit L2 norm.
    Cl2n { center: Vec<f64> },
}

/// A trained prior plus the settings needed to use it.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorCheckpoint {
    pub prior: NiwPrior,
    pub mode: Mode,
    pub normalization: Normalization,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// 17 significant digits: enough for an exact f64 round trip.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_list(values: &[f64]) -> String {
    values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" ")
}

impl PriorCheckpoint {
    pub fn to_text(&self) -> String {
        let p = &self.prior;
        let mut out = String::from("# metaqda prior checkpoint\n");
        let _ = writeln!(out, "format-version = {CHECKPOINT_VERSION}");
        let _ = writeln!(out, "d = {}", p.dim());
        let _ = writeln!(out, "mode = {}", self.mode);
        match &self.normalization {
            Normalization::None => out.push_str("normalization = none\n"),
            Normalization::Cl2n { .. } => out.push_str("normalization = cl2n\n"),
        }
        let _ = writeln!(out, "kappa = {}", fmt_f64(p.kappa()));
        let _ = writeln!(out, "nu = {}", fmt_f64(p.nu()));
        let _ = writeln!(out, "m = {}", fmt_list(p.mean()));
        let _ = writeln!(out, "L = {}", fmt_list(p.scale_factor().packed()));
        if let Normalization::Cl2n { center } = &self.normalization {
            let _ = writeln!(out, "center = {}", fmt_list(center));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Checkpoint {
                line: i + 1,
                reason: "expected `key = value`".into(),
            })?;
            fields.push((i + 1, k.trim(), v.trim()));
        }
        let get = |key: &str| -> Result<(usize, &str)> {
            fields
                .iter()
                .find(|(_, k, _)| *k == key)
                .map(|(l, _, v)| (*l, *v))
                .ok_or_else(|| Error::Checkpoint {
                    line: 0,
                    reason: format!("missing key `{key}`"),
                })
        };
        let bad = |line: usize, reason: String| Error::Checkpoint { line, reason };
        let scalar = |key: &str| -> Result<f64> {
            let (line, v) = get(key)?;
            v.parse::<f64>().map_err(|e| bad(line, format!("{key}: {e}")))
        };
        let list = |key: &str| -> Result<Vec<f64>> {
            let (line, v) = get(key)?;
            v.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| bad(line, format!("{key}: {e}"))))
                .collect()
        };

        let (line, version) = get("format-version")?;
        if version.parse::<u32>().ok() != Some(CHECKPOINT_VERSION) {
            return Err(bad(line, format!("unsupported format-version {version}")));
        }
        let (line, d) = get("d")?;
        let d: usize = d.parse().map_err(|e| bad(line, format!("d: {e}")))?;
        let (line, mode) = get("mode")?;
        let mode: Mode = mode.parse().map_err(|e: Error| bad(line, e.to_string()))?;
        let (line, norm) = get("normalization")?;
        let normalization = match norm {
            "none" => Normalization::None,
            "cl2n" => {
                let center = list("center")?;
                if center.len() != d {
                    return Err(bad(
                        get("center")?.0,
                        format!("center has {} entries, expected {d}", center.len()),
                    ));
                }
                Normalization::Cl2n { center }
            }
            other => return Err(bad(line, format!("unknown normalization {other:?}"))),
        };
        let mean = list("m")?;
        if mean.len() != d {
            return Err(bad(get("m")?.0, format!("m has {} entries, expected {d}", mean.len())));
        }
        let packed = list("L")?;
        let factor =
            LowerTriangular::from_packed(d, packed).map_err(|e| bad(get("L").map_or(0, |x| x.0), e.to_string()))?;
        let prior = NiwPrior::new(mean, scalar("kappa")?, factor, scalar("nu")?)?;
        Ok(PriorCheckpoint {
            prior,
            mode,
            normalization,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
