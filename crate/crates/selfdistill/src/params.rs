//! Flat parameter vectors with a named-slice shape table and a bit-exact
//! checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::ArchConfig;
use crate::scalar::{Dtype, Scalar};
use crate::{Error, Result};

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Ordered, gap-free partition of a parameter vector into named tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeTable {
    pub entries: Vec<TableEntry>,
}

impl ShapeTable {
    pub fn total_len(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.rows * e.cols)
    }

    pub fn find(&self, name: &str) -> Option<&TableEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Entries must tile the vector exactly: each offset equals the end of
    /// the previous entry.
    pub fn validate(&self) -> Result<()> {
        let mut expect = 0usize;
        for e in &self.entries {
            if e.offset != expect {
                return Err(Error::Parameter(format!(
                    "shape table gap/overlap at {} (offset {} expected {})",
                    e.name, e.offset, expect
                )));
            }
            expect += e.rows * e.cols;
        }
        Ok(())
    }
}

/// Flat, immutable-by-convention weight vector of the policy.
#[derive(Debug, Clone)]
pub struct PolicyParameters<T: Scalar> {
    pub values: Vec<T>,
    pub shape_table: ShapeTable,
    pub arch: ArchConfig,
}

impl<T: Scalar> PolicyParameters<T> {
    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> &[T] {
        let e = self
            .shape_table
            .find(name)
            .unwrap_or_else(|| panic!("unknown parameter tensor {name}"));
        &self.values[e.offset..e.offset + e.rows * e.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// FNV-1a hash of the little-endian byte image; used to certify that a
    /// snapshot did not change.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.values.len() * T::BYTES);
        for &v in &self.values {
            v.write_le(&mut bytes);
        }
        fnv1a(&bytes)
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// `beta * teacher + (1 - beta) * student`, elementwise.
pub fn ema_update<T: Scalar>(
    teacher: &PolicyParameters<T>,
    student: &PolicyParameters<T>,
    beta: f64,
) -> Result<PolicyParameters<T>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Parameter(format!("beta {beta} outside [0, 1]")));
    }
    if teacher.shape_table != student.shape_table || teacher.arch != student.arch {
        return Err(Error::Parameter("EMA over mismatched parameter shapes".into()));
    }
    let b = T::from_f64(beta);
    let one_m_b = T::from_f64(1.0 - beta);
    let values = teacher
        .values
        .iter()
        .zip(&student.values)
        .map(|(&t, &s)| b * t + one_m_b * s)
        .collect();
    Ok(PolicyParameters {
        values,
        shape_table: teacher.shape_table.clone(),
        arch: teacher.arch,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic, header length (LE u32), JSON header, raw
// little-endian parameter bytes. Round-trips bit-exactly.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"SDCKPT01";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: ArchConfig,
    dtype: Dtype,
    shape_table: ShapeTable,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &PolicyParameters<T>) -> Result<()> {
    let header = CheckpointHeader {
        arch: params.arch,
        dtype: T::DTYPE,
        shape_table: params.shape_table.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_json.len() + params.values.len() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for &v in &params.values {
        v.write_le(&mut out);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<PolicyParameters<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Parameter(format!("{} is not a checkpoint", path.display())));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::Parameter("truncated checkpoint header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])?;
    if header.dtype != T::DTYPE {
        return Err(Error::Parameter(format!(
            "checkpoint dtype {:?} does not match requested {:?}",
            header.dtype,
            T::DTYPE
        )));
    }
    header.shape_table.validate()?;
    let n = header.shape_table.total_len();
    let body = &bytes[12 + header_len..];
    if body.len() != n * T::BYTES {
        return Err(Error::Parameter(format!(
            "checkpoint body holds {} bytes, expected {}",
            body.len(),
            n * T::BYTES
        )));
    }
    let values: Vec<T> = body.chunks_exact(T::BYTES).map(T::read_le).collect();
    Ok(PolicyParameters {
        values,
        shape_table: header.shape_table,
        arch: header.arch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::init_policy;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            vocab: 11,
            hidden: 8,
            layers: 1,
            heads: 2,
            window: 16,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn shape_table_partitions_vector() {
        let p = init_policy::<f32>(&tiny_arch(), 0).unwrap();
        p.shape_table.validate().unwrap();
        assert_eq!(p.shape_table.total_len(), p.values.len());
    }

    #[test]
    fn ema_endpoints_are_exact() {
        let t = init_policy::<f64>(&tiny_arch(), 1).unwrap();
        let s = init_policy::<f64>(&tiny_arch(), 2).unwrap();
        let at_one = ema_update(&t, &s, 1.0).unwrap();
        assert_eq!(at_one.values, t.values);
        let at_zero = ema_update(&t, &s, 0.0).unwrap();
        assert_eq!(at_zero.values, s.values);
    }

    #[test]
    fn ema_direct_formula() {
        let mut t = init_policy::<f64>(&tiny_arch(), 1).unwrap();
        let mut s = t.clone();
        t.values.iter_mut().for_each(|v| *v = 0.0);
        s.values.iter_mut().for_each(|v| *v = 1.0);
        let r = ema_update(&t, &s, 0.9).unwrap();
        for &v in &r.values {
            assert!((v - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn ema_is_convex_combination() {
        let t = init_policy::<f64>(&tiny_arch(), 3).unwrap();
        let s = init_policy::<f64>(&tiny_arch(), 4).unwrap();
        let r = ema_update(&t, &s, 0.37).unwrap();
        for ((&rv, &tv), &sv) in r.values.iter().zip(&t.values).zip(&s.values) {
            let (lo, hi) = if tv < sv { (tv, sv) } else { (sv, tv) };
            assert!(rv >= lo - 1e-12 && rv <= hi + 1e-12);
        }
    }

    #[test]
    fn ema_shape_mismatch_is_parameter_error() {
        let t = init_policy::<f64>(&tiny_arch(), 1).unwrap();
        let mut other = tiny_arch();
        other.hidden = 16;
        let s = init_policy::<f64>(&other, 1).unwrap();
        assert!(matches!(ema_update(&t, &s, 0.5), Err(Error::Parameter(_))));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let p = init_policy::<f32>(&tiny_arch(), 9).unwrap();
        save_checkpoint(&path, &p).unwrap();
        let q: PolicyParameters<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(p.shape_table, q.shape_table);
        assert_eq!(p.arch, q.arch);
        assert!(p.values.iter().zip(&q.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        // dtype mismatch is refused
        assert!(load_checkpoint::<f64>(&path).is_err());
    }
}
