use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::util;

const CHECKPOINT_MAGIC: &[u8; 4] = b"MRGC";
const CHECKPOINT_VERSION: u32 = 1;

/// A named contiguous slice of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter vector split into named segments, tagged with the
/// fingerprint of the architecture that produced it.
///
/// Values are held in double precision; checkpoint files store them as
/// 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    arch_hash: u64,
    segments: Arc<[Segment]>,
    values: Vec<f64>,
}

impl ParamVector {
    /// Segments must be sorted by name and tile `values` without gaps.
    pub fn new(arch_hash: u64, segments: Arc<[Segment]>, values: Vec<f64>) -> Result<Self> {
        let mut expected_offset = 0;
        for (i, seg) in segments.iter().enumerate() {
            if seg.offset != expected_offset {
                return Err(Error::Format(format!("segment {} is not contiguous", seg.name)));
            }
            if i > 0 && segments[i - 1].name >= seg.name {
                return Err(Error::Format(format!(
                    "segments not in canonical order at {}",
                    seg.name
                )));
            }
            expected_offset += seg.len;
        }
        if expected_offset != values.len() {
            return Err(Error::Format(format!(
                "segments cover {expected_offset} values, vector has {}",
                values.len()
            )));
        }
        Ok(Self {
            arch_hash,
            segments,
            values,
        })
    }

    pub fn arch_hash(&self) -> u64 {
        self.arch_hash
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.find(name).map(|s| &self.values[s.offset..s.offset + s.len])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let seg = self.find(name)?.clone();
        Some(&mut self.values[seg.offset..seg.offset + seg.len])
    }

    fn find(&self, name: &str) -> Option<&Segment> {
        self.segments
            .binary_search_by(|s| s.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.segments[i])
    }

    /// New vector with the same layout and the given values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.arch_hash, self.segments.clone(), values)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch_hash: self.arch_hash,
            segments: self.segments.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Fails unless `other` has the same fingerprint and segment layout.
    pub fn ensure_compatible(&self, other: &ParamVector) -> Result<()> {
        if self.arch_hash != other.arch_hash {
            return Err(Error::ArchMismatch {
                expected: self.arch_hash,
                found: other.arch_hash,
            });
        }
        if self.segments != other.segments {
            return Err(Error::Merge("segment layouts differ".into()));
        }
        Ok(())
    }

    /// Rounds every value to the 32-bit storage precision of checkpoint files.
    pub fn round_to_storage(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        util::write_u32(w, CHECKPOINT_VERSION)?;
        util::write_u64(w, self.arch_hash)?;
        write_segments(w, self)
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    /// SHA-256 of the checkpoint encoding.
    pub fn digest(&self) -> String {
        util::sha256_hex(&self.checkpoint_bytes())
    }

    /// Reads a checkpoint without checking it against any architecture.
    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        util::expect_magic(r, CHECKPOINT_MAGIC)?;
        let version = util::read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let arch_hash = util::read_u64(r)?;
        let (segments, values) = read_segments(r)?;
        util::expect_eof(r)?;
        Self::new(arch_hash, segments.into(), values)
    }

    /// Reads a checkpoint and rejects it unless its fingerprint is `expected`.
    pub fn read_checkpoint_expecting<R: Read>(r: &mut R, expected: u64) -> Result<Self> {
        let params = Self::read_checkpoint(r)?;
        if params.arch_hash != expected {
            return Err(Error::ArchMismatch {
                expected,
                found: params.arch_hash,
            });
        }
        Ok(params)
    }
}

/// Segment table shared by checkpoint and Fisher files: `u32` count, then per
/// segment `u16` name length, name bytes, `u64` element count and the
/// elements as little-endian `f32`.
pub(crate) fn write_segments<W: Write>(w: &mut W, params: &ParamVector) -> Result<()> {
    util::write_u32(w, params.segments.len() as u32)?;
    for seg in params.segments.iter() {
        let name = seg.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("segment name too long: {}", seg.name)))?;
        util::write_u16(w, name_len)?;
        w.write_all(name)?;
        util::write_u64(w, seg.len as u64)?;
        let mut buf = Vec::with_capacity(seg.len * 4);
        for &v in &params.values[seg.offset..seg.offset + seg.len] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub(crate) fn read_segments<R: Read>(r: &mut R) -> Result<(Vec<Segment>, Vec<f64>)> {
    let count = util::read_u32(r)? as usize;
    let mut segments = Vec::with_capacity(count);
    let mut values = Vec::new();
    for _ in 0..count {
        let name_len = util::read_u16(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Format("truncated segment name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("segment name is not UTF-8".into()))?;
        let len = usize::try_from(util::read_u64(r)?)
            .map_err(|_| Error::Format("segment too large".into()))?;
        let mut raw = vec![0u8; len.checked_mul(4).ok_or_else(|| Error::Format("segment too large".into()))?];
        r.read_exact(&mut raw)
            .map_err(|_| Error::Format(format!("truncated segment {name}")))?;
        segments.push(Segment {
            name,
            offset: values.len(),
            len,
        });
        values.extend(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64),
        );
    }
    Ok((segments, values))
}
