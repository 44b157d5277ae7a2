//! Project raw format, all little-endian:
//!
//! | bytes | field                                     |
//! |-------|-------------------------------------------|
//! | 8     | magic `VOLRAW01`                          |
//! | 12    | extent, 3 x u32                           |
//! | 24    | spacing, 3 x f64                          |
//! | 6     | orientation: axes (3 x u8), flips (3 x u8)|
//! | 4n    | voxels as f32, x fastest                  |
//!
//! Voxels are stored in 32-bit precision; values that are not exactly
//! representable as f32 are rounded on write.

use super::{Grid3, Orientation, VolioError, Volume};

pub const RAW_MAGIC: &[u8; 8] = b"VOLRAW01";
const HEADER_LEN: usize = 8 + 12 + 24 + 6;

pub fn write_raw(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.grid.len());
    out.extend_from_slice(RAW_MAGIC);
    for &e in &v.extent() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &s in &v.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend(v.orientation.axes.iter().map(|&a| a as u8));
    out.extend(v.orientation.flips.iter().map(|&f| f as u8));
    for &x in &v.grid.data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn read_raw(bytes: &[u8]) -> Result<Volume, VolioError> {
    if bytes.len() < HEADER_LEN {
        return Err(VolioError::Truncated { needed: HEADER_LEN, available: bytes.len() });
    }
    if &bytes[..8] != RAW_MAGIC {
        return Err(VolioError::BadMagic { offset: 0, found: bytes[..8].to_vec() });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let extent = [u32_at(8), u32_at(12), u32_at(16)];
    let spacing = [f64_at(20), f64_at(28), f64_at(36)];
    let axes = [0, 1, 2].map(|i| bytes[44 + i] as usize);
    let mut flips = [false; 3];
    for i in 0..3 {
        flips[i] = match bytes[47 + i] {
            0 => false,
            1 => true,
            b => {
                return Err(VolioError::InvalidHeader {
                    offset: 47 + i,
                    reason: format!("flip flag {b} is not 0 or 1"),
                })
            }
        };
    }
    let orientation = Orientation::new(axes, flips).map_err(|_| VolioError::InvalidHeader {
        offset: 44,
        reason: format!("axes {axes:?} are not a permutation"),
    })?;

    let n = extent
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| VolioError::InvalidHeader { offset: 8, reason: format!("extent {extent:?} overflows") })?;
    let needed = n
        .checked_mul(4)
        .and_then(|p| p.checked_add(HEADER_LEN))
        .ok_or_else(|| VolioError::InvalidHeader { offset: 8, reason: format!("extent {extent:?} overflows") })?;
    if bytes.len() < needed {
        return Err(VolioError::Truncated { needed, available: bytes.len() });
    }
    let data =
        bytes[HEADER_LEN..needed].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Volume::new(Grid3::new(extent, data)?, spacing, orientation, "raw")
}
