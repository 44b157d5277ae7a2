//! Volume ingestion: NIfTI-1 and raw readers/writers, canonical
//! preprocessing, and synthetic phantoms with known labels.

mod nifti;
mod phantom;
mod preprocess;
mod raw;

use std::fmt;

pub use nifti::{read_nifti, read_nifti_pair, write_nifti, write_nifti_as, Endian, Nifti1Header, NiftiDatatype};
pub use phantom::{generate_phantom, Phantom, PhantomSpec, PhantomTruth};
pub use preprocess::{crop_or_pad, preprocess, reorient_to_ras, resample_isotropic, scale_min_max};
pub use raw::{read_raw, write_raw, RAW_MAGIC};

#[derive(Debug, thiserror::Error)]
pub enum VolioError {
    #[error("bad magic {found:?} at byte offset {offset}")]
    BadMagic { offset: usize, found: Vec<u8> },
    #[error("sizeof_hdr is {found} at byte offset 0, expected 348")]
    HeaderSize { found: i32 },
    #[error("unsupported datatype code {code} at byte offset 70")]
    UnsupportedDatatype { code: i16 },
    #[error("truncated input: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("invalid header field at byte offset {offset}: {reason}")]
    InvalidHeader { offset: usize, reason: String },
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("invalid extent: {0}")]
    Extent(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense 3-D grid, x fastest: index = x + nx * (y + ny * z).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T = f64> {
    pub extent: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Copy + Default> Grid3<T> {
    pub fn new(extent: [usize; 3], data: Vec<T>) -> Result<Self, VolioError> {
        let n: usize = extent.iter().product();
        if n != data.len() {
            return Err(VolioError::Extent(format!("{extent:?} needs {n} voxels, got {}", data.len())));
        }
        Ok(Self { extent, data })
    }

    pub fn filled(extent: [usize; 3], value: T) -> Self {
        Self { extent, data: vec![value; extent.iter().product()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        crate::interp::flat_index(self.extent, x, y, z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    /// Copy of the box starting at `origin` with extent `size`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self, VolioError> {
        for a in 0..3 {
            if origin[a] + size[a] > self.extent[a] {
                return Err(VolioError::Extent(format!("crop {origin:?}+{size:?} exceeds extent {:?}", self.extent)));
            }
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for z in 0..size[2] {
            for y in 0..size[1] {
                let start = self.index(origin[0], origin[1] + y, origin[2] + z);
                data.extend_from_slice(&self.data[start..start + size[0]]);
            }
        }
        Ok(Self { extent: size, data })
    }

    /// Mirror along the axes whose flag is set.
    pub fn flipped(&self, flips: [bool; 3]) -> Self {
        if !flips.iter().any(|&f| f) {
            return self.clone();
        }
        let [nx, ny, nz] = self.extent;
        let pick = |i: usize, n: usize, f: bool| if f { n - 1 - i } else { i };
        let mut data = Vec::with_capacity(self.data.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(self.get(pick(x, nx, flips[0]), pick(y, ny, flips[1]), pick(z, nz, flips[2])));
                }
            }
        }
        Self { extent: self.extent, data }
    }
}

impl Grid3<f64> {
    /// Trilinear resize to `to` (cell-centre aligned, clamped edges).
    /// Equal extents return an exact copy.
    pub fn resized(&self, to: [usize; 3]) -> Self {
        if to == self.extent {
            return self.clone();
        }
        let scale = [0, 1, 2].map(|a| self.extent[a] as f64 / to[a] as f64);
        self.resampled(to, scale)
    }

    /// Trilinear resampling with explicit per-axis source step.
    pub fn resampled(&self, to: [usize; 3], scale: [f64; 3]) -> Self {
        let mut data = vec![0.0; to.iter().product()];
        crate::interp::for_each_trilinear(self.extent, to, scale, |o, src, w| {
            data[o] += w * self.data[src];
        });
        Self { extent: to, data }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Map from data axes to world axes relative to RAS+.
///
/// Data axis `i` runs along world axis `axes[i]` (0 = R, 1 = A, 2 = S),
/// towards the negative direction (L, P, I) when `flips[i]` is set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Orientation {
    pub axes: [usize; 3],
    pub flips: [bool; 3],
}

impl Orientation {
    pub const RAS: Self = Self { axes: [0, 1, 2], flips: [false; 3] };

    pub fn new(axes: [usize; 3], flips: [bool; 3]) -> Result<Self, VolioError> {
        let mut seen = [false; 3];
        for &a in &axes {
            if a > 2 || seen[a] {
                return Err(VolioError::InvalidHeader {
                    offset: 280,
                    reason: format!("axes {axes:?} are not a permutation"),
                });
            }
            seen[a] = true;
        }
        Ok(Self { axes, flips })
    }

    pub fn is_ras(&self) -> bool {
        *self == Self::RAS
    }

    /// Three-letter code such as "RAS" or "LPI".
    pub fn code(&self) -> String {
        const POS: [char; 3] = ['R', 'A', 'S'];
        const NEG: [char; 3] = ['L', 'P', 'I'];
        (0..3).map(|i| if self.flips[i] { NEG[self.axes[i]] } else { POS[self.axes[i]] }).collect()
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

/// A scalar volume with physical metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub grid: Grid3<f64>,
    /// Millimetres per voxel along each data axis; all positive.
    pub spacing: [f64; 3],
    pub orientation: Orientation,
    /// Source path or generator description.
    pub provenance: String,
}

impl Volume {
    pub fn new(
        grid: Grid3<f64>,
        spacing: [f64; 3],
        orientation: Orientation,
        provenance: impl Into<String>,
    ) -> Result<Self, VolioError> {
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VolioError::InvalidHeader {
                offset: 76,
                reason: format!("spacing {spacing:?} must be positive"),
            });
        }
        Ok(Self { grid, spacing, orientation, provenance: provenance.into() })
    }

    pub fn extent(&self) -> [usize; 3] {
        self.grid.extent
    }
}

/// Integer label map (0 = background).
pub type LabelGrid = Grid3<u8>;
