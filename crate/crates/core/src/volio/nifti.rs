//! Minimal NIfTI-1 single-file (`n+1`) and pair (`ni1`) support.

use super::{Grid3, Orientation, VolioError, Volume};

pub const HEADER_SIZE: usize = 348;
const SINGLE_FILE_OFFSET: usize = 352;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NiftiDatatype {
    U8,
    I16,
    F32,
    F64,
}

impl NiftiDatatype {
    pub fn code(self) -> i16 {
        match self {
            Self::U8 => 2,
            Self::I16 => 4,
            Self::F32 => 16,
            Self::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self, VolioError> {
        Ok(match code {
            2 => Self::U8,
            4 => Self::I16,
            16 => Self::F32,
            64 => Self::F64,
            _ => return Err(VolioError::UnsupportedDatatype { code }),
        })
    }

    pub fn bytes(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::I16 => 2,
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

/// The header fields this reader interprets; the rest are written as zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Nifti1Header {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: String,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn take<const N: usize>(&self, offset: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[offset..offset + N]);
        b
    }

    fn i16(&self, offset: usize) -> i16 {
        let b = self.take::<2>(offset);
        match self.endian {
            Endian::Little => i16::from_le_bytes(b),
            Endian::Big => i16::from_be_bytes(b),
        }
    }

    fn i32(&self, offset: usize) -> i32 {
        let b = self.take::<4>(offset);
        match self.endian {
            Endian::Little => i32::from_le_bytes(b),
            Endian::Big => i32::from_be_bytes(b),
        }
    }

    fn f32(&self, offset: usize) -> f32 {
        let b = self.take::<4>(offset);
        match self.endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        }
    }

    fn f64(&self, offset: usize) -> f64 {
        let b = self.take::<8>(offset);
        match self.endian {
            Endian::Little => f64::from_le_bytes(b),
            Endian::Big => f64::from_be_bytes(b),
        }
    }
}

impl Nifti1Header {
    /// Parse and validate the first 348 bytes.
    pub fn parse(bytes: &[u8]) -> Result<(Self, Endian), VolioError> {
        if bytes.len() < HEADER_SIZE {
            return Err(VolioError::Truncated { needed: HEADER_SIZE, available: bytes.len() });
        }
        let raw = [bytes[0], bytes[1], bytes[2], bytes[3]];
        let endian = if i32::from_le_bytes(raw) == HEADER_SIZE as i32 {
            Endian::Little
        } else if i32::from_be_bytes(raw) == HEADER_SIZE as i32 {
            Endian::Big
        } else {
            return Err(VolioError::HeaderSize { found: i32::from_le_bytes(raw) });
        };
        let r = Reader { bytes, endian };

        let magic = r.take::<4>(344);
        if &magic != b"n+1\0" && &magic != b"ni1\0" {
            return Err(VolioError::BadMagic { offset: 344, found: magic.to_vec() });
        }
        let dim: [i16; 8] = std::array::from_fn(|i| r.i16(40 + 2 * i));
        if !(1..=7).contains(&dim[0]) {
            return Err(VolioError::InvalidHeader { offset: 40, reason: format!("dim[0] = {} not in [1, 7]", dim[0]) });
        }
        let descrip_raw = &bytes[148..228];
        let end = descrip_raw.iter().position(|&b| b == 0).unwrap_or(descrip_raw.len());
        let header = Self {
            sizeof_hdr: r.i32(0),
            dim,
            datatype: r.i16(70),
            bitpix: r.i16(72),
            pixdim: std::array::from_fn(|i| r.f32(76 + 4 * i)),
            vox_offset: r.f32(108),
            scl_slope: r.f32(112),
            scl_inter: r.f32(116),
            xyzt_units: bytes[123],
            descrip: String::from_utf8_lossy(&descrip_raw[..end]).into_owned(),
            qform_code: r.i16(252),
            sform_code: r.i16(254),
            quatern: std::array::from_fn(|i| r.f32(256 + 4 * i)),
            qoffset: std::array::from_fn(|i| r.f32(268 + 4 * i)),
            srow: std::array::from_fn(|row| std::array::from_fn(|c| r.f32(280 + 16 * row + 4 * c))),
            magic,
        };
        Ok((header, endian))
    }

    pub fn is_single_file(&self) -> bool {
        &self.magic == b"n+1\0"
    }

    /// Spatial extent; axes beyond the third must be singleton.
    pub fn extent(&self) -> Result<[usize; 3], VolioError> {
        let n = self.dim[0] as usize;
        let mut extent = [1usize; 3];
        for i in 1..=n {
            let d = self.dim[i];
            if d < 1 {
                return Err(VolioError::InvalidHeader { offset: 40 + 2 * i, reason: format!("dim[{i}] = {d}") });
            }
            if i <= 3 {
                extent[i - 1] = d as usize;
            } else if d != 1 {
                return Err(VolioError::InvalidHeader {
                    offset: 40 + 2 * i,
                    reason: format!("only single 3-D volumes are supported, dim[{i}] = {d}"),
                });
            }
        }
        Ok(extent)
    }

    pub fn spacing(&self) -> Result<[f64; 3], VolioError> {
        let extent = self.extent()?;
        let mut spacing = [1.0; 3];
        for a in 0..3 {
            let p = self.pixdim[a + 1].abs() as f64;
            if (a as i16) < self.dim[0] && !(p > 0.0 && p.is_finite()) {
                return Err(VolioError::InvalidHeader {
                    offset: 80 + 4 * a,
                    reason: format!("pixdim[{}] = {p} for extent {extent:?}", a + 1),
                });
            }
            if p > 0.0 && p.is_finite() {
                spacing[a] = p;
            }
        }
        Ok(spacing)
    }

    /// Axis orientation from the sform when present, else the qform, else RAS.
    pub fn orientation(&self) -> Result<Orientation, VolioError> {
        if self.sform_code > 0 {
            let m: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| self.srow[i][j] as f64));
            return orientation_from_matrix(&m, 280);
        }
        if self.qform_code > 0 {
            let [b, c, d] = self.quatern.map(f64::from);
            let norm2 = b * b + c * c + d * d;
            if norm2 > 1.0 + 1e-6 {
                return Err(VolioError::InvalidHeader {
                    offset: 256,
                    reason: format!("quaternion (b, c, d) = ({b}, {c}, {d}) is not a unit quaternion"),
                });
            }
            let a = (1.0 - norm2).max(0.0).sqrt();
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let m = [
                [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c) * qfac],
                [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b) * qfac],
                [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), (a * a + d * d - c * c - b * b) * qfac],
            ];
            return orientation_from_matrix(&m, 256);
        }
        Ok(Orientation::RAS)
    }

    /// Serialize as 348 little-endian bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; HEADER_SIZE];
        let mut put = |offset: usize, bytes: &[u8]| out[offset..offset + bytes.len()].copy_from_slice(bytes);
        put(0, &self.sizeof_hdr.to_le_bytes());
        put(38, b"r");
        for (i, d) in self.dim.iter().enumerate() {
            put(40 + 2 * i, &d.to_le_bytes());
        }
        put(70, &self.datatype.to_le_bytes());
        put(72, &self.bitpix.to_le_bytes());
        for (i, p) in self.pixdim.iter().enumerate() {
            put(76 + 4 * i, &p.to_le_bytes());
        }
        put(108, &self.vox_offset.to_le_bytes());
        put(112, &self.scl_slope.to_le_bytes());
        put(116, &self.scl_inter.to_le_bytes());
        put(123, &[self.xyzt_units]);
        let descrip = self.descrip.as_bytes();
        put(148, &descrip[..descrip.len().min(79)]);
        put(252, &self.qform_code.to_le_bytes());
        put(254, &self.sform_code.to_le_bytes());
        for i in 0..3 {
            put(256 + 4 * i, &self.quatern[i].to_le_bytes());
            put(268 + 4 * i, &self.qoffset[i].to_le_bytes());
        }
        for (row, vals) in self.srow.iter().enumerate() {
            for (c, v) in vals.iter().enumerate() {
                put(280 + 16 * row + 4 * c, &v.to_le_bytes());
            }
        }
        put(344, &self.magic);
        out
    }
}

fn orientation_from_matrix(m: &[[f64; 3]; 3], offset: usize) -> Result<Orientation, VolioError> {
    let mut axes = [0usize; 3];
    let mut flips = [false; 3];
    for j in 0..3 {
        let (world, value) = (0..3).map(|i| (i, m[i][j])).max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap();
        if value == 0.0 {
            return Err(VolioError::InvalidHeader { offset, reason: format!("voxel axis {j} has a zero direction") });
        }
        axes[j] = world;
        flips[j] = value < 0.0;
    }
    Orientation::new(axes, flips).map_err(|_| VolioError::InvalidHeader {
        offset,
        reason: format!("affine maps two voxel axes onto one world axis ({axes:?})"),
    })
}

fn decode_payload(header: &Nifti1Header, endian: Endian, payload: &[u8], n: usize) -> Result<Vec<f64>, VolioError> {
    let dtype = NiftiDatatype::from_code(header.datatype)?;
    let needed = n * dtype.bytes();
    if payload.len() < needed {
        return Err(VolioError::Truncated { needed, available: payload.len() });
    }
    let r = Reader { bytes: payload, endian };
    let mut data: Vec<f64> = (0..n)
        .map(|i| match dtype {
            NiftiDatatype::U8 => payload[i] as f64,
            NiftiDatatype::I16 => r.i16(2 * i) as f64,
            NiftiDatatype::F32 => r.f32(4 * i) as f64,
            NiftiDatatype::F64 => r.f64(8 * i),
        })
        .collect();
    let slope = header.scl_slope as f64;
    if slope != 0.0 && slope.is_finite() {
        let inter = header.scl_inter as f64;
        let inter = if inter.is_finite() { inter } else { 0.0 };
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Ok(data)
}

fn build_volume(header: &Nifti1Header, data: Vec<f64>) -> Result<Volume, VolioError> {
    let grid = Grid3::new(header.extent()?, data)?;
    let provenance = if header.descrip.is_empty() { "nifti".to_string() } else { header.descrip.clone() };
    Volume::new(grid, header.spacing()?, header.orientation()?, provenance)
}

/// Read a single-file (`n+1`) NIfTI-1 volume. Gzip is not handled here.
pub fn read_nifti(bytes: &[u8]) -> Result<Volume, VolioError> {
    let (header, endian) = Nifti1Header::parse(bytes)?;
    if !header.is_single_file() {
        return Err(VolioError::BadMagic { offset: 344, found: header.magic.to_vec() });
    }
    let offset = header.vox_offset;
    if !(offset.is_finite() && offset >= HEADER_SIZE as f32) {
        return Err(VolioError::InvalidHeader { offset: 108, reason: format!("vox_offset = {offset}") });
    }
    let start = offset as usize;
    let n: usize = header.extent()?.iter().product();
    let dtype = NiftiDatatype::from_code(header.datatype)?;
    let needed = start + n * dtype.bytes();
    if bytes.len() < needed {
        return Err(VolioError::Truncated { needed, available: bytes.len() });
    }
    let data = decode_payload(&header, endian, &bytes[start..needed], n)?;
    build_volume(&header, data)
}

/// Read a two-file (`ni1`) volume from its `.hdr` and `.img` contents.
pub fn read_nifti_pair(header_bytes: &[u8], image_bytes: &[u8]) -> Result<Volume, VolioError> {
    let (header, endian) = Nifti1Header::parse(header_bytes)?;
    let offset = header.vox_offset.max(0.0) as usize;
    if offset > image_bytes.len() {
        return Err(VolioError::Truncated { needed: offset, available: image_bytes.len() });
    }
    let n: usize = header.extent()?.iter().product();
    let data = decode_payload(&header, endian, &image_bytes[offset..], n)?;
    build_volume(&header, data)
}

/// Write a single-file NIfTI-1 volume with 64-bit float voxels.
pub fn write_nifti(v: &Volume) -> Vec<u8> {
    write_nifti_as(v, NiftiDatatype::F64)
}

/// Write with an explicit on-disk datatype. Integer types round and
/// saturate; spacing is stored as 32-bit floats, as the format requires.
pub fn write_nifti_as(v: &Volume, dtype: NiftiDatatype) -> Vec<u8> {
    let extent = v.extent();
    let mut dim = [1i16; 8];
    dim[0] = 3;
    for a in 0..3 {
        dim[a + 1] = extent[a] as i16;
    }
    let mut pixdim = [0f32; 8];
    pixdim[0] = 1.0;
    for a in 0..3 {
        pixdim[a + 1] = v.spacing[a] as f32;
    }
    let mut srow = [[0f32; 4]; 3];
    for j in 0..3 {
        let sign = if v.orientation.flips[j] { -1.0 } else { 1.0 };
        srow[v.orientation.axes[j]][j] = sign * v.spacing[j] as f32;
    }
    let header = Nifti1Header {
        sizeof_hdr: HEADER_SIZE as i32,
        dim,
        datatype: dtype.code(),
        bitpix: (dtype.bytes() * 8) as i16,
        pixdim,
        vox_offset: SINGLE_FILE_OFFSET as f32,
        scl_slope: 0.0,
        scl_inter: 0.0,
        xyzt_units: 2,
        descrip: v.provenance.clone(),
        qform_code: 0,
        sform_code: 1,
        quatern: [0.0; 3],
        qoffset: [0.0; 3],
        srow,
        magic: *b"n+1\0",
    };
    let mut out = header.to_bytes();
    out.extend_from_slice(&[0u8; SINGLE_FILE_OFFSET - HEADER_SIZE]);
    out.reserve(v.grid.len() * dtype.bytes());
    for &x in &v.grid.data {
        match dtype {
            NiftiDatatype::U8 => out.push(x.round().clamp(0.0, 255.0) as u8),
            NiftiDatatype::I16 => {
                out.extend_from_slice(&(x.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16).to_le_bytes())
            }
            NiftiDatatype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            NiftiDatatype::F64 => out.extend_from_slice(&x.to_le_bytes()),
        }
    }
    out
}
