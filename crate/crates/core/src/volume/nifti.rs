//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reading and float32 writing.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_CAL_MAX: usize = 124;
const OFF_CAL_MIN: usize = 128;
const OFF_QFORM_CODE: usize = 252;
const OFF_SFORM_CODE: usize = 254;
const OFF_SROW_X: usize = 280;
const OFF_MAGIC: usize = 344;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

const UNITS_MM: u8 = 2;
const UNITS_SEC: u8 = 8;
const UNITS_MSEC: u8 = 16;
const UNITS_USEC: u8 = 24;

/// Raw header plus the fields this crate interprets.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    raw: Vec<u8>,
    little_endian: bool,
}

impl NiftiHeader {
    /// Fresh little-endian header for a float32 image with the given voxel
    /// size (mm) and repetition time (s).
    pub fn new(voxel_size: [f64; 3], tr: f64) -> Self {
        let mut h = Self {
            raw: vec![0; HEADER_SIZE],
            little_endian: true,
        };
        h.put_i32(0, HEADER_SIZE as i32);
        h.raw[38] = b'r';
        let mut pixdim = [1.0f32; 8];
        for (i, v) in voxel_size.iter().enumerate() {
            pixdim[i + 1] = *v as f32;
        }
        pixdim[4] = tr as f32;
        for (i, v) in pixdim.iter().enumerate() {
            h.put_f32(OFF_PIXDIM + 4 * i, *v);
        }
        h.raw[OFF_XYZT_UNITS] = UNITS_MM | UNITS_SEC;
        h.put_i16(OFF_QFORM_CODE, 0);
        h.put_i16(OFF_SFORM_CODE, 1);
        for row in 0..3 {
            for col in 0..4 {
                let v = if row == col {
                    voxel_size[row] as f32
                } else {
                    0.0
                };
                h.put_f32(OFF_SROW_X + 16 * row + 4 * col, v);
            }
        }
        h.raw[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(b"n+1\0");
        h
    }

    fn parse(raw: &[u8], path: &Path) -> Result<Self> {
        if raw.len() < HEADER_SIZE {
            return Err(Error::format(
                path,
                format!("file is {} bytes, shorter than a NIfTI-1 header", raw.len()),
            ));
        }
        let size = [raw[0], raw[1], raw[2], raw[3]];
        let little_endian = if i32::from_le_bytes(size) == HEADER_SIZE as i32 {
            true
        } else if i32::from_be_bytes(size) == HEADER_SIZE as i32 {
            false
        } else {
            return Err(Error::format(
                path,
                "bad header size field, not a NIfTI-1 file",
            ));
        };
        let magic = &raw[OFF_MAGIC..OFF_MAGIC + 4];
        if magic == b"ni1\0" {
            return Err(Error::format(
                path,
                "split header/image NIfTI pairs are not supported",
            ));
        }
        if magic != b"n+1\0" {
            return Err(Error::format(
                path,
                format!("bad magic {magic:?}, expected \"n+1\""),
            ));
        }
        Ok(Self {
            raw: raw[..HEADER_SIZE].to_vec(),
            little_endian,
        })
    }

    fn get_i16(&self, off: usize) -> i16 {
        let b = [self.raw[off], self.raw[off + 1]];
        if self.little_endian {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    }

    fn get_f32(&self, off: usize) -> f32 {
        let b = [
            self.raw[off],
            self.raw[off + 1],
            self.raw[off + 2],
            self.raw[off + 3],
        ];
        if self.little_endian {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    }

    fn put_i16(&mut self, off: usize, v: i16) {
        let b = if self.little_endian {
            v.to_le_bytes()
        } else {
            v.to_be_bytes()
        };
        self.raw[off..off + 2].copy_from_slice(&b);
    }

    fn put_i32(&mut self, off: usize, v: i32) {
        let b = if self.little_endian {
            v.to_le_bytes()
        } else {
            v.to_be_bytes()
        };
        self.raw[off..off + 4].copy_from_slice(&b);
    }

    fn put_f32(&mut self, off: usize, v: f32) {
        let b = if self.little_endian {
            v.to_le_bytes()
        } else {
            v.to_be_bytes()
        };
        self.raw[off..off + 4].copy_from_slice(&b);
    }

    pub fn little_endian(&self) -> bool {
        self.little_endian
    }

    pub fn raw(&self) -> &[u8] {
        &self.raw
    }

    /// Image extents, `dim[1..=dim[0]]`.
    pub fn dims(&self) -> Vec<usize> {
        let n = self.get_i16(OFF_DIM).clamp(0, 7) as usize;
        (1..=n)
            .map(|i| self.get_i16(OFF_DIM + 2 * i).max(0) as usize)
            .collect()
    }

    pub fn datatype(&self) -> i16 {
        self.get_i16(OFF_DATATYPE)
    }

    pub fn pixdim(&self, i: usize) -> f64 {
        self.get_f32(OFF_PIXDIM + 4 * i) as f64
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        [self.pixdim(1), self.pixdim(2), self.pixdim(3)]
    }

    /// Repetition time in seconds, honoring the time unit code.
    pub fn tr(&self) -> f64 {
        let raw = self.pixdim(4);
        match self.raw[OFF_XYZT_UNITS] & 0x38 {
            UNITS_MSEC => raw / 1e3,
            UNITS_USEC => raw / 1e6,
            _ => raw,
        }
    }

    fn vox_offset(&self) -> f64 {
        self.get_f32(OFF_VOX_OFFSET) as f64
    }

    /// `(slope, intercept)`; a zero or non-finite slope means no scaling.
    pub fn scaling(&self) -> Option<(f64, f64)> {
        let slope = self.get_f32(OFF_SCL_SLOPE) as f64;
        let inter = self.get_f32(OFF_SCL_INTER) as f64;
        (slope != 0.0 && slope.is_finite())
            .then_some((slope, if inter.is_finite() { inter } else { 0.0 }))
    }

    /// Header for a float32 image of extent `dims`, keeping every other field.
    fn for_float32(&self, dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 7 {
            return Err(Error::Parameter(format!(
                "cannot write a {}-dimensional image",
                dims.len()
            )));
        }
        let mut h = self.clone();
        h.put_i16(OFF_DIM, dims.len() as i16);
        for i in 1..8 {
            let d = dims.get(i - 1).copied().unwrap_or(1);
            let d = i16::try_from(d)
                .map_err(|_| Error::Parameter(format!("extent {d} too large for NIfTI-1")))?;
            h.put_i16(OFF_DIM + 2 * i, d);
        }
        h.put_i16(OFF_DATATYPE, DT_FLOAT32);
        h.put_i16(OFF_BITPIX, 32);
        h.put_f32(OFF_VOX_OFFSET, DATA_OFFSET as f32);
        h.put_f32(OFF_SCL_SLOPE, 1.0);
        h.put_f32(OFF_SCL_INTER, 0.0);
        h.put_f32(OFF_CAL_MAX, 0.0);
        h.put_f32(OFF_CAL_MIN, 0.0);
        Ok(h)
    }
}

/// An image in file order (first index fastest), scaled to real values.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub header: NiftiHeader,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("corrupt gzip stream: {e}")))?;
        return Ok(out);
    }
    Ok(raw)
}

/// Reads a single-file NIfTI-1 image of up to four dimensions.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let header = NiftiHeader::parse(&bytes, path)?;
    let dims = header.dims();
    if dims.is_empty() {
        return Err(Error::format(path, "dim[0] is zero"));
    }
    if dims.iter().skip(4).any(|&d| d > 1) {
        return Err(Error::Unsupported(format!(
            "{}: images with more than four dimensions ({dims:?})",
            path.display()
        )));
    }
    let n: usize = dims.iter().product();
    let datatype = header.datatype();
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(Error::format(
                path,
                format!("unsupported datatype code {other}"),
            ))
        }
    };
    let offset = header.vox_offset();
    if !(offset >= HEADER_SIZE as f64) {
        return Err(Error::format(path, format!("invalid vox_offset {offset}")));
    }
    let offset = offset as usize;
    let need = n * width;
    let have = bytes.len().saturating_sub(offset);
    if have < need {
        return Err(Error::format(
            path,
            format!("truncated payload: expected {need} bytes of image data, found {have}"),
        ));
    }
    let payload = &bytes[offset..offset + need];
    let le = header.little_endian;
    let mut data: Vec<f64> = payload
        .chunks_exact(width)
        .map(|c| match datatype {
            DT_UINT8 => c[0] as f64,
            DT_INT8 => c[0] as i8 as f64,
            DT_INT16 => {
                let b = [c[0], c[1]];
                (if le {
                    i16::from_le_bytes(b)
                } else {
                    i16::from_be_bytes(b)
                }) as f64
            }
            DT_UINT16 => {
                let b = [c[0], c[1]];
                (if le {
                    u16::from_le_bytes(b)
                } else {
                    u16::from_be_bytes(b)
                }) as f64
            }
            DT_INT32 => {
                let b = [c[0], c[1], c[2], c[3]];
                (if le {
                    i32::from_le_bytes(b)
                } else {
                    i32::from_be_bytes(b)
                }) as f64
            }
            DT_FLOAT32 => {
                let b = [c[0], c[1], c[2], c[3]];
                (if le {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                }) as f64
            }
            _ => {
                let b: [u8; 8] = c.try_into().expect("chunk width is 8");
                if le {
                    f64::from_le_bytes(b)
                } else {
                    f64::from_be_bytes(b)
                }
            }
        })
        .collect();
    if let Some((slope, inter)) = header.scaling() {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Ok(NiftiImage { header, dims, data })
}

/// Writes `data` (file order) as float32 under `template`'s header. Paths
/// ending in `.gz` are gzip-compressed.
pub fn write_nifti(
    path: impl AsRef<Path>,
    dims: &[usize],
    data: &[f64],
    template: &NiftiHeader,
) -> Result<()> {
    let path = path.as_ref();
    let n: usize = dims.iter().product();
    if n != data.len() {
        return Err(Error::Parameter(format!(
            "image extent {dims:?} holds {n} values but {} were given",
            data.len()
        )));
    }
    let header = template.for_float32(dims)?;
    let le = header.little_endian;
    let mut bytes = Vec::with_capacity(DATA_OFFSET + 4 * n);
    bytes.extend_from_slice(&header.raw);
    bytes.extend_from_slice(&[0u8; DATA_OFFSET - HEADER_SIZE]);
    for &v in data {
        let v = v as f32;
        bytes.extend_from_slice(&if le { v.to_le_bytes() } else { v.to_be_bytes() });
    }
    let gz = path.extension().is_some_and(|e| e == "gz");
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let result = if gz {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&bytes).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut file = file;
        file.write_all(&bytes)
    };
    result.map_err(|e| Error::io(path, e))
}
