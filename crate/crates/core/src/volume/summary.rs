//! On-disk posterior summaries for the group stage.
//!
//! A summary is a directory holding `manifest.json`, `payload.bin` and
//! `index.bin`. The payload is a sequence of little-endian `f64` voxel
//! records in ascending voxel order:
//!
//! ```text
//! index, q, then for t = 1..=T:  n_t, m_t (p x q, row-major), diag(C_t) (p), S_t (packed upper triangle, row-major)
//! ```
//!
//! `index.bin` holds one `(u64 voxel index, u64 byte offset)` pair per record.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::design::DesignMatrix;
use crate::dlm::{ModelConfig, PosteriorSequence};
use crate::error::{Error, Result};

pub const SUMMARY_FORMAT: &str = "mvdlm-summary";
pub const SUMMARY_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const PAYLOAD: &str = "payload.bin";
const INDEX: &str = "index.bin";

/// Everything about a subject fit except the per-voxel numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryMeta {
    pub format: String,
    pub version: u32,
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub n_scans: usize,
    pub tr: f64,
    pub task_names: Vec<String>,
    /// Squared neighborhood radius.
    pub radius: u32,
    pub config: ModelConfig,
    pub standardize: bool,
    /// Design rows, `T x p`.
    pub design: Vec<Vec<f64>>,
    pub design_hash: String,
    pub n_voxels: usize,
    pub payload_bytes: u64,
    pub payload_sha256: String,
}

impl SummaryMeta {
    /// Metadata for a fit; counts and checksums are filled in on write.
    pub fn new(
        dims: [usize; 3],
        voxel_size: [f64; 3],
        design: &DesignMatrix,
        radius: u32,
        config: &ModelConfig,
        standardize: bool,
    ) -> Self {
        Self {
            format: SUMMARY_FORMAT.into(),
            version: SUMMARY_VERSION,
            dims,
            voxel_size,
            n_scans: design.n_scans(),
            tr: design.tr,
            task_names: design.task_names.clone(),
            radius,
            config: config.clone(),
            standardize,
            design: (0..design.n_scans()).map(|t| design.row(t)).collect(),
            design_hash: design.content_hash(),
            n_voxels: 0,
            payload_bytes: 0,
            payload_sha256: String::new(),
        }
    }

    pub fn p(&self) -> usize {
        self.task_names.len()
    }

    pub fn design_matrix(&self) -> Result<DesignMatrix> {
        let t = self.design.len();
        let p = self.p();
        if self.design.iter().any(|r| r.len() != p) {
            return Err(Error::Integrity(
                "stored design rows have inconsistent widths".into(),
            ));
        }
        let flat: Vec<f64> = self.design.iter().flatten().copied().collect();
        DesignMatrix::new(
            DMatrix::from_row_slice(t, p, &flat),
            self.tr,
            self.task_names.clone(),
        )
    }

    fn record_len(&self, q: usize) -> usize {
        let p = self.p();
        2 + self.n_scans * (1 + p * q + p + q * (q + 1) / 2)
    }
}

/// Posterior quantities at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSummary {
    pub n: f64,
    /// `p x q`.
    pub m: DMatrix<f64>,
    /// Diagonal of the left scale.
    pub c_diag: Vec<f64>,
    /// `q x q`.
    pub s: DMatrix<f64>,
}

/// Filtered posteriors of one voxel at `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSummary {
    pub index: usize,
    pub q: usize,
    pub times: Vec<TimeSummary>,
}

impl VoxelSummary {
    pub fn from_sequence(index: usize, seq: &PosteriorSequence) -> Self {
        let times = seq.states[1..]
            .iter()
            .map(|st| TimeSummary {
                n: st.n,
                m: st.m.clone(),
                c_diag: st.c.diagonal().iter().copied().collect(),
                s: st.s.clone(),
            })
            .collect();
        Self {
            index,
            q: seq.q(),
            times,
        }
    }

    /// Summary at 1-based time `t`.
    pub fn at(&self, t: usize) -> &TimeSummary {
        &self.times[t - 1]
    }

    fn encode(&self, out: &mut Vec<f64>) {
        out.push(self.index as f64);
        out.push(self.q as f64);
        for ts in &self.times {
            out.push(ts.n);
            for i in 0..ts.m.nrows() {
                out.extend(ts.m.row(i).iter());
            }
            out.extend_from_slice(&ts.c_diag);
            for i in 0..self.q {
                for j in i..self.q {
                    out.push(ts.s[(i, j)]);
                }
            }
        }
    }

    fn decode(rec: &[f64], meta: &SummaryMeta, q: usize) -> Self {
        let p = meta.p();
        let mut it = rec[2..].iter().copied();
        let mut take = |k: usize| -> Vec<f64> { (&mut it).take(k).collect() };
        let times = (0..meta.n_scans)
            .map(|_| {
                let n = take(1)[0];
                let m = DMatrix::from_row_slice(p, q, &take(p * q));
                let c_diag = take(p);
                let packed = take(q * (q + 1) / 2);
                let mut s = DMatrix::zeros(q, q);
                let mut k = 0;
                for i in 0..q {
                    for j in i..q {
                        s[(i, j)] = packed[k];
                        s[(j, i)] = packed[k];
                        k += 1;
                    }
                }
                TimeSummary { n, m, c_diag, s }
            })
            .collect();
        Self {
            index: rec[0] as usize,
            q,
            times,
        }
    }
}

/// Destination for voxel summaries produced in ascending voxel order.
pub trait SummarySink {
    fn push(&mut self, voxel: VoxelSummary) -> Result<()>;
}

impl SummarySink for Vec<VoxelSummary> {
    fn push(&mut self, voxel: VoxelSummary) -> Result<()> {
        Vec::push(self, voxel);
        Ok(())
    }
}

/// A subject summary held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSummary {
    pub meta: SummaryMeta,
    pub voxels: Vec<VoxelSummary>,
}

/// Streams voxel records to a summary directory.
pub struct SummaryWriter {
    dir: PathBuf,
    meta: SummaryMeta,
    payload: BufWriter<File>,
    index: BufWriter<File>,
    hasher: Sha256,
    bytes: u64,
    last_index: Option<usize>,
    buf: Vec<f64>,
}

impl SummaryWriter {
    pub fn create(dir: impl AsRef<Path>, meta: SummaryMeta) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p)
                .map(BufWriter::new)
                .map_err(|e| Error::io(p, e))
        };
        Ok(Self {
            payload: open(PAYLOAD)?,
            index: open(INDEX)?,
            dir,
            meta,
            hasher: Sha256::new(),
            bytes: 0,
            last_index: None,
            buf: Vec::new(),
        })
    }

    /// Flushes the payload and writes the manifest.
    pub fn finish(mut self) -> Result<SummaryMeta> {
        let payload_path = self.dir.join(PAYLOAD);
        self.payload
            .flush()
            .map_err(|e| Error::io(&payload_path, e))?;
        self.index
            .flush()
            .map_err(|e| Error::io(self.dir.join(INDEX), e))?;
        self.meta.payload_bytes = self.bytes;
        self.meta.payload_sha256 = hex::encode(self.hasher.finalize());
        let path = self.dir.join(MANIFEST);
        let json = serde_json::to_vec_pretty(&self.meta)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(self.meta)
    }
}

impl SummarySink for SummaryWriter {
    fn push(&mut self, voxel: VoxelSummary) -> Result<()> {
        if self.last_index.is_some_and(|last| voxel.index <= last) {
            return Err(Error::Parameter(format!(
                "voxel {} written out of ascending order",
                voxel.index
            )));
        }
        if voxel.times.len() != self.meta.n_scans {
            return Err(Error::Parameter(format!(
                "voxel {} has {} time points, expected {}",
                voxel.index,
                voxel.times.len(),
                self.meta.n_scans
            )));
        }
        self.buf.clear();
        voxel.encode(&mut self.buf);
        let mut raw = Vec::with_capacity(8 * self.buf.len());
        for v in &self.buf {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        let mut entry = [0u8; 16];
        entry[..8].copy_from_slice(&(voxel.index as u64).to_le_bytes());
        entry[8..].copy_from_slice(&self.bytes.to_le_bytes());
        self.index
            .write_all(&entry)
            .map_err(|e| Error::io(self.dir.join(INDEX), e))?;
        self.payload
            .write_all(&raw)
            .map_err(|e| Error::io(self.dir.join(PAYLOAD), e))?;
        self.hasher.update(&raw);
        self.bytes += raw.len() as u64;
        self.meta.n_voxels += 1;
        self.last_index = Some(voxel.index);
        Ok(())
    }
}

/// Sequential reader over a summary directory.
pub struct SummaryReader {
    dir: PathBuf,
    pub meta: SummaryMeta,
    payload: BufReader<File>,
    index: Vec<(u64, u64)>,
    next: usize,
    offset: u64,
}

fn read_manifest(dir: &Path) -> Result<SummaryMeta> {
    let path = dir.join(MANIFEST);
    let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let meta: SummaryMeta = serde_json::from_slice(&raw)
        .map_err(|e| Error::format(&path, format!("bad manifest: {e}")))?;
    if meta.format != SUMMARY_FORMAT {
        return Err(Error::format(
            &path,
            format!("not a summary manifest (format '{}')", meta.format),
        ));
    }
    if meta.version != SUMMARY_VERSION {
        return Err(Error::format(
            &path,
            format!(
                "summary version {} is not supported (expected {SUMMARY_VERSION})",
                meta.version
            ),
        ));
    }
    Ok(meta)
}

impl SummaryReader {
    /// Opens a summary and verifies the payload length and checksum.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let meta = read_manifest(&dir)?;
        let payload_path = dir.join(PAYLOAD);
        let len = std::fs::metadata(&payload_path)
            .map_err(|e| Error::io(&payload_path, e))?
            .len();
        if len != meta.payload_bytes {
            return Err(Error::Integrity(format!(
                "{}: payload holds {len} bytes but the manifest records {}",
                dir.display(),
                meta.payload_bytes
            )));
        }
        let mut hasher = Sha256::new();
        let mut f = File::open(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
        let mut chunk = vec![0u8; 1 << 16];
        loop {
            let k = f
                .read(&mut chunk)
                .map_err(|e| Error::io(&payload_path, e))?;
            if k == 0 {
                break;
            }
            hasher.update(&chunk[..k]);
        }
        if hex::encode(hasher.finalize()) != meta.payload_sha256 {
            return Err(Error::Integrity(format!(
                "{}: payload checksum mismatch",
                dir.display()
            )));
        }
        let index_path = dir.join(INDEX);
        let raw = std::fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
        if raw.len() != 16 * meta.n_voxels {
            return Err(Error::Integrity(format!(
                "{}: index lists {} records but the manifest records {}",
                dir.display(),
                raw.len() / 16,
                meta.n_voxels
            )));
        }
        let index = raw
            .chunks_exact(16)
            .map(|c| {
                (
                    u64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                    u64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
                )
            })
            .collect();
        let payload =
            BufReader::new(File::open(&payload_path).map_err(|e| Error::io(&payload_path, e))?);
        Ok(Self {
            dir,
            meta,
            payload,
            index,
            next: 0,
            offset: 0,
        })
    }

    /// Voxel indices in file order.
    pub fn voxel_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.index.iter().map(|&(v, _)| v as usize)
    }

    /// Reads the next record, or `None` after the last one.
    pub fn next_voxel(&mut self) -> Result<Option<VoxelSummary>> {
        if self.next >= self.meta.n_voxels {
            return Ok(None);
        }
        let path = self.dir.join(PAYLOAD);
        let corrupt = |msg: String| Error::Integrity(format!("{}: {msg}", path.display()));
        let (expected_index, expected_offset) = self.index[self.next];
        if expected_offset != self.offset {
            return Err(corrupt(format!(
                "record {} is not at its indexed offset",
                self.next
            )));
        }
        let mut head = [0u8; 16];
        self.payload
            .read_exact(&mut head)
            .map_err(|e| Error::io(&path, e))?;
        let index = f64::from_le_bytes(head[..8].try_into().expect("8 bytes"));
        let q = f64::from_le_bytes(head[8..].try_into().expect("8 bytes"));
        if index != expected_index as f64 || !(1.0..=64.0).contains(&q) || q.fract() != 0.0 {
            return Err(corrupt(format!("malformed header in record {}", self.next)));
        }
        let q = q as usize;
        let len = self.meta.record_len(q);
        let mut raw = vec![0u8; 8 * (len - 2)];
        self.payload
            .read_exact(&mut raw)
            .map_err(|e| Error::io(&path, e))?;
        let mut rec = Vec::with_capacity(len);
        rec.push(index);
        rec.push(q as f64);
        rec.extend(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))),
        );
        self.offset += 8 * len as u64;
        self.next += 1;
        Ok(Some(VoxelSummary::decode(&rec, &self.meta, q)))
    }
}

/// Writes `s` to the directory `path`.
pub fn save_summary(s: &SubjectSummary, path: impl AsRef<Path>) -> Result<SummaryMeta> {
    let mut meta = s.meta.clone();
    meta.n_voxels = 0;
    let mut w = SummaryWriter::create(path, meta)?;
    for v in &s.voxels {
        w.push(v.clone())?;
    }
    w.finish()
}

/// Reads a whole summary directory into memory.
pub fn load_summary(path: impl AsRef<Path>) -> Result<SubjectSummary> {
    let mut r = SummaryReader::open(path)?;
    let mut voxels = Vec::with_capacity(r.meta.n_voxels);
    while let Some(v) = r.next_voxel()? {
        voxels.push(v);
    }
    Ok(SubjectSummary {
        meta: r.meta,
        voxels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dlm::run_filter;

    fn sample() -> SubjectSummary {
        let t = 12;
        let x = DMatrix::from_fn(t, 2, |i, j| ((i + 3 * j) as f64 * 0.7).sin());
        let design = DesignMatrix::new(x, 2.0, vec!["a".into(), "b".into()]).unwrap();
        let cfg = ModelConfig::new(2).with_burn_in(3);
        let meta = SummaryMeta::new([3, 3, 1], [2.0; 3], &design, 1, &cfg, true);
        let voxels = [(1usize, 3usize), (4, 1), (7, 2)]
            .iter()
            .map(|&(index, q)| {
                let y = DMatrix::from_fn(t, q, |i, j| ((i * (j + 2) + index) as f64 * 0.31).cos());
                VoxelSummary::from_sequence(index, &run_filter(&y, &design, &cfg).unwrap())
            })
            .collect();
        SubjectSummary { meta, voxels }
    }

    #[test]
    fn roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample();
        let path = dir.path().join("sub.mvdlm");
        save_summary(&s, &path).unwrap();
        let back = load_summary(&path).unwrap();
        assert_eq!(back.voxels, s.voxels);
        assert_eq!(back.meta.n_voxels, 3);
        assert_eq!(back.meta.design_hash, s.meta.design_hash);
        assert_eq!(
            back.meta.design_matrix().unwrap().content_hash(),
            s.meta.design_hash
        );
    }

    #[test]
    fn tampered_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub.mvdlm");
        save_summary(&sample(), &path).unwrap();
        let payload = path.join(PAYLOAD);
        let mut raw = std::fs::read(&payload).unwrap();
        raw[100] ^= 1;
        std::fs::write(&payload, &raw).unwrap();
        assert!(matches!(load_summary(&path), Err(Error::Integrity(_))));
        raw.truncate(64);
        std::fs::write(&payload, &raw).unwrap();
        assert!(matches!(load_summary(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn manifest_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub.mvdlm");
        let meta = save_summary(&sample(), &path).unwrap();
        let mut bad = meta.clone();
        bad.n_voxels = 2;
        std::fs::write(path.join(MANIFEST), serde_json::to_vec(&bad).unwrap()).unwrap();
        assert!(matches!(load_summary(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub.mvdlm");
        let mut meta = save_summary(&sample(), &path).unwrap();
        meta.version = 99;
        std::fs::write(path.join(MANIFEST), serde_json::to_vec(&meta).unwrap()).unwrap();
        let err = load_summary(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn out_of_order_voxels_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample();
        let mut w = SummaryWriter::create(dir.path().join("x"), s.meta.clone()).unwrap();
        w.push(s.voxels[1].clone()).unwrap();
        assert!(w.push(s.voxels[0].clone()).is_err());
    }
}
