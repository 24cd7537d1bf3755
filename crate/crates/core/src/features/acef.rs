//! The `ACEF` dense feature container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "ACEF"
//! 4       4     version (u32 LE, = 1)
//! 8       1     dtype (u8, 0 = f32 LE)
//! 9       4     dim (u32 LE)
//! 13      8     row_count (u64 LE)
//! 21      ...   row_count × dim packed f32 LE values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Embedding;

pub const MAGIC: [u8; 4] = *b"ACEF";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub dim: u32,
    pub row_count: u64,
}

impl Header {
    pub fn payload_len(&self) -> u64 {
        4 * u64::from(self.dim) * self.row_count
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..8].copy_from_slice(&VERSION.to_le_bytes());
        out[8] = DTYPE_F32;
        out[9..13].copy_from_slice(&self.dim.to_le_bytes());
        out[13..21].copy_from_slice(&self.row_count.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::TruncatedFile {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedFile {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        if bytes[8] != DTYPE_F32 {
            return Err(Error::UnsupportedDtype(bytes[8]));
        }
        let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
        if dim == 0 {
            return Err(Error::DimMismatch {
                expected: 1,
                got: 0,
            });
        }
        let row_count = u64::from_le_bytes(bytes[13..21].try_into().unwrap());
        Ok(Self { dim, row_count })
    }
}

/// Row-major `f32` matrix as stored in an ACEF file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::ShapeMismatch(format!("unsupported dimension {dim}")));
        }
        if data.len() % dim != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} values do not divide into rows of {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new())
    }

    /// Builds a matrix from rows, which must all share one dimension.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyInput)?;
        let dim = first.as_ref().len();
        let mut m = Self::empty(dim)?;
        for r in rows {
            m.push_row(r.as_ref())?;
        }
        Ok(m)
    }

    /// Rounds `f64` rows to `f32` storage.
    pub fn from_f64_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let converted: Vec<Vec<f32>> = rows
            .iter()
            .map(|r| r.as_ref().iter().map(|&x| x as f32).collect())
            .collect();
        Self::from_rows(&converted)
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row_count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn embedding(&self, i: usize) -> Result<Embedding> {
        Embedding::from_f32(self.row(i))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn header(&self) -> Header {
        Header {
            dim: self.dim as u32,
            row_count: self.row_count() as u64,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&self.header().encode());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header = Header::decode(bytes)?;
        let expected = HEADER_LEN as u64 + header.payload_len();
        let found = bytes.len() as u64;
        if found < expected {
            return Err(Error::TruncatedFile { expected, found });
        }
        if found > expected {
            return Err(Error::TrailingBytes(found - expected));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(header.dim as usize, data)
    }
}

pub fn write_feature_file(path: impl AsRef<Path>, matrix: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&matrix.encode())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMatrix::decode(&bytes)
}

/// Sequential reader yielding fixed-size groups of rows.
///
/// The file length is checked against the header up front, so a reader that
/// opens successfully never hits a short read on a well-behaved filesystem.
pub struct RowGroupReader {
    path: PathBuf,
    reader: BufReader<File>,
    header: Header,
    group: usize,
    remaining_rows: u64,
    buf: Vec<u8>,
}

impl RowGroupReader {
    pub fn open(path: impl AsRef<Path>, group: usize) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if group == 0 {
            return Err(Error::ShapeMismatch("row group size must be positive".into()));
        }
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        let mut reader = BufReader::new(file);
        let mut head = [0u8; HEADER_LEN];
        let n = read_up_to(&mut reader, &mut head).map_err(|e| Error::io(&path, e))?;
        let header = Header::decode(&head[..n])?;
        let expected = HEADER_LEN as u64 + header.payload_len();
        if len < expected {
            return Err(Error::TruncatedFile {
                expected,
                found: len,
            });
        }
        if len > expected {
            return Err(Error::TrailingBytes(len - expected));
        }
        if header.row_count % group as u64 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} rows do not divide into groups of {group}",
                header.row_count
            )));
        }
        let buf = vec![0u8; 4 * header.dim as usize * group];
        Ok(Self {
            path,
            reader,
            header,
            group,
            remaining_rows: header.row_count,
            buf,
        })
    }

    pub fn header(&self) -> Header {
        self.header
    }

    pub fn group_count(&self) -> u64 {
        self.header.row_count / self.group as u64
    }

    /// Reads the next group as `f32` rows.
    pub fn next_group(&mut self) -> Result<Option<FeatureMatrix>> {
        if self.remaining_rows == 0 {
            return Ok(None);
        }
        self.reader
            .read_exact(&mut self.buf)
            .map_err(|e| Error::io(&self.path, e))?;
        self.remaining_rows -= self.group as u64;
        let data = self
            .buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FeatureMatrix::new(self.header.dim as usize, data).map(Some)
    }
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}
