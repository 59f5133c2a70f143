//! The "CEMB" binary vector format.
//!
//! Layout: 4 magic bytes `CEMB`, one version byte, then two 32-bit
//! little-endian unsigned integers (record count, vector dimension),
//! followed by one record per vector: a 32-bit little-endian unsigned
//! id and `dim` little-endian IEEE-754 floats.
//!
//! Version 1 stores 32-bit floats and is the interchange format for
//! imported text embeddings and exported conditioners. Version 2 stores
//! 64-bit floats and is used inside checkpoint directories, where
//! round-trips must preserve every bit of the training state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use thiserror::Error;

const MAGIC: [u8; 4] = *b"CEMB";

/// Payload width of a CEMB file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// Version 1: 32-bit floats.
    F32,
    /// Version 2: 64-bit floats.
    F64,
}

impl Precision {
    fn version(self) -> u8 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }
}

#[derive(Debug, Error)]
pub enum CembError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic bytes, not a CEMB file")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported CEMB version {version}")]
    UnsupportedVersion { path: PathBuf, version: u8 },
    #[error("{path}: file ends before record {record} is complete")]
    Truncated { path: PathBuf, record: usize },
    #[error("{path}: record {record} has id {id}, expected consecutive ids from 0")]
    NonSequentialId { path: PathBuf, record: usize, id: u32 },
}

fn io_err(path: &Path, source: std::io::Error) -> CembError {
    CembError::Io { path: path.to_path_buf(), source }
}

/// Writes `(id, vector)` records; every vector must have length `dim`.
pub fn write_vectors(
    path: &Path,
    dim: usize,
    records: &[(u32, Vec<f64>)],
    precision: Precision,
) -> Result<(), CembError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));
    put(&MAGIC)?;
    put(&[precision.version()])?;
    put(&(records.len() as u32).to_le_bytes())?;
    put(&(dim as u32).to_le_bytes())?;
    for (id, v) in records {
        assert_eq!(v.len(), dim, "record {id} has length {}, expected {dim}", v.len());
        put(&id.to_le_bytes())?;
        for &x in v {
            match precision {
                Precision::F32 => put(&(x as f32).to_le_bytes())?,
                Precision::F64 => put(&x.to_le_bytes())?,
            }
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads back all records of a CEMB file in file order.
pub fn read_vectors(path: &Path) -> Result<(Precision, usize, Vec<(u32, Vec<f64>)>), CembError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut head = [0u8; 13];
    r.read_exact(&mut head)
        .map_err(|_| CembError::Truncated { path: path.to_path_buf(), record: 0 })?;
    if head[..4] != MAGIC {
        return Err(CembError::BadMagic { path: path.to_path_buf() });
    }
    let precision = match head[4] {
        1 => Precision::F32,
        2 => Precision::F64,
        version => {
            return Err(CembError::UnsupportedVersion { path: path.to_path_buf(), version })
        }
    };
    let count = u32::from_le_bytes(head[5..9].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(head[9..13].try_into().unwrap()) as usize;

    let width = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut records = Vec::with_capacity(count);
    let mut buf = vec![0u8; 4 + dim * width];
    for record in 0..count {
        r.read_exact(&mut buf)
            .map_err(|_| CembError::Truncated { path: path.to_path_buf(), record })?;
        let id = u32::from_le_bytes(buf[..4].try_into().unwrap());
        let mut v = Vec::with_capacity(dim);
        for j in 0..dim {
            let at = 4 + j * width;
            let x = match precision {
                Precision::F32 => {
                    f32::from_le_bytes(buf[at..at + 4].try_into().unwrap()) as f64
                }
                Precision::F64 => f64::from_le_bytes(buf[at..at + 8].try_into().unwrap()),
            };
            v.push(x);
        }
        records.push((id, v));
    }
    Ok((precision, dim, records))
}

/// Writes a dense matrix as records with ids 0..rows.
pub fn write_table(path: &Path, table: &Array2<f64>, precision: Precision) -> Result<(), CembError> {
    let records: Vec<(u32, Vec<f64>)> = table
        .outer_iter()
        .enumerate()
        .map(|(i, row)| (i as u32, row.to_vec()))
        .collect();
    write_vectors(path, table.ncols(), &records, precision)
}

/// Reads a matrix written by [`write_table`]; ids must be 0..rows in order.
pub fn read_table(path: &Path) -> Result<Array2<f64>, CembError> {
    let (_, dim, records) = read_vectors(path)?;
    let mut flat = Vec::with_capacity(records.len() * dim);
    for (record, (id, v)) in records.iter().enumerate() {
        if *id as usize != record {
            return Err(CembError::NonSequentialId {
                path: path.to_path_buf(),
                record,
                id: *id,
            });
        }
        flat.extend_from_slice(v);
    }
    let rows = records.len();
    Ok(Array2::from_shape_vec((rows, dim), flat).expect("shape follows from construction"))
}
