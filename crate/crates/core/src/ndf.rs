//! NDF1 binary matrix container.
//!
//! Layout (little-endian): magic `NDF1`, u32 n_rows, u32 n_modalities,
//! u32 dim, then `n_rows * n_modalities * dim` float32 values row-major.
//! Feature matrices, observed-expression matrices, and cell baselines all
//! use this container; a plain matrix is stored with n_modalities = 1.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"NDF1";

#[derive(Debug, Error)]
pub enum NdfError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic, not an NDF1 file")]
    BadMagic { path: String },
    #[error("{path}: header declares {expect} values but payload holds {got}")]
    Truncated {
        path: String,
        expect: usize,
        got: usize,
    },
}

/// A dense matrix of shape [n_rows, n_modalities * dim].
#[derive(Debug, Clone, PartialEq)]
pub struct NdfMatrix {
    pub n_modalities: u32,
    pub dim: u32,
    pub values: Array2<f32>,
}

impl NdfMatrix {
    pub fn new(n_modalities: u32, dim: u32, values: Array2<f32>) -> Self {
        assert_eq!(values.ncols(), (n_modalities * dim) as usize);
        NdfMatrix {
            n_modalities,
            dim,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        (self.n_modalities * self.dim) as usize
    }
}

pub fn read(path: &Path) -> Result<NdfMatrix, NdfError> {
    let display = path.display().to_string();
    let io = |source| NdfError::Io {
        path: display.clone(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(NdfError::BadMagic { path: display });
    }
    let n_rows = r.read_u32::<LittleEndian>().map_err(io)?;
    let n_modalities = r.read_u32::<LittleEndian>().map_err(io)?;
    let dim = r.read_u32::<LittleEndian>().map_err(io)?;
    let expect = n_rows as usize * n_modalities as usize * dim as usize;
    let mut buf = vec![0f32; expect];
    let mut got = 0usize;
    {
        let raw = bytemuck_slice(&mut buf);
        while got < raw.len() {
            let n = r.read(&mut raw[got..]).map_err(io)?;
            if n == 0 {
                break;
            }
            got += n;
        }
        if got != raw.len() {
            return Err(NdfError::Truncated {
                path: display,
                expect,
                got: got / 4,
            });
        }
    }
    if cfg!(target_endian = "big") {
        for v in &mut buf {
            *v = f32::from_bits(v.to_bits().swap_bytes());
        }
    }
    let values = Array2::from_shape_vec((n_rows as usize, (n_modalities * dim) as usize), buf)
        .expect("shape follows from header");
    Ok(NdfMatrix {
        n_modalities,
        dim,
        values,
    })
}

pub fn write(path: &Path, m: &NdfMatrix) -> Result<(), NdfError> {
    let display = path.display().to_string();
    let io = |source| NdfError::Io {
        path: display.clone(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(m.n_rows() as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(m.n_modalities).map_err(io)?;
    w.write_u32::<LittleEndian>(m.dim).map_err(io)?;
    for &v in m.values.iter() {
        w.write_f32::<LittleEndian>(v).map_err(io)?;
    }
    w.flush().map_err(io)
}

// View a f32 buffer as bytes for bulk reads; f32 has no invalid bit patterns.
fn bytemuck_slice(buf: &mut [f32]) -> &mut [u8] {
    unsafe { std::slice::from_raw_parts_mut(buf.as_mut_ptr().cast::<u8>(), buf.len() * 4) }
}
