//! Centered PCA by thin SVD, and the little-endian binary container used by
//! the model files.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Components below `RANK_TOLERANCE * largest singular value` are treated
/// as null directions: their sample-combination column is zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// Unit-norm, mutually orthogonal columns.
    pub bases: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    /// Column `j` holds the training-sample weights that produce basis `j`
    /// from the centered data, `V Sigma^-1`.
    pub combinations: DMatrix<f64>,
}

impl Pca {
    /// `sigma_j = s_j / sqrt(N - 1)`.
    pub fn sigmas(&self) -> Vec<f64> {
        let n = self.combinations.nrows();
        let denom = ((n.max(2) - 1) as f64).sqrt();
        self.singular_values.iter().map(|s| s / denom).collect()
    }
}

/// Subtracts the row means of `data` (one sample per column) in place and
/// returns them.
pub fn center_columns(data: &mut DMatrix<f64>) -> DVector<f64> {
    let n = data.ncols() as f64;
    let mean = data.column_sum() / n;
    for mut col in data.column_iter_mut() {
        col -= &mean;
    }
    mean
}

/// PCA over the columns of `data` keeping `components` bases.
pub fn pca(mut data: DMatrix<f64>, components: usize) -> Result<Pca> {
    let (dim, n) = data.shape();
    if n < 2 {
        return Err(Error::Config(format!("PCA needs at least 2 samples, got {n}")));
    }
    if components > n - 1 || components > dim {
        return Err(Error::Config(format!(
            "{components} components requested from {n} samples of dimension {dim}"
        )));
    }
    let mean = center_columns(&mut data);
    // Thin QR first so the SVD only sees an n x n factor. Wide data is
    // handled through its transpose.
    let (u_full, s, v) = if dim >= n {
        let qr = data.qr();
        let svd = crate::linalg::svd(&qr.r());
        (qr.q() * svd.u, svd.singular_values, svd.v)
    } else {
        let svd = crate::linalg::svd(&data.transpose());
        (svd.v, svd.singular_values, svd.u)
    };
    let order: Vec<usize> = (0..components).collect();
    let s_max = order.first().map(|&j| s[j]).unwrap_or(0.0);
    let mut bases = DMatrix::zeros(dim, components);
    let mut combinations = DMatrix::zeros(n, components);
    let mut singular_values = Vec::with_capacity(components);
    for (c, &j) in order.iter().enumerate() {
        let mut col = u_full.column(j).into_owned();
        let mut comb = v.column(j).into_owned();
        // deterministic sign: largest-magnitude entry positive
        let pivot = col.iamax();
        if col[pivot] < 0.0 {
            col.neg_mut();
            comb.neg_mut();
        }
        let sv = s[j];
        if sv > RANK_TOLERANCE * s_max && sv > 0.0 {
            comb /= sv;
        } else {
            comb.fill(0.0);
        }
        bases.set_column(c, &col);
        combinations.set_column(c, &comb);
        singular_values.push(sv);
    }
    Ok(Pca {
        mean,
        bases,
        singular_values,
        combinations,
    })
}

/// Little-endian writer for the model containers.
pub(crate) struct ContainerWriter {
    buf: Vec<u8>,
}

impl ContainerWriter {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = ContainerWriter { buf: magic.to_vec() };
        w.u32(version);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    /// Appends the CRC32 of everything written so far.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }

    pub fn write(self, path: &Path) -> Result<()> {
        fs::write(path, self.finish()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct ContainerReader<'a> {
    body: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ContainerReader<'a> {
    /// Checks magic, version and checksum before any field is read.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4], version: u32, what: &'static str) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Format(format!("{what}: file truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != magic {
            return Err(Error::Format(format!(
                "{what}: bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            )));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        let mut r = ContainerReader { body, pos: 4, what };
        let v = r.u32()?;
        if v != version {
            return Err(Error::Format(format!("{what}: unsupported version {v}, expected {version}")));
        }
        if stored != actual {
            return Err(Error::Format(format!(
                "{what}: CRC mismatch (stored {stored:08x}, computed {actual:08x}); file is corrupted or truncated"
            )));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.body.len()).ok_or_else(|| {
            Error::Format(format!("{}: file truncated at byte {}", self.what, self.pos))
        })?;
        let s = &self.body[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format(format!("{}: bad length", self.what)))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format(format!("{}: bad length", self.what)))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.body.len() {
            return Err(Error::Format(format!(
                "{}: {} unexpected trailing bytes",
                self.what,
                self.body.len() - self.pos
            )));
        }
        Ok(())
    }
}
