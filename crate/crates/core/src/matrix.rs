//! Dense row-major `f32` matrices and the `EMB1` file encoding.
//!
//! Layout, bit-exact: the four magic bytes `EMB1`, a little-endian `u32` row
//! count, a little-endian `u32` column count, then `rows * cols` IEEE-754
//! binary32 values in little-endian, row-major order. No padding, no trailer.

use std::fmt;

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB1_HEADER_LEN: usize = 12;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MatrixFormatError {
    #[error("file is {len} bytes, shorter than the 12-byte header")]
    ShortHeader { len: usize },
    #[error("bad magic bytes at offset 0 (expected `EMB1`)")]
    BadMagic,
    #[error("header declares {rows}x{cols} = {expected} bytes of payload but file holds {actual} (truncated at offset {})", EMB1_HEADER_LEN + .actual)]
    Truncated { rows: usize, cols: usize, expected: usize, actual: usize },
    #[error("{extra} trailing bytes after offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("declared size {rows}x{cols} overflows")]
    Overflow { rows: usize, cols: usize },
}

/// A non-finite entry found by [`Matrix::non_finite`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonFinite {
    pub row: usize,
    pub col: usize,
    /// Byte offset of the value within an `EMB1` file.
    pub offset: usize,
    pub value: f32,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length must be rows*cols");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Gathers the given rows into a new matrix, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix::new(rows.len(), self.cols, data)
    }

    pub fn non_finite(&self) -> impl Iterator<Item = NonFinite> + '_ {
        let cols = self.cols.max(1);
        self.data.iter().enumerate().filter(|(_, v)| !v.is_finite()).map(move |(i, &value)| NonFinite {
            row: i / cols,
            col: i % cols,
            offset: EMB1_HEADER_LEN + 4 * i,
            value,
        })
    }

    pub fn to_emb1(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(EMB1_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(EMB1_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the header only, returning `(rows, cols)`.
    pub fn emb1_header(bytes: &[u8]) -> Result<(usize, usize), MatrixFormatError> {
        if bytes.len() < EMB1_HEADER_LEN {
            return Err(MatrixFormatError::ShortHeader { len: bytes.len() });
        }
        if &bytes[..4] != EMB1_MAGIC {
            return Err(MatrixFormatError::BadMagic);
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        Ok((rows, cols))
    }

    pub fn from_emb1(bytes: &[u8]) -> Result<Matrix, MatrixFormatError> {
        let (rows, cols) = Self::emb1_header(bytes)?;
        let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or(MatrixFormatError::Overflow { rows, cols })?;
        let payload = &bytes[EMB1_HEADER_LEN..];
        if payload.len() < expected {
            return Err(MatrixFormatError::Truncated { rows, cols, expected, actual: payload.len() });
        }
        if payload.len() > expected {
            return Err(MatrixFormatError::TrailingBytes { offset: EMB1_HEADER_LEN + expected, extra: payload.len() - expected });
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Matrix { rows, cols, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn emb1_layout_is_bit_exact() {
        let m = Matrix::from_rows(&[[1.0f32, -2.5], [0.0, 3.25]]);
        let bytes = m.to_emb1();
        assert_eq!(&bytes[..4], b"EMB1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[16..20], &(-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 12 + 16);
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let m = Matrix::zeros(3, 2);
        let bytes = m.to_emb1();
        let err = Matrix::from_emb1(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(matches!(err, MatrixFormatError::Truncated { expected: 24, actual: 20, .. }));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Matrix::from_emb1(&long).unwrap_err(), MatrixFormatError::TrailingBytes { offset: 36, extra: 1 }));
        assert_eq!(Matrix::from_emb1(b"EMB").unwrap_err(), MatrixFormatError::ShortHeader { len: 3 });
        assert_eq!(Matrix::from_emb1(b"EMB2\0\0\0\0\0\0\0\0").unwrap_err(), MatrixFormatError::BadMagic);
    }

    #[test]
    fn non_finite_reports_coordinates() {
        let mut m = Matrix::zeros(10, 5);
        m.row_mut(7)[3] = f32::NAN;
        let found: Vec<_> = m.non_finite().collect();
        assert_eq!(found.len(), 1);
        assert_eq!((found[0].row, found[0].col), (7, 3));
        assert_eq!(found[0].offset, 12 + 4 * (7 * 5 + 3));
    }

    proptest! {
        #[test]
        fn emb1_round_trip_is_bit_identical(rows in 0usize..12, cols in 0usize..12, seed in any::<u64>()) {
            let data: Vec<f32> = (0..rows * cols)
                .map(|i| f32::from_bits((seed as u32).wrapping_mul(2654435761).wrapping_add(i as u32 * 40503) & 0x7f7f_ffff))
                .collect();
            let m = Matrix::new(rows, cols, data);
            let back = Matrix::from_emb1(&m.to_emb1()).unwrap();
            prop_assert_eq!(back.rows(), rows);
            prop_assert_eq!(back.cols(), cols);
            let a: Vec<u32> = m.as_slice().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.as_slice().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
