//! Sign-bit packed matrices for inference.
//!
//! Byte layout of a serialized matrix (little-endian):
//!
//! ```text
//! b"BPM1" | rows: u32 | cols: u32 | scale: rows × f32 | payload: rows × ceil(cols/64) × u64
//! ```
//!
//! Bit `j % 64` of word `j / 64` in a row is 1 when the weight is `≥ 0`.
//! Padding bits past `cols` are always 0.

use crate::autodiff::CustomGrad;
use crate::binquant::sign;
use crate::error::{dim_err, Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BPM1";
const HEADER_BYTES: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct PackedBinaryMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    bits: Vec<u64>,
    scale: Vec<f32>,
}

impl PackedBinaryMatrix {
    /// Packs `sign(W)` with a per-row scale.
    pub fn pack(w: &Tensor, scale: &[f64]) -> Result<Self> {
        let (rows, cols) = w.as_matrix_dims();
        if scale.len() != rows {
            return Err(dim_err!("{} scales for {} rows", scale.len(), rows));
        }
        if w.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Data("NaN weight cannot be packed".into()));
        }
        let words_per_row = cols.div_ceil(64);
        let mut bits = vec![0u64; rows * words_per_row];
        for i in 0..rows {
            let words = &mut bits[i * words_per_row..(i + 1) * words_per_row];
            for (j, &v) in w.row(i).iter().enumerate() {
                if v >= 0.0 {
                    words[j / 64] |= 1u64 << (j % 64);
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            words_per_row,
            bits,
            scale: scale.iter().map(|&s| s as f32).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words(&self) -> &[u64] {
        &self.bits
    }

    pub fn scale(&self) -> &[f32] {
        &self.scale
    }

    fn row_words(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words_per_row..(i + 1) * self.words_per_row]
    }

    /// Sign pattern as `±1`.
    pub fn unpack_signs(&self) -> Tensor {
        let mut out = vec![-1.0; self.rows * self.cols];
        for i in 0..self.rows {
            let words = self.row_words(i);
            for j in 0..self.cols {
                if words[j / 64] >> (j % 64) & 1 == 1 {
                    out[i * self.cols + j] = 1.0;
                }
            }
        }
        Tensor::new(&[self.rows, self.cols], out).expect("consistent dims")
    }

    /// Dense `S[i]·sign(W[i,j])`.
    pub fn unpack_dense(&self) -> Tensor {
        let mut t = self.unpack_signs();
        for i in 0..self.rows {
            let s = self.scale[i] as f64;
            t.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        t
    }

    #[inline]
    fn row_dot(&self, i: usize, x: &[f64], total: f64) -> f64 {
        let mut pos = 0.0;
        for (w, &word) in self.row_words(i).iter().enumerate() {
            let mut bits = word;
            while bits != 0 {
                let b = bits.trailing_zeros() as usize;
                pos += x[w * 64 + b];
                bits &= bits - 1;
            }
        }
        self.scale[i] as f64 * (2.0 * pos - total)
    }

    /// `out[i] = S[i]·(Σ_{bit=1} x_j − Σ_{bit=0} x_j)`.
    pub fn binmatvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(dim_err!(
                "vector of length {} for {} columns",
                x.len(),
                self.cols
            ));
        }
        let total: f64 = x.iter().sum();
        Ok((0..self.rows).map(|i| self.row_dot(i, x, total)).collect())
    }

    /// Applies [`Self::binmatvec`] to every row of `x[n×cols]`, giving `[n×rows]`.
    pub fn binmatmul(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        if x.len() != n * self.cols {
            return Err(dim_err!(
                "input of length {} for {} rows of {} columns",
                x.len(),
                n,
                self.cols
            ));
        }
        let mut out = vec![0.0; n * self.rows];
        kernels::for_each_row(&mut out, self.rows, |r, orow| {
            let xr = &x[r * self.cols..(r + 1) * self.cols];
            let total: f64 = xr.iter().sum();
            for (i, o) in orow.iter_mut().enumerate() {
                *o = self.row_dot(i, xr, total);
            }
        });
        Ok(out)
    }

    /// Dense reference `S[i]·sign(W[i,:])·x` from unpacked signs.
    pub fn dense_matvec(&self, x: &[f64]) -> Vec<f64> {
        let d = self.unpack_dense();
        (0..self.rows)
            .map(|i| d.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn serialized_len(&self) -> usize {
        HEADER_BYTES + 4 * self.rows + 8 * self.bits.len()
    }

    /// Stored bits per weight, header included.
    pub fn bits_per_weight(&self) -> f64 {
        (self.serialized_len() * 8) as f64 / (self.rows * self.cols) as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for s in &self.scale {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for w in &self.bits {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < HEADER_BYTES {
            return Err(fmt("truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt("bad magic, expected BPM1"));
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let words_per_row = cols.div_ceil(64);
        let need = HEADER_BYTES + 4 * rows + 8 * rows * words_per_row;
        if bytes.len() < need {
            return Err(fmt("truncated payload"));
        }
        if bytes.len() > need {
            return Err(fmt("trailing bytes after payload"));
        }
        let mut off = HEADER_BYTES;
        let scale = (0..rows)
            .map(|i| f32::from_le_bytes(bytes[off + 4 * i..off + 4 * i + 4].try_into().unwrap()))
            .collect();
        off += 4 * rows;
        let bits: Vec<u64> = bytes[off..]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tail = cols % 64;
        if tail != 0 {
            let mask = !((1u64 << tail) - 1);
            for i in 0..rows {
                if bits[(i + 1) * words_per_row - 1] & mask != 0 {
                    return Err(fmt("non-zero padding bits"));
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            words_per_row,
            bits,
            scale,
        })
    }
}

/// Inference-only linear region backed by a packed matrix.
///
/// Used as a constant-input node when evaluating an exported model; it has
/// no meaningful gradient and its backward returns zeros.
pub struct PackedLinear {
    pub matrix: PackedBinaryMatrix,
}

impl CustomGrad for PackedLinear {
    fn forward(&self, input: &Tensor) -> Tensor {
        let (n, _) = input.as_matrix_dims();
        let out = self
            .matrix
            .binmatmul(input.data(), n)
            .expect("packed linear input width");
        let mut shape = input.shape().to_vec();
        *shape.last_mut().unwrap() = self.matrix.rows();
        Tensor::new(&shape, out).expect("consistent dims")
    }

    fn backward(&self, input: &Tensor, _output: &Tensor, _upstream: &Tensor) -> Tensor {
        Tensor::zeros(input.shape())
    }
}

/// Checks that `sign` agrees with the packing convention.
pub fn sign_bit(v: f64) -> bool {
    sign(v) > 0.0
}
