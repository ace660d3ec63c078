//! Symmetric per-output-channel int8 weight quantization.

use super::tensor::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QuantMatrix {
    pub rows: usize,
    pub cols: usize,
    pub q: Vec<i8>,
    /// One scale per output row: `max|row| / 127`, or 1.0 for an all-zero row.
    pub scales: Vec<f32>,
}

impl QuantMatrix {
    pub fn quantize(m: &Matrix) -> Result<Self> {
        if m.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("cannot quantize non-finite weights".into()));
        }
        let mut q = Vec::with_capacity(m.data.len());
        let mut scales = Vec::with_capacity(m.rows);
        for row in m.data.chunks_exact(m.cols) {
            let max = row.iter().fold(0.0f32, |a, v| a.max(v.abs()));
            let scale = if max == 0.0 { 1.0 } else { max / 127.0 };
            scales.push(scale);
            q.extend(row.iter().map(|&v| quantize_value(v, scale)));
        }
        Ok(Self {
            rows: m.rows,
            cols: m.cols,
            q,
            scales,
        })
    }

    /// `|w - q·scale|` evaluated exactly in f64 (a product of two f32
    /// values is exact in f64).
    pub fn reconstruction_error(&self, original: &Matrix, r: usize, c: usize) -> f64 {
        let exact = self.q[r * self.cols + c] as f64 * self.scales[r] as f64;
        (original.data[r * self.cols + c] as f64 - exact).abs()
    }

    #[inline]
    fn weight(&self, r: usize, c: usize) -> f32 {
        self.q[r * self.cols + c] as f32 * self.scales[r]
    }

    pub fn dequantize(&self) -> Matrix {
        let data = (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .map(|(r, c)| self.weight(r, c))
            .collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    /// `out = dequant(self) · x`, accumulated in the same order as the dense
    /// path so the two agree bit-for-bit on identical effective weights.
    pub fn matvec(&self, x: &[f32], out: &mut [f32]) {
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for (c, &xv) in x.iter().enumerate() {
                acc += self.weight(r, c) * xv;
            }
            *o = acc;
        }
    }
}

fn quantize_value(v: f32, scale: f32) -> i8 {
    let (v, s) = (v as f64, scale as f64);
    let mut q = (v / s).round().clamp(-127.0, 127.0);
    // the f64 division can land on the wrong side of a half step
    if (v - q * s).abs() > s / 2.0 {
        q += (v - q * s).signum();
    }
    q.clamp(-127.0, 127.0) as i8
}

pub fn dequant_matmul(m: &QuantMatrix, x: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; m.rows];
    m.matvec(x, &mut out);
    out
}
