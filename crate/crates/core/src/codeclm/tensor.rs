use crate::rng::SplitMix64;

pub const INIT_RANGE: f32 = 0.02;
const LN_EPS: f32 = 1e-5;

/// Row-major dense matrix, `rows` = output channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn random(rows: usize, cols: usize, rng: &mut SplitMix64) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.uniform_f32(-INIT_RANGE, INIT_RANGE))
            .collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self · x`
    pub fn matvec(&self, x: &[f32], out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = dot(row, x);
        }
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |acc, (x, y)| acc + x * y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Norm {
    pub fn apply(&self, x: &[f32], out: &mut [f32]) {
        let n = x.len() as f32;
        let mean = x.iter().sum::<f32>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (i, o) in out.iter_mut().enumerate() {
            *o = (x[i] - mean) * inv * self.gain[i] + self.bias[i];
        }
    }
}

pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Numerically stable log-softmax, accumulated in f64.
pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let sum: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|&v| v as f64 - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_small() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let mut out = [0.0; 2];
        m.matvec(&[1.0, 1.0, 2.0], &mut out);
        assert_eq!(out, [9.0, 1.0]);
    }

    #[test]
    fn log_softmax_uniform() {
        let ls = log_softmax(&[0.5; 10]);
        for v in ls {
            assert!((v + (10f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_zero_gain_is_bias() {
        let n = Norm {
            gain: vec![0.0; 4],
            bias: vec![0.25; 4],
        };
        let mut out = [0.0; 4];
        n.apply(&[1.0, 2.0, 3.0, 4.0], &mut out);
        assert_eq!(out, [0.25; 4]);
    }
}
