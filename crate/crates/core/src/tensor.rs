//! Dense row-major tensors.
//!
//! A `Tensor` is a plain value; graph identity and gradient bookkeeping live
//! on the [`Tape`](crate::tape::Tape) node that wraps it during a forward
//! pass. Tensors are immutable while a graph references them; the optimizer
//! mutates parameters only between passes.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::BadShape {
                op: "tensor",
                shape,
                reason: "element count does not match shape, or zero dimension",
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Zero-row matrix `[0 x cols]`; the one legal empty shape (empty token
    /// streams embed to it).
    pub fn empty_rows(cols: usize) -> Self {
        Tensor {
            shape: vec![0, cols],
            data: Vec::new(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::ZERO; numel],
        }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    /// Gaussian init used for all weights: Normal(0, std) from a named stream.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| S::from_f64(rng.normal(0.0, std)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Exact element-wise equality (used by freeze and zero-gate assertions).
    pub fn exact_eq(&self, other: &Tensor<S>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| *a == *b)
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Lossy precision cast (f64 fixtures -> f32 runs and back).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Sinusoidal position table: `pe[pos][2i] = sin(pos / 10000^(2i/d))`,
/// `pe[pos][2i+1] = cos(pos / 10000^(2i/d))`. Position 0 is the interleaved
/// [0, 1, 0, 1, ...] pattern. Rows are cached per width within a thread; the
/// table is a pure function of (len, d), so caching cannot change results.
pub fn sinusoidal_positions<S: Scalar>(len: usize, d: usize) -> Tensor<S> {
    use std::cell::RefCell;
    use std::collections::HashMap;
    thread_local! {
        static CACHE: RefCell<HashMap<usize, Vec<f64>>> = RefCell::new(HashMap::new());
    }
    CACHE.with(|cache| {
        let mut cache = cache.borrow_mut();
        let rows = cache.entry(d).or_default();
        let have = rows.len() / d.max(1);
        if have < len {
            rows.reserve((len - have) * d);
            for pos in have..len {
                for j in 0..d {
                    let i = j / 2;
                    let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
                    rows.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
                }
            }
        }
        Tensor {
            shape: vec![len, d],
            data: rows[..len * d].iter().map(|&v| S::from_f64(v)).collect(),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn sinusoid_at_position_zero_interleaves_zero_one() {
        let pe = sinusoidal_positions::<f64>(2, 6);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        // position 1, first pair: sin(1), cos(1)
        assert!((pe.row(1)[0] - 1f64.sin()).abs() < 1e-12);
        assert!((pe.row(1)[1] - 1f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn randn_deterministic_per_stream() {
        let mut r1 = Rng::stream(42, "init/w");
        let mut r2 = Rng::stream(42, "init/w");
        let a = Tensor::<f32>::randn(&[4, 4], 0.02, &mut r1);
        let b = Tensor::<f32>::randn(&[4, 4], 0.02, &mut r2);
        assert!(a.exact_eq(&b));
    }
}
