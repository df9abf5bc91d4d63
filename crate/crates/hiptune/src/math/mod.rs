//! Dense f64 tensors and the small numeric kernels the rest of the crate
//! builds on. Everything here is deterministic: no thread-order-dependent
//! reductions, no platform-dependent math.

pub mod adam;
pub mod conv;
pub mod graph;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Row-major f64 tensor with cheap clones (shared storage, copy-on-write).
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; n]),
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(&[1], vec![value])
    }

    /// i.i.d. normal initialization.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor::from_vec(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape length mismatch"
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn shape_string(&self) -> String {
        format!("{:?}", self.shape)
    }

    /// Elementwise a + s * b, in place.
    pub fn add_scaled(&mut self, other: &Tensor, s: f64) {
        assert!(self.same_shape(other), "add_scaled shape mismatch");
        let dst = self.data_mut();
        for (d, o) in dst.iter_mut().zip(other.data.iter()) {
            *d += s * o;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for d in self.data_mut() {
            *d *= s;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn bit_equal(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// FNV-1a over the exact bit patterns; used for frozen-weight checks.
    pub fn checksum(&self) -> u64 {
        let mut h = fnv1a_init();
        for d in self.shape.iter() {
            h = fnv1a_u64(h, *d as u64);
        }
        for v in self.data.iter() {
            h = fnv1a_u64(h, v.to_bits());
        }
        h
    }

    pub fn validate_matrix(&self, ctx: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(
                format!("{ctx}: rank-2 matrix"),
                self.shape_string(),
            ));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

pub fn fnv1a_init() -> u64 {
    0xcbf29ce484222325
}

pub fn fnv1a_u64(mut h: u64, v: u64) -> u64 {
    for byte in v.to_le_bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn fnv1a_bytes(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// C = A · B, with optional transposes (handled via strides). Shapes are
/// checked by assertion; callers validate user-facing dimensions before
/// reaching this point.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ar, ac) = (a.shape[0], a.shape[1]);
    let (br, bc) = (b.shape[0], b.shape[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, kb, "matmul inner dimension mismatch");

    // Row strides for the logical (m, k) x (k, n) view of the raw buffers.
    let (a_rs, a_cs) = if ta { (1isize, ac as isize) } else { (ac as isize, 1) };
    let (b_rs, b_cs) = if tb { (1isize, bc as isize) } else { (bc as isize, 1) };
    let mut out = vec![0.0; m * n];
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            a_rs,
            a_cs,
            b.data().as_ptr(),
            b_rs,
            b_cs,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::from_vec(&[m, n], out)
}

/// Numerically-plain softmax of a slice (max-shifted for stability).
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the maximum element; ties break to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate().skip(1) {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
        let get = |t: &Tensor, tr: bool, i: usize, j: usize| {
            if tr {
                t.data()[j * t.shape()[1] + i]
            } else {
                t.data()[i * t.shape()[1] + j]
            }
        };
        let m = if ta { a.shape()[1] } else { a.shape()[0] };
        let k = if ta { a.shape()[0] } else { a.shape()[1] };
        let n = if tb { b.shape()[0] } else { b.shape()[1] };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += get(a, ta, i, p) * get(b, tb, p, j);
                }
            }
        }
        Tensor::from_vec(&[m, n], out)
    }

    #[test]
    fn matmul_matches_naive_all_transpose_modes() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for &(m, k, n) in &[(3usize, 4usize, 5usize), (1, 7, 2), (6, 1, 3)] {
            for &(ta, tb) in &[(false, false), (false, true), (true, false), (true, true)] {
                let a_shape = if ta { [k, m] } else { [m, k] };
                let b_shape = if tb { [n, k] } else { [k, n] };
                let a = Tensor::randn(&a_shape, 1.0, &mut rng);
                let b = Tensor::randn(&b_shape, 1.0, &mut rng);
                let fast = matmul(&a, &b, ta, tb);
                let slow = naive_matmul(&a, &b, ta, tb);
                assert!(fast.max_abs_diff(&slow) < 1e-12, "mode ({ta},{tb})");
            }
        }
    }

    #[test]
    fn softmax_sums_to_one_and_orders() {
        let p = softmax_slice(&[1.0, 2.0, 3.0]);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!((p[0] - 0.09003057).abs() < 1e-7);
        assert!((p[1] - 0.24472847).abs() < 1e-7);
        assert!((p[2] - 0.66524096).abs() < 1e-7);
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn checksum_sensitive_to_single_bit() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let mut b = a.clone();
        b.data_mut()[3] = 4.0000000000000009;
        assert_ne!(a.checksum(), b.checksum());
        assert_eq!(a.checksum(), a.clone().checksum());
    }
}
