//! Dense row-major `f64` tensors and small vector-math helpers.
//!
//! Tensors here are deliberately plain: a shape and a flat buffer. All the
//! interesting structure (graph recording, gradients) lives in
//! [`crate::graph`]; this module only owns storage and layout arithmetic.

use crate::{Error, Result};

/// Dense tensor with row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    /// Creates a tensor, checking that the buffer matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "tensor construction",
                format!("{:?} ({} elements)", shape, len),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    /// All-ones tensor of the given shape.
    pub fn ones(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![1.0; len],
        }
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// True when the tensor holds no elements.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm of a slice.
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity with the degenerate-input rule used everywhere in this
/// crate: if either vector has norm below `1e-12` the similarity is `0.0`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Min-max rescaling of a slice into `[0, 1]`.
///
/// A constant input (max − min below `1e-12`) maps to all ones: a flat
/// similarity profile means no unit is singled out, and downstream code
/// treats "all ones" as the uniform penalty.
pub fn minmax_rescale(v: &[f64]) -> Vec<f64> {
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min < 1e-12 {
        return vec![1.0; v.len()];
    }
    v.iter().map(|x| (x - min) / (max - min)).collect()
}

/// Shannon entropy of a probability row in nats; `0 ln 0` is taken as `0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Numerically stable softmax of a row with temperature `tau`.
pub fn softmax_row(row: &[f64], tau: f64) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| ((x - m) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn cosine_handles_degenerate_norms() {
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(cosine_similarity(&[1e-13, 0.0], &[1.0, 0.0]), 0.0);
        let s = cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]);
        assert!((s - 1.0).abs() < 1e-15);
        let s = cosine_similarity(&[1.0, 0.0], &[-2.0, 0.0]);
        assert!((s + 1.0).abs() < 1e-15);
    }

    #[test]
    fn minmax_constant_input_maps_to_ones() {
        assert_eq!(minmax_rescale(&[0.4, 0.4, 0.4]), vec![1.0, 1.0, 1.0]);
        let r = minmax_rescale(&[1.0, 3.0, 2.0]);
        assert_eq!(r, vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn entropy_of_uniform_is_ln_c() {
        let p = vec![0.2; 5];
        assert!((entropy(&p) - (5.0f64).ln()).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn softmax_is_shift_stable() {
        let a = softmax_row(&[1.0, 2.0, 3.0], 1.0);
        let b = softmax_row(&[1001.0, 1002.0, 1003.0], 1.0);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }
}
