//! Dense f32 tensors, the scalar math used across both training phases,
//! and named parameter stores.
//!
//! Storage and compute are 32-bit; the finite-difference verification in
//! [`gradcheck`] re-evaluates graphs in 64-bit.

mod checkpoint;
mod store;
mod tape;

pub mod gradcheck;
pub mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use store::ParamStore;
pub use tape::{Gradients, Tape, Var};

use crate::error::{PulseError, Result};
use rand::Rng;

/// Row-major dense tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(PulseError::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(PulseError::InvalidArgument(format!(
                "shape {shape:?} implies {expect} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PulseError::NumericError(
                "tensor constructed with non-finite values".into(),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Gaussian init, mean 0.
    pub fn randn(shape: &[usize], std: f32, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        // Box-Muller on the given rng keeps init reproducible without
        // depending on rand_distr.
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
            let u2: f32 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f32::consts::PI * u2;
            data.push(r * theta.cos() * std);
            if data.len() < n {
                data.push(r * theta.sin() * std);
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor; rank-1 counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            r => panic!("rows() on rank-{r} tensor"),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            r => panic!("cols() on rank-{r} tensor"),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Scalar extraction; panics unless the tensor holds exactly one value.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} values", self.data.len());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Bridges a [`ParamStore`] onto a [`Tape`]: each named parameter becomes one
/// leaf (created on first use, cached after), and gradients can be collected
/// back by name for the optimizer. A frozen binder produces constant leaves,
/// so no gradient ever reaches the store.
pub struct Binder<'p> {
    params: &'p ParamStore,
    trainable: bool,
    bound: std::collections::BTreeMap<String, Var>,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p ParamStore, trainable: bool) -> Self {
        Binder {
            params,
            trainable,
            bound: std::collections::BTreeMap::new(),
        }
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&var) = self.bound.get(name) {
            return Ok(var);
        }
        let tensor = self.params.get(name)?.clone();
        let var = if self.trainable {
            tape.param(tensor)
        } else {
            tape.constant(tensor)
        };
        self.bound.insert(name.to_string(), var);
        Ok(var)
    }

    /// Gradients for every bound parameter that received one.
    pub fn collect_grads(&self, grads: &tape::Gradients) -> std::collections::BTreeMap<String, Tensor> {
        let mut out = std::collections::BTreeMap::new();
        for (name, &var) in &self.bound {
            if let Some(g) = grads.get(var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

/// Numerically stabilized softmax (max subtraction).
pub fn softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(PulseError::InvalidArgument("softmax of empty input".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(PulseError::NumericError("softmax of non-finite logits".into()));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cosine similarity clamped to [-1, 1].
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(PulseError::InvalidArgument(format!(
            "cosine over mismatched lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(PulseError::DegenerateVector(
            "cosine of a zero-norm vector".into(),
        ));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0) as f32)
}

/// −log softmax(logits)[label], stabilized via log-sum-exp.
pub fn cross_entropy(logits: &[f32], label: usize) -> Result<f32> {
    if label >= logits.len() {
        return Err(PulseError::InvalidArgument(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let lse: f32 = logits.iter().map(|&v| (v - max).exp()).sum::<f32>().ln() + max;
    Ok(lse - logits[label])
}

/// L2-normalize in place; errors on a zero-norm slice.
pub fn l2_normalize(v: &mut [f32]) -> Result<()> {
    let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(PulseError::DegenerateVector("normalize zero vector".into()));
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_symmetry_and_analytic_values() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-7);

        let p = softmax(&[1.0f32.ln(), 2.0f32.ln(), 3.0f32.ln()]).unwrap();
        assert_abs_diff_eq!(p[0], 1.0 / 6.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p[1], 1.0 / 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p[2], 1.0 / 2.0, epsilon = 1e-6);
    }

    #[test]
    fn softmax_is_stabilized() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p[0] > 0.999_999);
        assert!(p[1] < 1e-6);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[f32::NAN, 0.0]).is_err());
        assert!(softmax(&[f32::INFINITY]).is_err());
    }

    #[test]
    fn cosine_parallel_orthogonal_antiparallel() {
        assert_abs_diff_eq!(
            cosine_similarity(&[1.0, 2.0, 2.0], &[2.0, 4.0, 4.0]).unwrap(),
            1.0,
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(
            cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            0.0,
            epsilon = 1e-7
        );
        assert_abs_diff_eq!(
            cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(),
            -1.0,
            epsilon = 1e-6
        );
    }

    #[test]
    fn cosine_rejects_degenerate_input() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(PulseError::DegenerateVector(_))
        ));
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(PulseError::InvalidArgument(_))
        ));
    }

    #[test]
    fn cross_entropy_analytic_values() {
        let uniform = vec![0.3f32; 10];
        assert_abs_diff_eq!(
            cross_entropy(&uniform, 7).unwrap(),
            10.0f32.ln(),
            epsilon = 1e-6
        );
        assert!(cross_entropy(&[50.0, 0.0, 0.0], 0).unwrap() < 1e-6);
        assert_abs_diff_eq!(
            cross_entropy(&[0.0, 0.0], 0).unwrap(),
            2.0f32.ln(),
            epsilon = 1e-6
        );
        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f32::NAN]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_sums_to_one_and_shift_invariant(
                logits in proptest::collection::vec(-20.0f32..20.0, 1..16),
                shift in -10.0f32..10.0,
            ) {
                let p = softmax(&logits).unwrap();
                let total: f32 = p.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
                prop_assert!(p.iter().all(|&v| v >= 0.0));

                let shifted: Vec<f32> = logits.iter().map(|&v| v + shift).collect();
                let q = softmax(&shifted).unwrap();
                for (a, b) in p.iter().zip(&q) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }

            #[test]
            fn cosine_scale_invariant(
                a in proptest::collection::vec(-1.0f32..1.0, 3..8),
                alpha in 0.01f32..100.0,
                beta in 0.01f32..100.0,
            ) {
                prop_assume!(a.iter().any(|&v| v.abs() > 1e-3));
                let b: Vec<f32> = a.iter().rev().cloned().collect();
                prop_assume!(b.iter().any(|&v| v.abs() > 1e-3));
                let base = cosine_similarity(&a, &b).unwrap();
                let sa: Vec<f32> = a.iter().map(|&v| v * alpha).collect();
                let sb: Vec<f32> = b.iter().map(|&v| v * beta).collect();
                let scaled = cosine_similarity(&sa, &sb).unwrap();
                prop_assert!((base - scaled).abs() < 1e-5);
            }
        }
    }
}
