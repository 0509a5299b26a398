//! Minimal dense-tensor engine: 1-D/2-D float tensors, the primitive math
//! used by the encoder, reverse-mode gradients ([`graph`]), the Adam
//! optimizer, and a binary checkpoint container ([`checkpoint`]).
//!
//! Everything is generic over [`Element`] so training runs at `f32` while
//! gradient-check tests run the identical code at `f64`.

pub mod checkpoint;
pub mod graph;

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Scalar element type for tensors. Implemented for `f32` and `f64`.
pub trait Element:
    num_traits::Float + Send + Sync + fmt::Debug + Default + std::iter::Sum + 'static
{
    const DTYPE: Dtype;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Activation-grade tanh: exact at f64 (where gradient checks run), a
    /// branch-free Padé approximant at f32 (where training throughput
    /// matters; max error well under 1e-4, far below f32 training noise).
    fn activation_tanh(self) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn activation_tanh(self) -> Self {
        // 7/8 Padé approximant, clamped where tanh saturates.
        let x = self.max(-4.97).min(4.97);
        let s = x * x;
        let p = x * (135135.0 + s * (17325.0 + s * (378.0 + s)));
        let q = 135135.0 + s * (62370.0 + s * (3150.0 + s * 28.0));
        p / q
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn activation_tanh(self) -> Self {
        self.tanh()
    }
}

/// Element width tag used by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// Element count above which elementwise ops split across threads; each
/// chunk keeps its own fixed iteration order, so results do not depend on
/// the thread count.
pub(crate) const PAR_ELEMWISE_THRESHOLD: usize = 1 << 15;
const PAR_CHUNK: usize = 4096;

pub(crate) fn par_zip_map<T: Element>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    f: impl Fn(T, T) -> T + Sync,
) {
    if out.len() >= PAR_ELEMWISE_THRESHOLD {
        out.par_chunks_mut(PAR_CHUNK)
            .zip(a.par_chunks(PAR_CHUNK).zip(b.par_chunks(PAR_CHUNK)))
            .for_each(|(o, (x, y))| {
                for ((o, &x), &y) in o.iter_mut().zip(x).zip(y) {
                    *o = f(x, y);
                }
            });
    } else {
        for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
            *o = f(x, y);
        }
    }
}

pub(crate) fn par_map<T: Element>(a: &[T], out: &mut [T], f: impl Fn(T) -> T + Sync) {
    if out.len() >= PAR_ELEMWISE_THRESHOLD {
        out.par_chunks_mut(PAR_CHUNK)
            .zip(a.par_chunks(PAR_CHUNK))
            .for_each(|(o, x)| {
                for (o, &x) in o.iter_mut().zip(x) {
                    *o = f(x);
                }
            });
    } else {
        for (o, &x) in out.iter_mut().zip(a) {
            *o = f(x);
        }
    }
}

/// Dense row-major tensor. Rank 1 or 2 in practice; scalars are shape `[1]`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, ...]", &self.data[..8])
        }
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::InvalidConfig(format!(
                "tensor shape {:?} wants {} values, got {}",
                shape,
                count,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: &[usize], std_dev: f64, rng: &mut impl Rng) -> Self {
        let dist = rand_distr::Normal::new(0.0f64, std_dev).expect("valid std dev");
        let data = (0..shape.iter().product())
            .map(|_| T::from_f64(rng.sample(dist)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
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

    /// Row count: `m` for `[m, n]`, 1 for rank-1 tensors.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count: the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.cols();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Self {
        let mut data = vec![T::zero(); self.data.len()];
        par_map(&self.data, &mut data, f);
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(move |x| x * c)
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T + Sync) -> Result<Self> {
        self.same_shape(other, op)?;
        let mut data = vec![T::zero(); self.data.len()];
        par_zip_map(&self.data, &other.data, &mut data, f);
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    /// In-place `self += other * c`.
    pub fn axpy(&mut self, other: &Self, c: T) -> Result<()> {
        self.same_shape(other, "axpy")?;
        if self.data.len() >= PAR_ELEMWISE_THRESHOLD {
            self.data
                .par_chunks_mut(PAR_CHUNK)
                .zip(other.data.par_chunks(PAR_CHUNK))
                .for_each(|(a, b)| {
                    for (a, &b) in a.iter_mut().zip(b) {
                        *a = *a + b * c;
                    }
                });
        } else {
            for (a, &b) in self.data.iter_mut().zip(&other.data) {
                *a = *a + b * c;
            }
        }
        Ok(())
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    ///
    /// Rows of the output are independent and each is accumulated in a fixed
    /// k-order, so the parallel path is bitwise identical to the sequential
    /// one.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![T::zero(); m * n];
        let work = m * k * n;
        let compute_row = |i: usize, out_row: &mut [T]| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (l, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[l * n..(l + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        };
        if work >= 1 << 16 && m > 1 {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, row)| compute_row(i, row));
        } else {
            for (i, row) in out.chunks_mut(n).enumerate() {
                compute_row(i, row);
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::shape("transpose", &self.shape, &[]));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&self) -> Self {
        let n = self.cols();
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum = sum + *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Named parameter set of a model, iterated in name order everywhere so
/// runs are reproducible.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams<T: Element> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.map.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }
}

impl<T: Element> FromIterator<(String, Tensor<T>)> for ModelParams<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        ModelParams {
            map: iter.into_iter().collect(),
        }
    }
}

/// Adam hyperparameters. Only the learning rate is task-tuned; the moment
/// decays and epsilon are the standard defaults.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state: one first/second moment tensor per parameter plus the
/// shared step count.
#[derive(Clone, Debug)]
pub struct AdamState<T: Element> {
    pub config: AdamConfig,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
    pub step: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            step: 0,
        }
    }

    /// One bias-corrected Adam update over every parameter that has a
    /// gradient. Parameters without a gradient entry are left untouched.
    pub fn step(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        self.step += 1;
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let one = T::one();
        let lr = T::from_f64(self.config.learning_rate);
        let eps = T::from_f64(self.config.epsilon);
        let bc1 = T::from_f64(1.0 - self.config.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.config.beta2.powi(self.step as i32));
        for (name, grad) in grads {
            let param = params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter `{name}`")))?;
            if param.shape() != grad.shape() {
                return Err(Error::shape("adam_step", param.shape(), grad.shape()));
            }
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            for ((p, g), (m, v)) in param
                .as_mut_slice()
                .iter_mut()
                .zip(grad.as_slice())
                .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()))
            {
                *m = b1 * *m + (one - b1) * *g;
                *v = b2 * *v + (one - b2) * *g * *g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::randn(&[4, 4], 1.0, &mut rng);
        let mut eye = Tensor::<f64>::zeros(&[4, 4]);
        for i in 0..4 {
            eye.row_mut(i)[i] = 1.0;
        }
        let prod = a.matmul(&eye).unwrap();
        assert_eq!(prod, a);
    }

    #[test]
    fn matmul_parallel_matches_sequential() {
        // Big enough to take the rayon path; compare against a plain
        // triple-loop oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f32>::randn(&[37, 53], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[53, 41], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..37 {
            for j in 0..41 {
                let mut acc = 0.0f32;
                for l in 0..53 {
                    acc += a.get(i, l) * b.get(l, j);
                }
                assert_eq!(c.get(i, j), acc);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_symmetry() {
        let t = Tensor::<f64>::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let s = t.softmax_rows();
        assert_eq!(s.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::<f64>::randn(&[5, 7], 3.0, &mut rng);
        let s = t.softmax_rows();
        for i in 0..5 {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        let shifted = t.map(|x| x + 100.0).softmax_rows();
        for (a, b) in s.as_slice().iter().zip(shifted.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn transpose_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::<f32>::randn(&[3, 5], 1.0, &mut rng);
        assert_eq!(t.transpose().unwrap().transpose().unwrap(), t);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut params = ModelParams::new();
        params.insert("w", Tensor::<f64>::full(&[3], 1.5));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::<f64>::zeros(&[3]));
        let mut state = AdamState::new(AdamConfig::with_lr(0.1));
        state.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("w").unwrap().as_slice(), &[1.5, 1.5, 1.5]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_single_step_matches_hand_rule() {
        // p=1, g=1, lr=0.1: m_hat = v_hat = 1, so p' = 1 - 0.1/(1 + 1e-8).
        let mut params = ModelParams::new();
        params.insert("p", Tensor::<f64>::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::<f64>::scalar(1.0));
        let mut state = AdamState::new(AdamConfig::with_lr(0.1));
        state.step(&mut params, &grads).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((params.get("p").unwrap().item() - expected).abs() < 1e-15);
        assert!((params.get("p").unwrap().item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // Minimize (p - 2)^2 from p = 0.
        let mut params = ModelParams::new();
        params.insert("p", Tensor::<f64>::scalar(0.0));
        let mut state = AdamState::new(AdamConfig::with_lr(0.05));
        for _ in 0..1000 {
            let p = params.get("p").unwrap().item();
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), Tensor::scalar(2.0 * (p - 2.0)));
            state.step(&mut params, &grads).unwrap();
        }
        assert!((params.get("p").unwrap().item() - 2.0).abs() < 0.01);
    }
}
