//! Dense-array substrate shared by every module: row-major `f64` tensors of
//! rank 1-3, trainable parameters with Adam state, and a seeded RNG whose
//! draw sequence is identical across runs and platforms.

use crate::error::{IfgError, Result};

/// Rank-1..3 real-valued array with explicit shape, flat row-major storage.
///
/// There is no broadcasting anywhere in this crate; call sites reshape
/// explicitly. All arithmetic is 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(IfgError::InvalidArgument(format!(
                "tensor rank must be 1-3, got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(IfgError::InvalidArgument(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(IfgError::shape(
                "DenseTensor::from_vec",
                format!("{expected} elements for {shape:?}"),
                data.len(),
            ));
        }
        Ok(DenseTensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        DenseTensor::from_vec(shape, vec![0.0; n]).expect("zeros: invalid shape")
    }

    pub fn scalar(v: f64) -> Self {
        DenseTensor::from_vec(&[1], vec![v]).unwrap()
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Number of rows when the tensor is viewed as (rows, last_dim).
    pub fn nrows(&self) -> usize {
        self.len() / self.last_dim()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Row `i` of a rank-2 view (all leading dims collapsed).
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.last_dim();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &DenseTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(IfgError::shape(
                "DenseTensor::add_assign",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn validate_finite(&self, context: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(IfgError::NonFinite(context))
        }
    }
}

/// Trainable tensor: value plus gradient and Adam moment estimates, all
/// shape-identical. Single-writer: only the training loop mutates these.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: DenseTensor,
    pub grad: DenseTensor,
    pub adam_m: DenseTensor,
    pub adam_v: DenseTensor,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(value: DenseTensor) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            value,
            grad: DenseTensor::zeros(&shape),
            adam_m: DenseTensor::zeros(&shape),
            adam_v: DenseTensor::zeros(&shape),
            step_count: 0,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Parameter::new(DenseTensor::zeros(shape))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// One bias-corrected Adam step on a single parameter. The gradient is left
/// untouched; the caller zeros it once the whole batch has been applied.
pub fn adam_step(p: &mut Parameter, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
    if lr <= 0.0 {
        return Err(IfgError::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
        return Err(IfgError::InvalidArgument(format!(
            "betas must lie in [0,1), got ({beta1}, {beta2})"
        )));
    }
    p.step_count += 1;
    let t = p.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let n = p.value.len();
    let g = p.grad.as_slice();
    let m = p.adam_m.as_mut_slice();
    let v = p.adam_v.as_mut_slice();
    let val = p.value.as_mut_slice();
    for i in 0..n {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        val[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// SiLU activation `x * sigmoid(x)` — the base term of every KAN edge.
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx silu(x) = sigmoid(x) * (1 + x * (1 - sigmoid(x)))
pub fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Numerically stable softmax of a slice (max-subtraction), written to `out`.
pub fn softmax_slice(xs: &[f64], out: &mut [f64]) {
    debug_assert_eq!(xs.len(), out.len());
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax over the last dimension of a tensor. Errors on non-finite input.
pub fn softmax_lastdim(t: &DenseTensor) -> Result<DenseTensor> {
    t.validate_finite("softmax_lastdim input")?;
    let mut out = DenseTensor::zeros(t.shape());
    let w = t.last_dim();
    for i in 0..t.nrows() {
        let mut buf = vec![0.0; w];
        softmax_slice(t.row(i), &mut buf);
        out.row_mut(i).copy_from_slice(&buf);
    }
    Ok(out)
}

/// Seedable generator with 64-bit state (SplitMix64 scrambling).
///
/// The stream is fully specified by the seed, independent of platform and
/// build flags, which keeps training runs and synthetic scenes bit-identical.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derive an independent stream for a named sub-purpose of `seed`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut r = Rng::new(seed ^ stream.wrapping_mul(0x9E3779B97F4A7C15));
        r.next_u64(); // decorrelate trivially related seeds
        Rng { state: r.next_u64() }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw via Box-Muller (two fresh uniforms per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform index in [0, n). Modulo bias is negligible for n << 2^64.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn tensor_shape_product_must_match() {
        assert!(DenseTensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(DenseTensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(DenseTensor::from_vec(&[], vec![]).is_err());
        assert!(DenseTensor::from_vec(&[2, 0], vec![]).is_err());
        assert!(DenseTensor::from_vec(&[1, 2, 3, 4], vec![0.0; 24]).is_err());
    }

    #[test]
    fn softmax_symmetry_and_single_element() {
        let t = DenseTensor::from_vec(&[3], vec![0.0, 0.0, 0.0]).unwrap();
        let s = softmax_lastdim(&t).unwrap();
        for &v in s.as_slice() {
            assert_close(v, 1.0 / 3.0, 1e-15);
        }
        let t = DenseTensor::from_vec(&[1], vec![5.0]).unwrap();
        let s = softmax_lastdim(&t).unwrap();
        assert_close(s.as_slice()[0], 1.0, 0.0);
    }

    #[test]
    fn softmax_log_weights() {
        // exp/sum oracle: exp(ln k) = k, so weights are k / (1+2+3).
        let t =
            DenseTensor::from_vec(&[3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        let s = softmax_lastdim(&t).unwrap();
        assert_close(s.as_slice()[0], 1.0 / 6.0, 1e-15);
        assert_close(s.as_slice()[1], 2.0 / 6.0, 1e-15);
        assert_close(s.as_slice()[2], 3.0 / 6.0, 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let t = DenseTensor::from_vec(&[2], vec![0.0, f64::NAN]).unwrap();
        assert!(softmax_lastdim(&t).is_err());
        let t = DenseTensor::from_vec(&[2], vec![0.0, f64::INFINITY]).unwrap();
        assert!(softmax_lastdim(&t).is_err());
    }

    #[test]
    fn softmax_sums_to_one_and_shift_invariant() {
        let mut rng = Rng::new(7);
        for w in [1usize, 2, 5, 17, 64] {
            let data: Vec<f64> = (0..w * 3).map(|_| rng.normal() * 4.0).collect();
            let t = DenseTensor::from_vec(&[3, w], data.clone()).unwrap();
            let s = softmax_lastdim(&t).unwrap();
            for i in 0..3 {
                let sum: f64 = s.row(i).iter().sum();
                assert_close(sum, 1.0, 1e-12);
            }
            // adding a constant per row leaves the result unchanged
            let shifted: Vec<f64> = data.iter().map(|v| v + 11.5).collect();
            let t2 = DenseTensor::from_vec(&[3, w], shifted).unwrap();
            let s2 = softmax_lastdim(&t2).unwrap();
            for (a, b) in s.as_slice().iter().zip(s2.as_slice()) {
                assert_close(*a, *b, 1e-12);
            }
        }
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        assert_close(silu(1.0), 1.0 / (1.0 + (-1f64).exp()), 1e-15);
        assert_close(silu(40.0), 40.0, 1e-9); // asymptote
    }

    #[test]
    fn silu_deriv_matches_finite_difference() {
        let h = 1e-6;
        for &x in &[-2.5, -0.3, 0.0, 0.7, 3.1] {
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert_close(silu_deriv(x), fd, 1e-8);
        }
    }

    #[test]
    fn adam_zero_grad_is_identity() {
        let mut p = Parameter::new(DenseTensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        for _ in 0..5 {
            adam_step(&mut p, 0.1, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
        }
        assert_eq!(p.value.as_slice(), &[1.0, -2.0, 0.5]);
        assert_eq!(p.step_count, 5);
    }

    #[test]
    fn adam_first_step_hand_checked() {
        // m̂ = v̂ = 1 after one step with grad 1, so the update is lr/(1+eps).
        let mut p = Parameter::new(DenseTensor::scalar(1.0));
        p.grad.as_mut_slice()[0] = 1.0;
        adam_step(&mut p, 0.1, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + ADAM_EPS);
        assert_close(p.value.as_slice()[0], expected, 1e-15);
        // grad untouched
        assert_eq!(p.grad.as_slice()[0], 1.0);
    }

    #[test]
    fn adam_constant_grad_decreases_value() {
        let mut p = Parameter::new(DenseTensor::scalar(1.0));
        let mut prev = 1.0;
        for _ in 0..2 {
            p.grad.as_mut_slice()[0] = 1.0;
            adam_step(&mut p, 0.1, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
            let cur = p.value.as_slice()[0];
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn adam_rejects_bad_lr() {
        let mut p = Parameter::new(DenseTensor::scalar(1.0));
        assert!(adam_step(&mut p, 0.0, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).is_err());
        assert!(adam_step(&mut p, -1.0, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).is_err());
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = Rng::new(0xDEADBEEF);
        let mut b = Rng::new(0xDEADBEEF);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(0xDEADBEF0);
        assert_ne!(Rng::new(0xDEADBEEF).next_u64(), c.next_u64());
    }

    #[test]
    fn rng_shuffle_deterministic() {
        let mut v1: Vec<u32> = (0..100).collect();
        let mut v2: Vec<u32> = (0..100).collect();
        Rng::new(3).shuffle(&mut v1);
        Rng::new(3).shuffle(&mut v2);
        assert_eq!(v1, v2);
        let mut v3: Vec<u32> = (0..100).collect();
        Rng::new(4).shuffle(&mut v3);
        assert_ne!(v1, v3);
    }
}
