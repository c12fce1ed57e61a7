//! Dense row-major matrices in double precision, the softmax family, and a
//! central-difference gradient checker.
//!
//! Every weight matrix, bias and activation in the crate lives in a
//! [`Tensor`]. Vectors are plain `&[f64]` slices; biases are stored as
//! `n × 1` tensors so checkpoints see one uniform blob type.

use std::fmt;

use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}) ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.iter().take(16)).finish()
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericError> {
        if data.len() != rows * cols {
            return Err(NumericError::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Builds a tensor from nested rows. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumericError::Shape {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Column vector `n × 1`.
    pub fn column(values: Vec<f64>) -> Self {
        Tensor {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    /// Entries drawn uniformly from `(-scale, scale)`.
    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.uniform(-scale, scale))
            .collect();
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|x| *x *= k);
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `self += k * other`
    pub fn add_scaled(&mut self, other: &Tensor, k: f64) -> Result<(), NumericError> {
        self.check_same("add_scaled", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, NumericError> {
        if self.cols != other.rows {
            return Err(NumericError::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, NumericError> {
        if x.len() != self.cols {
            return Err(NumericError::Shape {
                op: "matvec",
                left: self.shape(),
                right: (x.len(), 1),
            });
        }
        let mut out = vec![0.0; self.rows];
        self.matvec_acc(x, &mut out);
        Ok(out)
    }

    /// `out += W x`. Shapes are the caller's responsibility.
    #[inline]
    pub(crate) fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        self.matvec_rows_acc(0, x, out);
    }

    /// `out += W[first..first + out.len()] x`.
    #[inline]
    pub(crate) fn matvec_rows_acc(&self, first: usize, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert!(first + out.len() <= self.rows);
        let cols = self.cols;
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[(first + i) * cols..(first + i + 1) * cols];
            *o += dot(row, x);
        }
    }

    /// `out += W^T y`.
    #[inline]
    pub(crate) fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        self.matvec_t_rows_acc(0, y, out);
    }

    /// `out += W[first..first + y.len()]^T y`.
    #[inline]
    pub(crate) fn matvec_t_rows_acc(&self, first: usize, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.cols);
        let cols = self.cols;
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            let row = &self.data[(first + i) * cols..(first + i + 1) * cols];
            for (o, w) in out.iter_mut().zip(row) {
                *o += yi * w;
            }
        }
    }

    /// `W += y x^T`.
    #[inline]
    pub(crate) fn add_outer(&mut self, y: &[f64], x: &[f64]) {
        self.add_outer_rows(0, y, x);
    }

    /// `W[first..first + y.len()] += y x^T`.
    #[inline]
    pub(crate) fn add_outer_rows(&mut self, first: usize, y: &[f64], x: &[f64]) {
        debug_assert_eq!(x.len(), self.cols);
        let cols = self.cols;
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            let row = &mut self.data[(first + i) * cols..(first + i + 1) * cols];
            for (w, xv) in row.iter_mut().zip(x) {
                *w += yi * xv;
            }
        }
    }

    pub(crate) fn add_to_slice(&mut self, v: &[f64]) {
        for (a, b) in self.data.iter_mut().zip(v) {
            *a += b;
        }
    }

    fn check_same(&self, op: &'static str, other: &Tensor) -> Result<(), NumericError> {
        if self.shape() != other.shape() {
            return Err(NumericError::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorize without reassociation
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-space zero. Smaller than every finite log-probability and absorbed
/// by [`log_add`].
pub const LOG_ZERO: f64 = f64::NEG_INFINITY;

#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == LOG_ZERO {
        return b;
    }
    if b == LOG_ZERO {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(LOG_ZERO, f64::max);
    if max == LOG_ZERO {
        return LOG_ZERO;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, NumericError> {
    if logits.is_empty() {
        return Err(NumericError::Empty("softmax"));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(NumericError::NonFinite("softmax"));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>, NumericError> {
    if logits.is_empty() {
        return Err(NumericError::Empty("log_softmax"));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(NumericError::NonFinite("log_softmax"));
    }
    Ok(log_softmax_unchecked(logits))
}

pub(crate) fn log_softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|v| v - lse).collect()
}

/// Default finite-difference step for [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares `analytic` against central differences of `f` at `x` and
/// returns the worst coordinate of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &[f64], analytic: &[f64]) -> Result<f64, NumericError>
where
    F: FnMut(&[f64]) -> f64,
{
    grad_check_with_step(f, x, analytic, GRAD_CHECK_STEP)
}

pub fn grad_check_with_step<F>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<f64, NumericError>
where
    F: FnMut(&[f64]) -> f64,
{
    if x.len() != analytic.len() {
        return Err(NumericError::Shape {
            op: "grad_check",
            left: (x.len(), 1),
            right: (analytic.len(), 1),
        });
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(NumericError::NonFinite("grad_check"));
        }
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// A model (or gradient buffer) made of named tensors in a fixed order.
///
/// `named_tensors` and `tensors_mut` must enumerate the same tensors in the
/// same order; optimizers, clipping, checkpoints and gradient checks rely on
/// it.
pub trait ParamTensors {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.named_tensors() {
            out.extend_from_slice(t.as_slice());
        }
        out
    }

    /// Overwrites every parameter from a flat vector laid out as [`flatten`]
    /// produces it.
    ///
    /// [`flatten`]: ParamTensors::flatten
    fn assign_flat(&mut self, values: &[f64]) -> Result<(), NumericError> {
        let total = self.param_count();
        if values.len() != total {
            return Err(NumericError::Shape {
                op: "assign_flat",
                left: (total, 1),
                right: (values.len(), 1),
            });
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.as_mut_slice()
                .copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn zero_all(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn global_norm(&self) -> f64 {
        self.named_tensors()
            .iter()
            .map(|(_, t)| t.norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

impl ParamTensors for Tensor {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![(String::new(), self)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![self]
    }
}

/// Returns a copy of `model` with every parameter set to zero; used as a
/// gradient accumulator of matching shape.
pub fn zeros_like<T: ParamTensors + Clone>(model: &T) -> T {
    let mut z = model.clone();
    z.zero_all();
    z
}

/// `acc += other`, tensor by tensor.
pub fn accumulate<T: ParamTensors>(acc: &mut T, other: &T) -> Result<(), NumericError> {
    let src = other.named_tensors();
    let dst = acc.tensors_mut();
    if src.len() != dst.len() {
        return Err(NumericError::Shape {
            op: "accumulate",
            left: (dst.len(), 1),
            right: (src.len(), 1),
        });
    }
    for (d, (_, s)) in dst.into_iter().zip(src) {
        d.add_scaled(s, 1.0)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_times_matrix() {
        let mut rng = Rng::new(1);
        let a = Tensor::uniform(2, 5, 1.0, &mut rng);
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn scalar_product() {
        let a = Tensor::from_vec(1, 1, vec![2.0]).unwrap();
        let b = Tensor::from_vec(1, 1, vec![3.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().as_slice(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(42);
        let a = Tensor::uniform(5, 4, 2.0, &mut rng);
        let b = Tensor::uniform(4, 3, 2.0, &mut rng);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(4, 1);
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(
            err,
            NumericError::Shape {
                op: "matmul",
                left: (2, 3),
                right: (4, 1)
            }
        );
        assert!(err.to_string().contains("(2, 3)") && err.to_string().contains("(4, 1)"));
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let n = 1 + rng.below(5) as usize;
            let m = 1 + rng.below(5) as usize;
            let p = 1 + rng.below(5) as usize;
            let q = 1 + rng.below(5) as usize;
            let a = Tensor::uniform(n, m, 1.0, &mut rng);
            let b = Tensor::uniform(m, p, 1.0, &mut rng);
            let c = Tensor::uniform(p, q, 1.0, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn matvec_helpers_agree_with_matmul() {
        let mut rng = Rng::new(3);
        let w = Tensor::uniform(6, 4, 1.0, &mut rng);
        let x: Vec<f64> = (0..4).map(|i| i as f64 * 0.3 - 0.5).collect();
        let y: Vec<f64> = (0..6).map(|i| 0.1 * i as f64).collect();
        let via_mm = w.matmul(&Tensor::column(x.clone())).unwrap();
        for (a, b) in w.matvec(&x).unwrap().iter().zip(via_mm.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut t = vec![0.0; 4];
        w.matvec_t_acc(&y, &mut t);
        let via_t = w.transpose().matvec(&y).unwrap();
        for (a, b) in t.iter().zip(&via_t) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ln2() {
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariant() {
        let x = [0.3, -1.2, 4.0, 0.0];
        let shifted: Vec<f64> = x.iter().map(|v| v + 123.4).collect();
        let a = softmax(&x).unwrap();
        let b = softmax(&shifted).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        assert_eq!(softmax(&[]), Err(NumericError::Empty("softmax")));
    }

    #[test]
    fn grad_check_square() {
        let err = grad_check(|x| x[0] * x[0], &[3.0], &[6.0]).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_constant() {
        let err = grad_check(|_| 4.2, &[1.0, -2.0], &[0.0, 0.0]).unwrap();
        assert!(err < 1e-10);
    }

    #[test]
    fn grad_check_flags_non_finite() {
        let r = grad_check(|x| x[0].ln(), &[0.0], &[1.0]);
        assert_eq!(r, Err(NumericError::NonFinite("grad_check")));
    }

    #[test]
    fn log_add_handles_log_zero() {
        assert_eq!(log_add(LOG_ZERO, -1.5), -1.5);
        assert_eq!(log_add(LOG_ZERO, LOG_ZERO), LOG_ZERO);
        assert!((log_add(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_a_distribution(xs in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
                let p = softmax(&xs).unwrap();
                let total: f64 = p.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|v| *v >= 0.0));
            }
        }
    }
}
