//! Dense row-major tensors and the handful of kernels a ViT forward pass needs.
//!
//! Every reduction runs in a fixed left-to-right order in the tensor's own
//! scalar type, so identical inputs give bit-identical outputs no matter how
//! many threads the caller uses.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Layer-norm epsilon used throughout the engine.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(vec![n, n], |i| {
            if i / n == i % n {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts every element to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Rows `indices` of a rank-2 tensor, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let (rows, cols) = self.dims2("select_rows")?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::shape("select_rows", format!("row {i} of {rows}")));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(vec![indices.len(), cols], data)
    }

    /// Columns `start..start + width` of a rank-2 tensor.
    pub fn columns(&self, start: usize, width: usize) -> Result<Self> {
        let (rows, cols) = self.dims2("columns")?;
        if start + width > cols {
            return Err(Error::shape(
                "columns",
                format!("columns {start}..{} of {cols}", start + width),
            ));
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Self::new(vec![rows, width], data)
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_columns(parts: &[Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat_columns", "no inputs"));
        };
        let (rows, _) = first.dims2("concat_columns")?;
        let mut total = 0;
        for p in parts {
            let (r, c) = p.dims2("concat_columns")?;
            if r != rows {
                return Err(Error::shape("concat_columns", format!("{r} rows vs {rows}")));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Self::new(vec![rows, total], data)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (rows, cols) = self.dims2("transpose")?;
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = self.data[r * cols + c];
            }
        }
        Self::new(vec![cols, rows], data)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }
}

/// Standard matrix product `a[m,k] · b[k,n]`.
///
/// Each output element accumulates over `k` from left to right starting at
/// zero, i.e. exactly the naive triple loop, visited in i-k-j order for cache
/// friendliness.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("[{m},{k}] x [{k2},{n}]"),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let acc = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let lhs = a.data[i * k + p];
            let rhs = &b.data[p * n..(p + 1) * n];
            for (o, &r) in acc.iter_mut().zip(rhs) {
                *o = *o + lhs * r;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m,k] · b[n,k]ᵀ`.
///
/// Same accumulation order as [`matmul`] against the explicit transpose, so
/// the two agree bit for bit.
pub fn matmul_transposed<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul_transposed")?;
    let (n, k2) = b.dims2("matmul_transposed")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul_transposed",
            format!("[{m},{k}] x [{n},{k2}]^T"),
        ));
    }
    matmul(a, &b.transpose()?)
}

/// Elementwise sum of two tensors of identical shape.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", a.shape, b.shape),
        ));
    }
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape.clone(), data)
}

/// Adds `bias[d]` to every row of `x[t,d]`.
pub fn add_row_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d) = x.dims2("add_row_bias")?;
    if bias.shape != [d] {
        return Err(Error::shape(
            "add_row_bias",
            format!("bias {:?} for width {d}", bias.shape),
        ));
    }
    let data = x
        .data
        .chunks_exact(d)
        .flat_map(|row| row.iter().zip(&bias.data).map(|(&v, &b)| v + b))
        .collect();
    Tensor::new(x.shape.clone(), data)
}

/// `x · w + b`, the affine map used by every linear layer.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    add_row_bias(&matmul(x, w)?, b)
}

/// Row-wise softmax over the `allowed` columns only.
///
/// Disallowed columns are skipped when taking the row maximum and the
/// normaliser and receive weight exactly zero, so the output does not depend
/// on their logits at all (not even through rounding).
pub fn masked_softmax<T: Scalar>(logits: &Tensor<T>, allowed: &[bool]) -> Result<Tensor<T>> {
    let (q, t) = logits.dims2("masked_softmax")?;
    if allowed.len() != t {
        return Err(Error::shape(
            "masked_softmax",
            format!("mask of length {} for {t} columns", allowed.len()),
        ));
    }
    if !allowed.iter().any(|&a| a) {
        return Err(Error::InvalidMask("every column is disallowed".into()));
    }
    let mut out = vec![T::zero(); q * t];
    for r in 0..q {
        let row = logits.row(r);
        let dst = &mut out[r * t..(r + 1) * t];
        let mut max = T::neg_infinity();
        for (&v, _) in row.iter().zip(allowed).filter(|(_, &a)| a) {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for ((o, &v), &a) in dst.iter_mut().zip(row).zip(allowed) {
            if a {
                *o = (v - max).exp();
                sum = sum + *o;
            }
        }
        for (o, &a) in dst.iter_mut().zip(allowed) {
            if a {
                *o = *o / sum;
            }
        }
    }
    Tensor::new(vec![q, t], out)
}

/// Unmasked row-wise softmax.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, t) = logits.dims2("softmax")?;
    masked_softmax(logits, &vec![true; t])
}

/// Softmax that overwrites disallowed logits with `sentinel` instead of
/// excluding them.
///
/// With a finite sentinel the disallowed columns keep a small positive weight
/// and their values leak into the output. This is the classic way to get
/// attention masking subtly wrong; it exists so tests can confirm the
/// falsification harness notices.
pub fn sentinel_softmax<T: Scalar>(
    logits: &Tensor<T>,
    allowed: &[bool],
    sentinel: T,
) -> Result<Tensor<T>> {
    let (q, t) = logits.dims2("sentinel_softmax")?;
    if allowed.len() != t {
        return Err(Error::shape(
            "sentinel_softmax",
            format!("mask of length {} for {t} columns", allowed.len()),
        ));
    }
    let mut patched = logits.clone();
    for r in 0..q {
        for (c, &a) in allowed.iter().enumerate() {
            if !a {
                patched.data[r * t + c] = sentinel;
            }
        }
    }
    softmax(&patched)
}

/// Per-row layer normalisation of `x[t,d]` with population variance.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (_, d) = x.dims2("layer_norm")?;
    if gain.shape != [d] || bias.shape != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("gain {:?} / bias {:?} for width {d}", gain.shape, bias.shape),
        ));
    }
    let width = T::from_usize(d).expect("width fits the scalar type");
    let mut out = Vec::with_capacity(x.len());
    for row in x.data.chunks_exact(d) {
        let mean = row.iter().fold(T::zero(), |acc, &v| acc + v) / width;
        let var = row
            .iter()
            .fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean))
            / width;
        let inv = (var + eps).sqrt().recip();
        for ((&v, &g), &b) in row.iter().zip(&gain.data).zip(&bias.data) {
            out.push((v - mean) * inv * g + b);
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// GELU with the exact error function: `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
    x.map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()))
}

/// GELU with the common tanh approximation.
pub fn gelu_tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    x.map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: usize, cols: usize, v: &[f32]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2("naive").unwrap();
        let (_, n) = b.dims2("naive").unwrap();
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_fn(vec![rows, cols], |_| rng.random_range(-2.0f32..2.0))
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 3], vec![]).is_ok());
    }

    #[test]
    fn matmul_identity_and_projector() {
        let m = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&Tensor::identity(2), &m).unwrap(), m);
        let p = t2(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = t2(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&p, &b).unwrap().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_matches_naive_oracle_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for m in 1..=16 {
            let k = 1 + (m * 7) % 16;
            let n = 1 + (m * 5) % 16;
            let a = random(&mut rng, m, k);
            let b = random(&mut rng, k, n);
            let fast = matmul(&a, &b).unwrap();
            let slow = naive_matmul(&a, &b);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&fast), bits(&slow), "{m}x{k}x{n}");
        }
        let a = random(&mut rng, 8, 8);
        let b = random(&mut rng, 8, 8);
        let diff = matmul(&a, &b)
            .unwrap()
            .data()
            .iter()
            .zip(naive_matmul(&a, &b).data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn matmul_transposed_matches_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 6, 7);
        let expected = naive_matmul(&a, &b.transpose().unwrap());
        assert_eq!(matmul_transposed(&a, &b).unwrap(), expected);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t2(1, 2, &[0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = masked_softmax(&t2(1, 2, &[3.7, 999.0]), &[true, false]).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_empty_mask() {
        let err = masked_softmax(&t2(1, 2, &[1.0, 2.0]), &[false, false]).unwrap_err();
        assert!(matches!(err, Error::InvalidMask(_)));
    }

    #[test]
    fn sentinel_softmax_leaks_weight() {
        let s = sentinel_softmax(&t2(1, 2, &[0.0, 5.0]), &[true, false], -2.0).unwrap();
        assert!(s.data()[1] > 0.0);
    }

    proptest! {
        #[test]
        fn masked_softmax_ignores_disallowed_logits(
            row in proptest::collection::vec(-30.0f32..30.0, 2..24),
            mask_bits in any::<u32>(),
            junk in proptest::collection::vec(prop_oneof![
                -1e30f32..1e30,
                Just(f32::MAX),
                Just(f32::MIN),
            ], 24),
        ) {
            let t = row.len();
            let mut allowed: Vec<bool> = (0..t).map(|i| mask_bits >> (i % 32) & 1 == 1).collect();
            allowed[0] = true;
            let a = masked_softmax(&t2(1, t, &row), &allowed).unwrap();
            let other: Vec<f32> = row
                .iter()
                .zip(&allowed)
                .enumerate()
                .map(|(i, (&v, &ok))| if ok { v } else { junk[i] })
                .collect();
            let b = masked_softmax(&t2(1, t, &other), &allowed).unwrap();
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a), bits(&b));

            let sum: f32 = a.data().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            for (&w, &ok) in a.data().iter().zip(&allowed) {
                prop_assert!((0.0..=1.0).contains(&w));
                if !ok {
                    prop_assert_eq!(w, 0.0);
                }
            }
        }

        #[test]
        fn layer_norm_standardises_rows(row in proptest::collection::vec(-50.0f32..50.0, 2..32)) {
            let d = row.len();
            let spread = row.iter().cloned().fold(f32::MIN, f32::max)
                - row.iter().cloned().fold(f32::MAX, f32::min);
            prop_assume!(spread > 0.1);
            let x = t2(1, d, &row);
            let y = layer_norm(&x, &Tensor::full(vec![d], 1.0), &Tensor::zeros(vec![d]), 1e-6).unwrap();
            let mean: f64 = y.data().iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var: f64 = y.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(vec![4], 1.0f32);
        let zeros = Tensor::zeros(vec![4]);
        let y = layer_norm(&t2(1, 4, &[5.0; 4]), &ones, &zeros, 1e-6).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);

        let y = layer_norm(
            &t2(1, 2, &[1.0, -1.0]),
            &Tensor::full(vec![2], 1.0),
            &Tensor::zeros(vec![2]),
            1e-6,
        )
        .unwrap();
        // closed form (x - mean) / sqrt(var + eps) with mean 0, var 1
        let expected = (1.0f64 / (1.0f64 + 1e-6).sqrt()) as f32;
        assert!((y.data()[0] - expected).abs() <= 1e-6);
        assert!((y.data()[1] + expected).abs() <= 1e-6);

        let b = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let x = t2(2, 4, &[1.0, 7.0, -3.0, 0.25, 9.0, 9.5, 0.0, 1.0]);
        let y = layer_norm(&x, &Tensor::zeros(vec![4]), &b, 1e-6).unwrap();
        assert_eq!(y.row(0), b.data());
        assert_eq!(y.row(1), b.data());
    }

    /// Maclaurin series for erf evaluated in f64, independent of libm.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..60 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn gelu_examples() {
        let x = Tensor::new(vec![4], vec![0.0f32, 1.0, 30.0, -30.0]).unwrap();
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        // Φ(1) to 40 digits from an arbitrary-precision evaluation
        let phi1 = 0.841_344_746_068_542_9_f64;
        assert!((y.data()[1] as f64 - phi1).abs() <= 1e-6);
        let series = 0.5 * (1.0 + erf_series(std::f64::consts::FRAC_1_SQRT_2));
        assert!((series - phi1).abs() < 1e-14);
        assert!((y.data()[2] - 30.0).abs() < 1e-5);
        assert!(y.data()[3].abs() < 1e-5);
    }

    #[test]
    fn gelu_variants_are_close_but_distinct() {
        let x = Tensor::new(vec![3], vec![-1.5f64, 0.3, 2.0]).unwrap();
        let exact = gelu(&x);
        let approx = gelu_tanh(&x);
        for (a, b) in exact.data().iter().zip(approx.data()) {
            assert!((a - b).abs() < 1e-3);
        }
        assert_ne!(exact, approx);
    }

    #[test]
    fn argmax_ties_to_lowest_index() {
        assert_eq!(argmax(&[0.1f32, 0.9, 0.3]), Some(1));
        assert_eq!(argmax(&[0.5f32, 0.5]), Some(0));
        assert_eq!(argmax::<f32>(&[]), None);
    }

    #[test]
    fn column_helpers_round_trip() {
        let x = t2(2, 4, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let left = x.columns(0, 1).unwrap();
        let right = x.columns(1, 3).unwrap();
        assert_eq!(Tensor::concat_columns(&[left, right]).unwrap(), x);
        assert_eq!(x.select_rows(&[1]).unwrap().data(), &[5.0, 6.0, 7.0, 8.0]);
        assert!(x.columns(2, 3).is_err());
    }
}
