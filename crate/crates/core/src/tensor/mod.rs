//! Dense row-major tensors of 64-bit reals and the reverse-mode tape built on them.

pub(crate) mod kernels;
mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, ParamError};
pub use tape::{ElementwiseOp, Fault, Tape, Var};

use crate::error::{Error, Result};

/// A dense tensor of rank 1 to 3 with an optional gradient slot.
///
/// A scalar is represented with shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor shape must have rank 1..=3 with positive dims, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} holds {numel} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; numel]).expect("zeros: invalid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).unwrap()
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::new(vec![data.len()], data).expect("vector must be non-empty")
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Row `i` of the tensor viewed as `[numel / last_dim, last_dim]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Resets the gradient slot to zeros (allocating it if absent).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.fill(0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product over the last two axes.
    ///
    /// Supports `[k]·[k,n]`, `[m,k]·[k,n]`, `[B,m,k]·[k,n]` (shared right operand) and
    /// `[B,m,k]·[B,k,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let plan = MatmulPlan::new(&self.shape, &rhs.shape)?;
        let mut out = vec![0.0; plan.out_numel()];
        plan.forward(&self.data, &rhs.data, &mut out);
        Tensor::new(plan.out_shape.clone(), out)
    }

    pub fn transpose_last(&self) -> Result<Tensor> {
        if self.rank() < 2 {
            return Err(Error::Contract("transpose needs rank >= 2".into()));
        }
        let (out_shape, data) = transpose_last_raw(&self.shape, &self.data);
        Tensor::new(out_shape, data)
    }

    pub fn softmax_rows(&self) -> Tensor {
        let mut out = vec![0.0; self.numel()];
        kernels::softmax_rows(self.last_dim(), &self.data, &mut out);
        Tensor::new(self.shape.clone(), out).unwrap()
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = self.last_dim();
        if gamma.shape != [d] || beta.shape != [d] {
            return Err(Error::dim("layer_norm", &self.shape, &gamma.shape));
        }
        if eps <= 0.0 {
            return Err(Error::config("layer_norm eps must be > 0"));
        }
        let mut out = vec![0.0; self.numel()];
        kernels::layer_norm(d, &self.data, &gamma.data, &beta.data, eps, &mut out);
        Tensor::new(self.shape.clone(), out)
    }

    /// Elementwise binary op with trailing-axis broadcast of `rhs`.
    pub fn zip_with(&self, rhs: &Tensor, op: ElementwiseOp) -> Result<Tensor> {
        check_trailing_broadcast(op.name(), &self.shape, &rhs.shape)?;
        let m = rhs.numel();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &a)| op.apply(a, rhs.data[i % m]))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, ElementwiseOp::Add)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, ElementwiseOp::Mul)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect()).unwrap()
    }

    pub fn relu(&self) -> Tensor {
        // NaN passes through so numerical faults stay visible
        self.map(|v| if v < 0.0 { 0.0 } else { v })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Index of the maximum of each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let d = self.last_dim();
        self.data
            .chunks_exact(d)
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

pub(crate) fn check_trailing_broadcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<()> {
    if rhs.len() > lhs.len() || lhs[lhs.len() - rhs.len()..] != *rhs {
        return Err(Error::dim(op, lhs, rhs));
    }
    Ok(())
}

pub(crate) fn transpose_last_raw(shape: &[usize], data: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let batch = data.len() / (rows * cols);
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let src = &data[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(r - 2, r - 1);
    (out_shape, out)
}

/// Resolved dimensions of a (possibly batched) matrix product.
#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub rhs_batched: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let bad = || Error::dim("matmul", a, b);
        match (a.len(), b.len()) {
            (1, 2) => {
                if b[0] != a[0] {
                    return Err(bad());
                }
                Ok(Self {
                    batch: 1,
                    m: 1,
                    k: a[0],
                    n: b[1],
                    rhs_batched: false,
                    out_shape: vec![b[1]],
                })
            }
            (2, 2) | (3, 2) => {
                let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
                if b[0] != k {
                    return Err(bad());
                }
                let batch = if a.len() == 3 { a[0] } else { 1 };
                let mut out_shape = a.to_vec();
                *out_shape.last_mut().unwrap() = b[1];
                Ok(Self {
                    batch,
                    m,
                    k,
                    n: b[1],
                    rhs_batched: false,
                    out_shape,
                })
            }
            (3, 3) => {
                if a[0] != b[0] || a[2] != b[1] {
                    return Err(bad());
                }
                Ok(Self {
                    batch: a[0],
                    m: a[1],
                    k: a[2],
                    n: b[2],
                    rhs_batched: true,
                    out_shape: vec![a[0], a[1], b[2]],
                })
            }
            _ => Err(bad()),
        }
    }

    pub fn out_numel(&self) -> usize {
        self.batch * self.m * self.n
    }

    pub fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if !self.rhs_batched {
            // Shared rhs: fold the batch into the row dimension.
            kernels::gemm_nn(self.batch * m, k, n, a, b, out);
            return;
        }
        for bi in 0..self.batch {
            kernels::gemm_nn(
                m,
                k,
                n,
                &a[bi * m * k..(bi + 1) * m * k],
                &b[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
    }

    /// Accumulates `dA = dC·Bᵀ` and `dB = Aᵀ·dC`.
    pub fn backward(&self, a: &[f64], b: &[f64], dc: &[f64], da: &mut [f64], db: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if !self.rhs_batched {
            let rows = self.batch * m;
            kernels::gemm_nt(rows, n, k, dc, b, da);
            kernels::gemm_tn(rows, k, n, a, dc, db);
            return;
        }
        for bi in 0..self.batch {
            let a_s = &a[bi * m * k..(bi + 1) * m * k];
            let b_s = &b[bi * k * n..(bi + 1) * k * n];
            let dc_s = &dc[bi * m * n..(bi + 1) * m * n];
            kernels::gemm_nt(m, n, k, dc_s, b_s, &mut da[bi * m * k..(bi + 1) * m * k]);
            kernels::gemm_tn(m, k, n, a_s, dc_s, &mut db[bi * k * n..(bi + 1) * k * n]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    out[i * n + j] += a.data()[i * k + t] * b.data()[t * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let b = Tensor::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&b).unwrap(), b);

        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[[5.0, 6.0], [7.0, 8.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);

        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(z.matmul(&b).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { op: "matmul", .. }));
    }

    #[test]
    fn batched_matmul_matches_per_sample() {
        let a = Tensor::new(vec![2, 2, 3], (0..12).map(|v| v as f64).collect()).unwrap();
        let b = Tensor::new(vec![2, 3, 2], (0..12).map(|v| (v as f64) - 4.0).collect()).unwrap();
        let c = a.matmul(&b).unwrap();
        for bi in 0..2 {
            let ai = Tensor::new(vec![2, 3], a.data()[bi * 6..bi * 6 + 6].to_vec()).unwrap();
            let bb = Tensor::new(vec![3, 2], b.data()[bi * 6..bi * 6 + 6].to_vec()).unwrap();
            assert_eq!(&c.data()[bi * 4..bi * 4 + 4], naive_matmul(&ai, &bb).as_slice());
        }
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::from_rows(&[[0.0, 0.0]]).unwrap().softmax_rows();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = Tensor::from_rows(&[[0.0, 3f64.ln()]]).unwrap().softmax_rows();
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);

        let s = Tensor::from_rows(&[[1000.0, 1000.0 + 2f64.ln()]]).unwrap().softmax_rows();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::vector(vec![1.0, 1.0]);
        let zero = Tensor::vector(vec![0.0, 0.0]);

        let x = Tensor::vector(vec![7.0, 7.0, 7.0]);
        let gamma = Tensor::vector(vec![2.0, -1.0, 0.5]);
        let beta = Tensor::vector(vec![0.1, 0.2, 0.3]);
        assert_eq!(x.layer_norm(&gamma, &beta, 1e-5).unwrap().data(), beta.data());

        let y = Tensor::vector(vec![1.0, -1.0]).layer_norm(&one, &zero, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);

        let three = Tensor::vector(vec![3.0, 3.0]);
        let y = Tensor::vector(vec![2.0, 4.0])
            .layer_norm(&three, &one, 1e-14)
            .unwrap();
        assert!((y.data()[0] + 2.0).abs() < 1e-9 && (y.data()[1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = Tensor::vector(vec![1.0, 1.0]);
        assert!(matches!(x.layer_norm(&g, &g, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn elementwise_examples() {
        let x = Tensor::from_rows(&[[1.5, -2.0], [3.0, 0.25]]).unwrap();
        assert_eq!(x.add(&Tensor::zeros(&[2])).unwrap(), x);
        assert_eq!(Tensor::vector(vec![-1.0, 0.0, 2.0]).relu().data(), &[0.0, 0.0, 2.0]);
        let s = Tensor::from_rows(&[[2.0, 4.0]]).unwrap().scale(1.0 / 4f64.sqrt());
        assert_eq!(s.data(), &[1.0, 2.0]);
        assert!(x.add(&Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let t = Tensor::from_rows(&[[1.0, 3.0, 3.0], [0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(t.argmax_rows(), vec![1, 0]);
    }

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    proptest! {
        #[test]
        fn matmul_matches_triple_loop_on_integers(
            m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in any::<u64>()
        ) {
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((s >> 33) % 21) as f64 - 10.0 };
            let a = Tensor::new(vec![m, k], (0..m * k).map(|_| next()).collect()).unwrap();
            let b = Tensor::new(vec![k, n], (0..k * n).map(|_| next()).collect()).unwrap();
            let got = a.matmul(&b).unwrap();
            let want = naive_matmul(&a, &b);
            prop_assert_eq!(got.data(), want.as_slice());
        }

        #[test]
        fn softmax_rows_are_distributions_and_shift_invariant(
            rows in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 1..8), 1..6),
            shift in -100.0f64..100.0,
        ) {
            let width = rows[0].len();
            let rows: Vec<Vec<f64>> = rows
                .into_iter()
                .map(|mut r| {
                    r.resize(width, 0.0);
                    r
                })
                .collect();
            let x = Tensor::from_rows(&rows).unwrap();
            let s = x.softmax_rows();
            for r in s.data().chunks(width) {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            let shifted = x.map(|v| v + shift).softmax_rows();
            for (a, b) in s.data().iter().zip(shifted.data()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn layer_norm_standardizes(
            x in proptest::collection::vec(-100.0f64..100.0, 2..32),
        ) {
            let d = x.len();
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assume!(var > 1e-2);
            let eps = 1e-12;
            let y = Tensor::vector(x)
                .layer_norm(&Tensor::full(&[d], 1.0), &Tensor::zeros(&[d]), eps)
                .unwrap();
            let ym = y.sum() / d as f64;
            let yv = y.data().iter().map(|v| (v - ym).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(ym.abs() <= 1e-9);
            prop_assert!((yv - 1.0).abs() <= 1e-6);
        }
    }
}
