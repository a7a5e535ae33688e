//! Dense row-major tensors of rank 1 to 3 and the handful of kernels the
//! fusion stack is built from.
//!
//! Every kernel is a pure function with a fixed accumulation order, so equal
//! inputs always produce bit-identical outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type used everywhere in the crate.
pub type Scalar = f64;

pub const MAX_RANK: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<Scalar>) -> Result<Self> {
        validate_shape("new", shape)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::invalid(
                "new",
                shape,
                format!("data length {} != {}", data.len(), expected),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: Scalar) -> Self {
        validate_shape("full", shape).expect("invalid shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<Scalar>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[Scalar]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::new(&[rows.len(), cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Scalar> {
        self.data
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> Scalar {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: Scalar) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[Scalar] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [Scalar] {
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> Scalar {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> Scalar {
        self.data.iter().sum()
    }

    /// Reads the rows selected by `indices` into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        self.expect_rank("gather_rows", 2)?;
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::invalid(
                    "gather_rows",
                    &self.shape,
                    format!("row index {i} out of range"),
                ));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(&[indices.len(), c], data)
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        self.expect_rank("slice_rows", 2)?;
        if start > end || end > self.rows() {
            return Err(Error::invalid(
                "slice_rows",
                &self.shape,
                format!("range {start}..{end} out of bounds"),
            ));
        }
        let c = self.cols();
        Self::new(&[end - start, c], self.data[start * c..end * c].to_vec())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        validate_shape("reshape", shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        self.expect_rank("transpose", 2)?;
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(&[c, r], out)
    }

    pub fn scale(&self, s: Scalar) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(Scalar) -> Scalar) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Tensor) -> Result<Self> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    pub fn zip_with(
        &self,
        op: &'static str,
        other: &Tensor,
        f: impl Fn(Scalar, Scalar) -> Scalar,
    ) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: Scalar, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("axpy", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::invalid(op, &self.shape, format!("expected rank {rank}")));
        }
        Ok(())
    }
}

fn validate_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::invalid(op, shape, "rank must be 1..=3"));
    }
    // Zero-length leading dimension is allowed so that empty token spans are
    // representable; the remaining dimensions must be positive.
    if shape[1..].iter().any(|&d| d == 0) {
        return Err(Error::invalid(op, shape, "trailing dimensions must be positive"));
    }
    Ok(())
}

/// `a · b` for `a: m×k`, `b: k×n`.
///
/// Each output element accumulates its `k` products left to right.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`, without materialising the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1] {
        return Err(Error::shape("matmul_nt", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(&[m, n], out)
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[0] != b.shape[0] {
        return Err(Error::shape("matmul_tn", &a.shape, &b.shape));
    }
    let (k, m, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// Stacks matrices vertically.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
    first.expect_rank("concat_rows", 2)?;
    let cols = first.shape[1];
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        if p.rank() != 2 || p.shape[1] != cols {
            return Err(Error::shape("concat_rows", &first.shape, &p.shape));
        }
        rows += p.shape[0];
        data.extend_from_slice(&p.data);
    }
    Tensor::new(&[rows, cols], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    SoftmaxRows,
    Relu,
    Elu,
    Silu,
    /// `silu(x) - min(x)` with the minimum taken over the whole input tensor.
    SiluPositive,
}

impl Activation {
    pub const ALL: [Activation; 6] = [
        Activation::Identity,
        Activation::SoftmaxRows,
        Activation::Relu,
        Activation::Elu,
        Activation::Silu,
        Activation::SiluPositive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::SoftmaxRows => "softmax_rows",
            Activation::Relu => "relu",
            Activation::Elu => "elu",
            Activation::Silu => "silu",
            Activation::SiluPositive => "silu_positive",
        }
    }
}

pub fn sigmoid(x: Scalar) -> Scalar {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: Scalar) -> Scalar {
    x * sigmoid(x)
}

pub fn elu(x: Scalar) -> Scalar {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Result<Tensor> {
    Ok(match kind {
        Activation::Identity => x.clone(),
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::Elu => x.map(elu),
        Activation::Silu => x.map(silu),
        Activation::SiluPositive => {
            let min = x.data.iter().copied().fold(Scalar::INFINITY, Scalar::min);
            x.map(|v| silu(v) - min)
        }
        Activation::SoftmaxRows => {
            x.expect_rank("softmax_rows", 2)?;
            let mut out = x.clone();
            for i in 0..out.rows() {
                softmax_in_place(out.row_mut(i));
            }
            out
        }
    })
}

/// Numerically stable softmax over a slice.
pub fn softmax_in_place(row: &mut [Scalar]) {
    let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Avg,
    Max,
}

/// Pools an `h×w×c` grid with a `k×k` window and stride `k`.
pub fn pool2d(grid: &Tensor, k: usize, kind: PoolKind) -> Result<Tensor> {
    grid.expect_rank("pool2d", 3)?;
    let (h, w, c) = (grid.shape[0], grid.shape[1], grid.shape[2]);
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::invalid(
            "pool2d",
            &grid.shape,
            format!("kernel {k} must divide both spatial dims"),
        ));
    }
    let (oh, ow) = (h / k, w / k);
    let init = match kind {
        PoolKind::Avg => 0.0,
        PoolKind::Max => Scalar::NEG_INFINITY,
    };
    let mut out = vec![init; oh * ow * c];
    for oi in 0..oh {
        for oj in 0..ow {
            let cell = &mut out[(oi * ow + oj) * c..(oi * ow + oj + 1) * c];
            for di in 0..k {
                for dj in 0..k {
                    let src = ((oi * k + di) * w + oj * k + dj) * c;
                    for (ch, o) in cell.iter_mut().enumerate() {
                        let v = grid.data[src + ch];
                        match kind {
                            PoolKind::Avg => *o += v,
                            PoolKind::Max => *o = o.max(v),
                        }
                    }
                }
            }
            if kind == PoolKind::Avg {
                let area = (k * k) as Scalar;
                for o in cell.iter_mut() {
                    *o /= area;
                }
            }
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

pub fn avg_pool2d(grid: &Tensor, k: usize) -> Result<Tensor> {
    pool2d(grid, k, PoolKind::Avg)
}

pub fn max_pool2d(grid: &Tensor, k: usize) -> Result<Tensor> {
    pool2d(grid, k, PoolKind::Max)
}
