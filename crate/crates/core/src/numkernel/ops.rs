//! Value-level kernels. Every reduction runs in a fixed order so results are
//! bit-reproducible across runs and thread counts.

use super::tensor::Tensor;
use crate::error::{Error, Result};

const LANES: usize = 8;

/// Inner product with eight interleaved accumulators combined in a fixed
/// pairwise order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..LANES {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ta.iter().zip(tb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(format!("{what}: expected rank {rank}, got shape {:?}", t.shape())));
    }
    Ok(())
}

/// Matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul lhs")?;
    expect_rank(b, 2, "matmul rhs")?;
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(Error::dim(format!(
            "matmul: inner extents differ, {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a.row(i).iter().enumerate() {
            axpy(row, aip, b.row(p));
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul_nt lhs")?;
    expect_rank(b, 2, "matmul_nt rhs")?;
    if a.cols() != b.cols() {
        return Err(Error::dim(format!(
            "matmul_nt: inner extents differ, {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let (m, n) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ai = a.row(i);
        for j in 0..n {
            out.push(dot(ai, b.row(j)));
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `w[m×k] · x[k]`.
pub fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    expect_rank(w, 2, "matvec matrix")?;
    expect_rank(x, 1, "matvec vector")?;
    if w.cols() != x.numel() {
        return Err(Error::dim(format!(
            "matvec: {:?} cannot multiply {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let out = (0..w.rows()).map(|i| dot(w.row(i), x.data())).collect();
    Ok(Tensor::vector(out))
}

/// `x[m]ᵀ · w[m×n]`, i.e. the `x`-weighted sum of the rows of `w`.
pub fn vecmat(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    expect_rank(x, 1, "vecmat vector")?;
    expect_rank(w, 2, "vecmat matrix")?;
    if w.rows() != x.numel() {
        return Err(Error::dim(format!(
            "vecmat: {:?} cannot multiply {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let mut out = vec![0.0; w.cols()];
    for (i, &xi) in x.data().iter().enumerate() {
        axpy(&mut out, xi, w.row(i));
    }
    Ok(Tensor::vector(out))
}

/// Exp-normalization with max subtraction.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    if v.rank() != 1 {
        return Err(Error::dim(format!("softmax: expected a vector, got {:?}", v.shape())));
    }
    Ok(Tensor::vector(softmax_slice(v.data())))
}

pub(crate) fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn cosine_similarity(u: &Tensor, v: &Tensor) -> Result<f64> {
    if u.shape() != v.shape() {
        return Err(Error::dim(format!(
            "cosine_similarity: shapes {:?} and {:?} differ",
            u.shape(),
            v.shape()
        )));
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    let c = dot(u.data(), v.data()) / (nu * nv);
    Ok(c.clamp(-1.0, 1.0))
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
