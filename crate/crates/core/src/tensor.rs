//! Dense third-order tensors (subject × time × regime) and the Tucker
//! toolkit built on them: unfoldings, mode products, reconstruction and
//! truncated higher-order SVD.
//!
//! # Linearization
//!
//! Entry `(i, t, l)` (0-based) lives at `i + n1 * (t + n2 * l)`. With this
//! layout the mode-1 unfolding `M₁(X)[i, t + n2·l]` is a plain reshape.
//!
//! Unfoldings for modes 2 and 3 order their columns with the lower-numbered
//! remaining mode varying fastest:
//!
//! | mode | rows | column index |
//! |------|------|--------------|
//! | 1    | `i`  | `t + n2·l`   |
//! | 2    | `t`  | `i + n1·l`   |
//! | 3    | `l`  | `i + n1·t`   |
//!
//! This is the ordering under which `M₂(⟦G;U₁,U₂,U₃⟧) = U₂ M₂(G) (U₃⊗U₁)ᵀ`
//! and `M₃(⟦G;U₁,U₂,U₃⟧) = U₃ M₃(G) (U₂⊗U₁)ᵀ` hold with the usual Kronecker
//! product.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{singular_values, symmetric_eigen, thin_qr, Matrix};

/// Magic prefix of the binary tensor container.
pub const TENSOR_MAGIC: &[u8; 8] = b"TNSR3F64";

#[derive(Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl std::fmt::Debug for Tensor3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor3 {:?} (‖·‖_F = {:.6e})", self.dims, self.frobenius_norm())
    }
}

/// Target multilinear rank `(r1, r2, r3)` of a Tucker model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MultilinearRank {
    pub r1: usize,
    pub r2: usize,
    pub r3: usize,
}

impl MultilinearRank {
    pub const fn new(r1: usize, r2: usize, r3: usize) -> Self {
        Self { r1, r2, r3 }
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.r1, self.r2, self.r3]
    }

    /// `1 ≤ r_k ≤ dim_k` for every mode.
    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        for (k, (&r, &d)) in self.as_array().iter().zip(dims.iter()).enumerate() {
            if r == 0 || r > d {
                return Err(Error::argument(format!(
                    "rank {} invalid for mode {} of size {}",
                    r,
                    k + 1,
                    d
                )));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for MultilinearRank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.r1, self.r2, self.r3)
    }
}

impl std::str::FromStr for MultilinearRank {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim_matches(|c| c == '(' || c == ')').split(',').collect();
        if parts.len() != 3 {
            return Err(Error::argument(format!("rank '{s}' must look like r1,r2,r3")));
        }
        let mut r = [0usize; 3];
        for (slot, p) in r.iter_mut().zip(parts) {
            *slot = p
                .trim()
                .parse()
                .map_err(|_| Error::argument(format!("rank component '{p}' is not a count")))?;
        }
        Ok(Self::new(r[0], r[1], r[2]))
    }
}

fn check_mode(mode: usize) -> Result<()> {
    if !(1..=3).contains(&mode) {
        return Err(Error::argument(format!("mode must be 1, 2 or 3, got {mode}")));
    }
    Ok(())
}

impl Tensor3 {
    pub fn zeros(n1: usize, n2: usize, n3: usize) -> Self {
        Self { dims: [n1, n2, n3], data: vec![0.0; n1 * n2 * n3] }
    }

    pub fn filled(n1: usize, n2: usize, n3: usize, value: f64) -> Self {
        Self { dims: [n1, n2, n3], data: vec![value; n1 * n2 * n3] }
    }

    /// Wraps data already in the documented linearization.
    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::argument(format!("tensor dims must be ≥ 1, got {dims:?}")));
        }
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::argument(format!(
                "tensor data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for l in 0..dims[2] {
            for t in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, t, l));
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, i: usize, t: usize, l: usize) -> usize {
        debug_assert!(i < self.dims[0] && t < self.dims[1] && l < self.dims[2]);
        i + self.dims[0] * (t + self.dims[1] * l)
    }

    #[inline]
    pub fn get(&self, i: usize, t: usize, l: usize) -> f64 {
        self.data[self.offset(i, t, l)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, t: usize, l: usize, v: f64) {
        let o = self.offset(i, t, l);
        self.data[o] = v;
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_dims(&self, other: &Tensor3) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::argument(format!(
                "tensor dims mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Entrywise combination of two equally shaped tensors.
    pub fn zip_with(&self, other: &Tensor3, f: impl Fn(f64, f64) -> f64) -> Result<Tensor3> {
        self.check_same_dims(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor3 { dims: self.dims, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn hadamard(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> Tensor3 {
        self.map(|v| v * s)
    }

    /// `⟨X, Y⟩ = Σ X·Y`.
    pub fn inner(&self, other: &Tensor3) -> Result<f64> {
        self.check_same_dims(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `(‖X‖_F, ‖X‖_max)`.
    pub fn norms(&self) -> (f64, f64) {
        (self.frobenius_norm(), self.max_norm())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        if self.dims != other.dims {
            return f64::INFINITY;
        }
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Keeps the listed mode-1 indices (subjects), in order.
    pub fn select_mode1(&self, rows: &[usize]) -> Tensor3 {
        let [_, n2, n3] = self.dims;
        Tensor3::from_fn([rows.len(), n2, n3], |i, t, l| self.get(rows[i], t, l))
    }

    /// Mode-`mode` unfolding `M_mode(X)` (see the module docs for column order).
    pub fn unfold(&self, mode: usize) -> Result<Matrix> {
        check_mode(mode)?;
        let [n1, n2, n3] = self.dims;
        let m = match mode {
            1 => Matrix::from_fn(n1, n2 * n3, |i, c| self.data[i + n1 * c]),
            2 => Matrix::from_fn(n2, n1 * n3, |t, c| {
                let (i, l) = (c % n1, c / n1);
                self.get(i, t, l)
            }),
            _ => Matrix::from_fn(n3, n1 * n2, |l, c| {
                let (i, t) = (c % n1, c / n1);
                self.get(i, t, l)
            }),
        };
        Ok(m)
    }

    /// Inverse of [`Tensor3::unfold`].
    pub fn fold(m: &Matrix, mode: usize, dims: [usize; 3]) -> Result<Tensor3> {
        check_mode(mode)?;
        let [n1, n2, n3] = dims;
        let expected = match mode {
            1 => (n1, n2 * n3),
            2 => (n2, n1 * n3),
            _ => (n3, n1 * n2),
        };
        if m.shape() != expected {
            return Err(Error::argument(format!(
                "cannot fold {:?} matrix into mode-{} tensor of dims {:?}",
                m.shape(),
                mode,
                dims
            )));
        }
        let t = match mode {
            1 => Tensor3::from_fn(dims, |i, t, l| m[(i, t + n2 * l)]),
            2 => Tensor3::from_fn(dims, |i, t, l| m[(t, i + n1 * l)]),
            _ => Tensor3::from_fn(dims, |i, t, l| m[(l, i + n1 * t)]),
        };
        Ok(t)
    }

    /// Mode product `X ×_mode U`, with `U` of shape `J × dims[mode]`.
    pub fn mode_product(&self, u: &Matrix, mode: usize) -> Result<Tensor3> {
        check_mode(mode)?;
        let [n1, n2, n3] = self.dims;
        let k = mode - 1;
        if u.cols() != self.dims[k] {
            return Err(Error::argument(format!(
                "mode-{} product: matrix has {} columns but tensor mode has size {}",
                mode,
                u.cols(),
                self.dims[k]
            )));
        }
        let j = u.rows();
        let mut out_dims = self.dims;
        out_dims[k] = j;
        if j == 0 {
            return Err(Error::argument("mode product with an empty matrix"));
        }
        let mut out = Tensor3::zeros(out_dims[0], out_dims[1], out_dims[2]);
        match mode {
            1 => {
                // Each (t,l) fiber is multiplied by U.
                for c in 0..n2 * n3 {
                    let fiber = &self.data[c * n1..(c + 1) * n1];
                    let dst = &mut out.data[c * j..(c + 1) * j];
                    for (r, d) in dst.iter_mut().enumerate() {
                        *d = crate::linalg::dot(u.row(r), fiber);
                    }
                }
            }
            2 => {
                for l in 0..n3 {
                    for t in 0..n2 {
                        let src = &self.data[n1 * (t + n2 * l)..n1 * (t + n2 * l) + n1];
                        for r in 0..j {
                            let w = u[(r, t)];
                            if w == 0.0 {
                                continue;
                            }
                            let o = n1 * (r + j * l);
                            for (d, s) in out.data[o..o + n1].iter_mut().zip(src) {
                                *d += w * s;
                            }
                        }
                    }
                }
            }
            _ => {
                let slab = n1 * n2;
                for l in 0..n3 {
                    let src = &self.data[slab * l..slab * (l + 1)];
                    for r in 0..j {
                        let w = u[(r, l)];
                        if w == 0.0 {
                            continue;
                        }
                        for (d, s) in out.data[slab * r..slab * (r + 1)].iter_mut().zip(src) {
                            *d += w * s;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Writes the binary container: magic, three little-endian `u64` dims,
    /// then the data as little-endian `f64` in the documented linearization.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 24 + 8 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        for d in self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor3> {
        if bytes.len() < 32 || &bytes[..8] != TENSOR_MAGIC {
            return Err(Error::argument("not a TNSR3F64 tensor container"));
        }
        let mut dims = [0usize; 3];
        for (k, d) in dims.iter_mut().enumerate() {
            let mut b = [0u8; 8];
            b.copy_from_slice(&bytes[8 + 8 * k..16 + 8 * k]);
            *d = usize::try_from(u64::from_le_bytes(b))
                .map_err(|_| Error::argument("tensor dimension overflows usize"))?;
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::argument("tensor size overflows"))?;
        let payload = &bytes[32..];
        if payload.len() != n * 8 {
            return Err(Error::argument(format!(
                "tensor container holds {} bytes of data, expected {}",
                payload.len(),
                n * 8
            )));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| {
                let mut b = [0u8; 8];
                b.copy_from_slice(c);
                f64::from_le_bytes(b)
            })
            .collect();
        Tensor3::from_vec(dims, data)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: &Path) -> Result<Tensor3> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Tensor3::from_bytes(&buf)
    }
}

/// Stores a matrix in the tensor container as a `rows × cols × 1` tensor.
pub fn matrix_to_tensor(m: &Matrix) -> Tensor3 {
    Tensor3::from_fn([m.rows().max(1), m.cols().max(1), 1], |i, j, _| {
        if i < m.rows() && j < m.cols() {
            m[(i, j)]
        } else {
            0.0
        }
    })
}

pub fn tensor_to_matrix(t: &Tensor3) -> Result<Matrix> {
    let [r, c, d] = t.dims();
    if d != 1 {
        return Err(Error::argument("matrix container must have third dim 1"));
    }
    Ok(Matrix::from_fn(r, c, |i, j| t.get(i, j, 0)))
}

/// `⟦G; U₁, U₂, U₃⟧ = G ×₁ U₁ ×₂ U₂ ×₃ U₃`.
pub fn tucker_reconstruct(g: &Tensor3, u1: &Matrix, u2: &Matrix, u3: &Matrix) -> Result<Tensor3> {
    let [r1, r2, r3] = g.dims();
    if u1.cols() != r1 || u2.cols() != r2 || u3.cols() != r3 {
        return Err(Error::argument(format!(
            "core dims {:?} do not match factor widths ({}, {}, {})",
            g.dims(),
            u1.cols(),
            u2.cols(),
            u3.cols()
        )));
    }
    // Contract the small modes first.
    g.mode_product(u3, 3)?.mode_product(u2, 2)?.mode_product(u1, 1)
}

/// Top-`r` orthonormal left singular vectors of `m`, computed from the
/// eigendecomposition of whichever Gram matrix is smaller. Columns follow
/// the sign convention of [`Matrix::canonicalize_column_signs`].
pub fn leading_left_singular_vectors(m: &Matrix, r: usize) -> Result<Matrix> {
    let (rows, cols) = m.shape();
    if r == 0 || r > rows {
        return Err(Error::argument(format!("cannot take {r} singular vectors of a {rows}-row matrix")));
    }
    let mut u = if rows <= cols {
        let eig = symmetric_eigen(&m.gram_rows())?;
        eig.vectors.leading_columns(r)
    } else {
        // Right singular vectors from the small Gram, then U = M V Σ⁻¹.
        let eig = symmetric_eigen(&m.t_matmul(m)?)?;
        let top = eig.values.first().copied().unwrap_or(0.0).max(0.0);
        let mut u = Matrix::zeros(rows, r);
        let kept = r.min(cols);
        for j in 0..kept {
            let sigma = eig.values[j].max(0.0).sqrt();
            if sigma <= 1e-12 * top.sqrt().max(f64::MIN_POSITIVE) {
                continue;
            }
            let v = eig.vectors.column(j);
            let col: Vec<f64> = m.mul_vec(&v).iter().map(|x| x / sigma).collect();
            u.set_column(j, &col);
        }
        // Re-orthonormalize (also fills any null directions).
        thin_qr(&u).0
    };
    u.canonicalize_column_signs();
    Ok(u)
}

/// Truncated HOSVD factors: for each mode the top `r_k` left singular vectors
/// of `M_k(x)`.
pub fn hosvd(x: &Tensor3, rank: MultilinearRank) -> Result<[Matrix; 3]> {
    rank.validate(x.dims())?;
    let r = rank.as_array();
    let u1 = leading_left_singular_vectors(&x.unfold(1)?, r[0])?;
    let u2 = leading_left_singular_vectors(&x.unfold(2)?, r[1])?;
    let u3 = leading_left_singular_vectors(&x.unfold(3)?, r[2])?;
    Ok([u1, u2, u3])
}

/// Singular values of each unfolding, descending. Used for rank diagnostics.
pub fn unfolding_singular_values(x: &Tensor3) -> Result<[Vec<f64>; 3]> {
    let mut out: [Vec<f64>; 3] = Default::default();
    for (k, slot) in out.iter_mut().enumerate() {
        let m = x.unfold(k + 1)?;
        *slot = singular_values(&m);
    }
    Ok(out)
}
