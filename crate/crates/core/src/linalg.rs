//! Dense row-major linear algebra, Kronecker-product identities, a cyclic
//! Jacobi symmetric eigensolver and the seeded random source.
//!
//! # Flattening convention
//!
//! A weight matrix `W` of shape `D1 × D2` is flattened row by row:
//! `vec_r(W)[i * D2 + k] = W[i, k]`. Under this convention
//!
//! ```text
//! (B ⊗ A) vec_r(T) = vec_r(B · T · Aᵀ)
//! ```
//!
//! Proof: entry `(i, k)` of the left side is
//! `Σ_{j,l} (B ⊗ A)[(i,k),(j,l)] T[j,l] = Σ_{j,l} B[i,j] A[k,l] T[j,l]`,
//! which is `Σ_j B[i,j] (T Aᵀ)[j,k] = (B T Aᵀ)[i,k]`. Consequently
//! `vec_r(T)ᵀ (B ⊗ A) vec_r(T) = ⟨T, B T Aᵀ⟩_F`, which equals
//! `tr(Tᵀ B T A)` for symmetric `A`. Both are evaluated in
//! `O(D1·D2·(D1 + D2))` without forming the `D1·D2 × D1·D2` product.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{shape_err, Result, TakError};

const MATRIX_MAGIC: &[u8; 8] = b"TAKMAT01";

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err("Matrix::new", rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TakError::Contract("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err(
                "matmul",
                format!("inner dimension {}", self.cols),
                other.rows,
            ));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            let orow = &mut out.data[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape_err(
                "matmul_nt",
                format!("inner dimension {}", self.cols),
                other.cols,
            ));
        }
        let (n, m) = (self.rows, other.rows);
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                out.data[i * m + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(shape_err("matmul_tn", format!("row count {}", self.rows), other.rows));
        }
        let (k, m) = (self.cols, other.cols);
        let mut out = Matrix::zeros(k, m);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (p, &ap) in a.iter().enumerate() {
                if ap == 0.0 {
                    continue;
                }
                let orow = &mut out.data[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(b) {
                    *o += ap * bv;
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(s);
        m
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "add_scaled",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_scaled(-1.0, other)?;
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn frobenius_dot(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "frobenius_dot",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Largest absolute asymmetry `|M[i,j] − M[j,i]|`; infinite for non-square.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let n = self.rows;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.asymmetry() <= tol
    }

    /// Replaces the matrix by `(M + Mᵀ)/2`, making it exactly symmetric.
    pub fn symmetrize(&mut self) {
        let n = self.rows;
        debug_assert!(self.is_square());
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                self.set(i, j, v);
                self.set(j, i, v);
            }
        }
    }

    /// `self += w · Xᵀ X` for the rows of `x`; only the upper triangle is
    /// accumulated and then mirrored so the result stays exactly symmetric.
    pub fn add_gram(&mut self, x: &Matrix, w: f64) -> Result<()> {
        let n = self.rows;
        if !self.is_square() || x.cols != n {
            return Err(shape_err("add_gram", n, x.cols));
        }
        for r in 0..x.rows {
            let row = x.row(r);
            for i in 0..n {
                let xi = w * row[i];
                if xi == 0.0 {
                    continue;
                }
                let out = &mut self.data[i * n..(i + 1) * n];
                for j in i..n {
                    out[j] += xi * row[j];
                }
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let v = self.data[i * n + j];
                self.data[j * n + i] = v;
            }
        }
        Ok(())
    }

    /// Dense Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &Matrix) -> Matrix {
        let (r1, c1) = self.shape();
        let (r2, c2) = other.shape();
        let mut out = Matrix::zeros(r1 * r2, c1 * c2);
        let oc = c1 * c2;
        for i in 0..r1 {
            for j in 0..c1 {
                let s = self.get(i, j);
                if s == 0.0 {
                    continue;
                }
                for k in 0..r2 {
                    let orow = (i * r2 + k) * oc + j * c2;
                    for l in 0..c2 {
                        out.data[orow + l] = s * other.get(k, l);
                    }
                }
            }
        }
        out
    }

    /// `M v` for a dense vector.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(shape_err("matvec", self.cols, v.len()));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `vᵀ M v`.
    pub fn quadratic_form(&self, v: &[f64]) -> Result<f64> {
        Ok(dot(v, &self.matvec(v)?))
    }

    /// Appends the binary form (magic, rows, cols, LE f64 payload).
    pub fn encode(&self, w: &mut ByteWriter) {
        w.bytes(MATRIX_MAGIC);
        w.u32(self.rows as u32);
        w.u32(self.cols as u32);
        for &v in &self.data {
            w.f64(v);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        self.encode(&mut w);
        w.into_inner()
    }

    pub fn decode(r: &mut ByteReader<'_>) -> Result<Matrix> {
        r.expect_magic(MATRIX_MAGIC)?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| r.error("matrix dimensions overflow"))?;
        if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
            return Err(r.error(format!(
                "matrix {rows}x{cols} needs {} bytes, {} left",
                n.saturating_mul(8),
                r.remaining()
            )));
        }
        let at = r.offset();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64()?);
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(TakError::Format {
                offset: at + 8 * bad as u64,
                message: "non-finite matrix entry".into(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Matrix> {
        let mut r = ByteReader::new(bytes);
        let m = Matrix::decode(&mut r)?;
        r.finish()?;
        Ok(m)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_kron_shapes(b: &Matrix, a: &Matrix, len: usize, context: &'static str) -> Result<()> {
    if !b.is_square() || !a.is_square() {
        return Err(shape_err(
            context,
            "square factors",
            format!("B {:?}, A {:?}", b.shape(), a.shape()),
        ));
    }
    if len != b.rows() * a.rows() {
        return Err(shape_err(context, b.rows() * a.rows(), len));
    }
    Ok(())
}

/// `vec_r(B · T · Aᵀ)`, i.e. `(B ⊗ A) τ` with `τ = vec_r(T)`.
pub fn kron_matvec(b: &Matrix, a: &Matrix, tau: &[f64]) -> Result<Vec<f64>> {
    check_kron_shapes(b, a, tau.len(), "kron_matvec")?;
    let t = Matrix {
        rows: b.rows(),
        cols: a.rows(),
        data: tau.to_vec(),
    };
    Ok(b.matmul(&t)?.matmul_nt(a)?.into_data())
}

/// `τᵀ (B ⊗ A) τ` evaluated as `⟨T, B T Aᵀ⟩` without forming the product.
pub fn kron_quadratic_form(b: &Matrix, a: &Matrix, tau: &[f64]) -> Result<f64> {
    let v = kron_matvec(b, a, tau)?;
    Ok(dot(tau, &v))
}

#[derive(Debug, Clone)]
pub struct SymEig {
    /// Sorted descending.
    pub eigenvalues: Vec<f64>,
    /// Column `k` is the eigenvector of `eigenvalues[k]`.
    pub eigenvectors: Matrix,
}

impl SymEig {
    /// `Σ_{k < rank} λ_k v_k v_kᵀ`, exactly symmetric.
    pub fn reconstruct(&self, rank: usize) -> Matrix {
        let n = self.eigenvectors.rows();
        let rank = rank.min(self.eigenvalues.len());
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for k in 0..rank {
                    s += self.eigenvalues[k] * self.eigenvectors.get(i, k) * self.eigenvectors.get(j, k);
                }
                out.set(i, j, s);
                out.set(j, i, s);
            }
        }
        out
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }
}

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-8;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps until the off-diagonal Frobenius norm drops below `1e-12` times the
/// matrix norm.
pub fn sym_eig(m: &Matrix) -> Result<SymEig> {
    if !m.is_square() {
        return Err(shape_err("sym_eig", "square matrix", format!("{:?}", m.shape())));
    }
    let scale = m.max_abs().max(1.0);
    if m.asymmetry() > SYMMETRY_TOL * scale {
        return Err(TakError::Contract(format!(
            "sym_eig requires a symmetric matrix (asymmetry {:.3e})",
            m.asymmetry()
        )));
    }
    let n = m.rows();
    let mut a = m.clone();
    a.symmetrize();
    let mut v = Matrix::identity(n);
    let total = a.frobenius_norm();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)).then(i.cmp(&j)));
    let eigenvalues = order.iter().map(|&i| a.get(i, i)).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            eigenvectors.set(k, dst, v.get(k, src));
        }
    }
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

/// Seeded, platform-independent random source (ChaCha8 stream).
///
/// Gaussian draws use the Box–Muller transform so the stream is fully
/// determined by the seed.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator derived from this seed and a stream label.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mixed =
            seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
        Self::new(mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let phi = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * phi.sin());
        r * phi.cos()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    /// Index drawn from a discrete distribution (weights need not be
    /// normalized).
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| std * self.normal()).collect();
        Matrix { rows, cols, data }
    }
}
