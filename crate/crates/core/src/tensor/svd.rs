//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! The rotation order is fixed, so results are bit-reproducible on a given
//! machine. Singular vectors get a canonical sign: the largest-magnitude
//! entry of every left singular vector is non-negative.

use super::{track, Matrix};
use crate::error::{Error, Result};

/// Upper bound on Jacobi sweeps before giving up.
pub const MAX_SWEEPS: usize = 80;

/// Thin SVD `M = U · diag(s) · Vt` with `q = min(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// `rows × q`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub s: Vec<f64>,
    /// `q × cols`, orthonormal rows.
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U · diag(s) · Vt`.
    pub fn reconstruct(&self) -> Result<Matrix> {
        self.u.scale_cols(&self.s)?.matmul(&self.vt)
    }
}

/// Computes the thin SVD of `m`. Charges `14 · d_max · d_min²` FLOPs.
pub fn thin_svd(m: &Matrix) -> Result<SvdFactors> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "thin_svd of empty {rows}x{cols} matrix"
        )));
    }
    track::charge(track::svd_flops(rows, cols));

    // Jacobi orthogonalises columns, so work on the orientation with more rows.
    let tall = rows >= cols;
    let (len, count) = if tall { (rows, cols) } else { (cols, rows) };
    let mut work = vec![0.0; len * count];
    for i in 0..rows {
        for j in 0..cols {
            let (c, r) = if tall { (j, i) } else { (i, j) };
            work[c * len + r] = m.get(i, j);
        }
    }
    let mut v = vec![0.0; count * count];
    for j in 0..count {
        v[j * count + j] = 1.0;
    }

    jacobi_sweeps(&mut work, &mut v, len, count)?;

    let norms: Vec<f64> = (0..count)
        .map(|j| dot(col(&work, len, j), col(&work, len, j)).sqrt())
        .collect();
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    // Left vectors (length `len`) and right vectors (length `count`), column-major.
    let mut left = vec![0.0; len * count];
    let mut right = vec![0.0; count * count];
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let nrm = norms[j];
        if nrm > TINY {
            for (dst, &src) in left[k * len..(k + 1) * len].iter_mut().zip(col(&work, len, j)) {
                *dst = src / nrm;
            }
        } else {
            missing.push(k);
        }
        right[k * count..(k + 1) * count].copy_from_slice(col(&v, count, j));
    }
    complete_basis(&mut left, len, count, &missing);

    // Canonical sign on the vectors that end up in U.
    let (u_vecs, u_len) = if tall { (&left, len) } else { (&right, count) };
    let mut flip = vec![false; count];
    for (k, f) in flip.iter_mut().enumerate() {
        let c = &u_vecs[k * u_len..(k + 1) * u_len];
        let mut best = 0;
        for (i, x) in c.iter().enumerate() {
            if x.abs() > c[best].abs() {
                best = i;
            }
        }
        *f = c[best] < 0.0;
    }

    let q = count;
    let (u_src, u_rows, vt_src, vt_cols) = if tall {
        (&left, rows, &right, cols)
    } else {
        (&right, rows, &left, cols)
    };
    let u = Matrix::from_fn(u_rows, q, |i, k| {
        let x = u_src[k * u_rows + i];
        if flip[k] {
            -x
        } else {
            x
        }
    });
    let vt = Matrix::from_fn(q, vt_cols, |k, j| {
        let x = vt_src[k * vt_cols + j];
        if flip[k] {
            -x
        } else {
            x
        }
    });
    Ok(SvdFactors { u, s, vt })
}

/// Columns whose norm falls below this are treated as exactly null.
const TINY: f64 = 1e-150;

#[inline]
fn col(buf: &[f64], len: usize, j: usize) -> &[f64] {
    &buf[j * len..(j + 1) * len]
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(buf: &mut [f64], len: usize, p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = buf.split_at_mut(q * len);
    let xp = &mut lo[p * len..(p + 1) * len];
    let xq = &mut hi[..len];
    for (a, b) in xp.iter_mut().zip(xq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

fn jacobi_sweeps(work: &mut [f64], v: &mut [f64], len: usize, count: usize) -> Result<()> {
    let tol = f64::EPSILON * (len as f64);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..count {
            for q in (p + 1)..count {
                let alpha = dot(col(work, len, p), col(work, len, p));
                let beta = dot(col(work, len, q), col(work, len, q));
                let gamma = dot(col(work, len, p), col(work, len, q));
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(work, len, p, q, c, s);
                rotate(v, count, p, q, c, s);
            }
        }
        if !rotated {
            return Ok(());
        }
    }
    Err(Error::SvdNoConvergence { sweeps: MAX_SWEEPS })
}

/// Fills the `missing` columns of `basis` with unit vectors orthogonal to
/// every other column, trying standard basis vectors in order.
fn complete_basis(basis: &mut [f64], len: usize, count: usize, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let mut filled: Vec<usize> = (0..count).filter(|k| !missing.contains(k)).collect();
    let mut candidate = 0;
    for &k in missing {
        loop {
            assert!(candidate < len, "basis completion ran out of candidates");
            let mut x = vec![0.0; len];
            x[candidate] = 1.0;
            candidate += 1;
            // Two passes of modified Gram-Schmidt.
            for _ in 0..2 {
                for &j in &filled {
                    let c = col(basis, len, j);
                    let proj = dot(&x, c);
                    for (xi, ci) in x.iter_mut().zip(c) {
                        *xi -= proj * ci;
                    }
                }
            }
            let nrm = dot(&x, &x).sqrt();
            if nrm > 0.5 {
                for (dst, xi) in basis[k * len..(k + 1) * len].iter_mut().zip(&x) {
                    *dst = xi / nrm;
                }
                filled.push(k);
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn gram_defect(m: &Matrix, by_cols: bool) -> f64 {
        let g = if by_cols {
            m.transpose().matmul(m).unwrap()
        } else {
            m.matmul(&m.transpose()).unwrap()
        };
        g.sub(&Matrix::identity(g.rows())).unwrap().frobenius_norm()
    }

    fn check_invariants(m: &Matrix, f: &SvdFactors) {
        let q = m.rows().min(m.cols());
        assert_eq!(f.s.len(), q);
        assert_eq!(f.u.shape(), (m.rows(), q));
        assert_eq!(f.vt.shape(), (q, m.cols()));
        for w in f.s.windows(2) {
            assert!(w[0] >= w[1] && w[1] >= 0.0);
        }
        assert!(gram_defect(&f.u, true) <= 1e-9 * q as f64);
        assert!(gram_defect(&f.vt, false) <= 1e-9 * q as f64);
        let err = f.reconstruct().unwrap().sub(m).unwrap().frobenius_norm();
        assert!(err <= 1e-8 * (1.0 + m.frobenius_norm()), "reconstruction error {err}");
    }

    #[test]
    fn diagonal_matrix() {
        let m = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 2.0]]);
        let f = thin_svd(&m).unwrap();
        assert_eq!(f.s, vec![3.0, 2.0, 1.0]);
        check_invariants(&m, &f);
    }

    #[test]
    fn rank_one_outer_product() {
        // |u| = 2, |v| = 3.
        let u = [2.0, 0.0, 0.0, 0.0];
        let v = [0.0, 3.0, 0.0];
        let m = Matrix::from_fn(4, 3, |i, j| u[i] * v[j]);
        let f = thin_svd(&m).unwrap();
        assert!((f.s[0] - 6.0).abs() < 1e-12);
        assert!(f.s[1..].iter().all(|&x| x.abs() < 1e-12));
        check_invariants(&m, &f);
    }

    #[test]
    fn zero_matrix_gets_orthonormal_factors() {
        let m = Matrix::zeros(5, 3);
        let f = thin_svd(&m).unwrap();
        assert_eq!(f.s, vec![0.0; 3]);
        check_invariants(&m, &f);
    }

    #[test]
    fn wide_and_tall_random() {
        for (r, c, seed) in [(6, 4, 1), (4, 6, 2), (1, 5, 3), (5, 1, 4), (9, 9, 5)] {
            let m = random(r, c, seed);
            check_invariants(&m, &thin_svd(&m).unwrap());
        }
    }

    #[test]
    fn canonical_sign() {
        let m = random(7, 4, 11);
        let f = thin_svd(&m).unwrap();
        for k in 0..4 {
            let c = f.u.column(k);
            let big = c
                .iter()
                .copied()
                .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            assert!(big >= 0.0);
        }
    }

    #[test]
    fn deterministic() {
        let m = random(12, 7, 21);
        assert_eq!(thin_svd(&m).unwrap(), thin_svd(&m).unwrap());
    }

    #[test]
    fn empty_is_rejected() {
        assert!(thin_svd(&Matrix::zeros(0, 3)).is_err());
    }
}
