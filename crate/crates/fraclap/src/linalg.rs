//! Dense symmetric-positive-definite solves in packed storage.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("dimension mismatch: matrix is {n} x {n}, right-hand side has length {len}")]
    DimensionMismatch { n: usize, len: usize },
    #[error("matrix is not positive definite: nonpositive pivot {pivot:.3e} at row {row}")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("conjugate gradients stalled at relative residual {residual:.3e} after {iterations} iterations")]
    CgStalled { iterations: usize, residual: f64 },
}

/// Dense symmetric matrix, lower triangle stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSymmetric {
    n: usize,
    data: Vec<f64>,
}

impl PackedSymmetric {
    pub fn zeros(n: usize) -> PackedSymmetric {
        PackedSymmetric {
            n,
            data: vec![0.0; n * (n + 1) / 2],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i < self.n);
        i * (i + 1) / 2 + j
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        self.data[self.idx(i, j)]
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let k = self.idx(i, j);
        self.data[k] += value;
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let k = self.idx(i, j);
        self.data[k] = value;
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Merges another accumulator of identical shape.
    pub fn add_assign(&mut self, other: &PackedSymmetric) {
        assert_eq!(self.n, other.n);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        y.fill(0.0);
        let mut k = 0;
        for i in 0..self.n {
            let mut yi = 0.0;
            for j in 0..i {
                let a = self.data[k];
                yi += a * x[j];
                y[j] += a * x[i];
                k += 1;
            }
            y[i] += yi + self.data[k] * x[i];
            k += 1;
        }
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let mut y = vec![0.0; self.n];
        self.matvec(x, &mut y);
        dot(x, &y)
    }

    /// In-place packed Cholesky factor `L` with `A = L L^T`.
    pub fn cholesky(&self) -> Result<PackedSymmetric, SolveError> {
        let n = self.n;
        let mut l = self.clone();
        for i in 0..n {
            for j in 0..=i {
                let mut sum = l.data[i * (i + 1) / 2 + j];
                let (ri, rj) = (i * (i + 1) / 2, j * (j + 1) / 2);
                for k in 0..j {
                    sum -= l.data[ri + k] * l.data[rj + k];
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(SolveError::NotPositiveDefinite { row: i, pivot: sum });
                    }
                    l.data[ri + j] = sum.sqrt();
                } else {
                    l.data[ri + j] = sum / l.data[rj + j];
                }
            }
        }
        Ok(l)
    }
}

/// Solves `L L^T x = b` given the packed Cholesky factor.
pub fn cholesky_solve(l: &PackedSymmetric, b: &[f64]) -> Vec<f64> {
    let n = l.n;
    let mut x = b.to_vec();
    // Forward substitution.
    for i in 0..n {
        let ri = i * (i + 1) / 2;
        let mut sum = x[i];
        for j in 0..i {
            sum -= l.data[ri + j] * x[j];
        }
        x[i] = sum / l.data[ri + i];
    }
    // Backward substitution with the transpose.
    for i in (0..n).rev() {
        let mut sum = x[i];
        for j in (i + 1)..n {
            sum -= l.data[j * (j + 1) / 2 + i] * x[j];
        }
        x[i] = sum / l.data[i * (i + 1) / 2 + i];
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    Cholesky,
    ConjugateGradient,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub solution: Vec<f64>,
    pub method: SolveMethod,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Size above which the solver switches from Cholesky to preconditioned CG.
pub const CG_THRESHOLD: usize = 4000;

/// Solves the SPD system `K u = f`: Cholesky up to `CG_THRESHOLD` unknowns,
/// Jacobi-preconditioned conjugate gradients beyond. Nonpositive pivots are
/// reported as errors, never regularized.
pub fn solve_spd(k: &PackedSymmetric, f: &[f64]) -> Result<SolveReport, SolveError> {
    if f.len() != k.n {
        return Err(SolveError::DimensionMismatch { n: k.n, len: f.len() });
    }
    if k.n <= CG_THRESHOLD {
        let l = k.cholesky()?;
        let solution = cholesky_solve(&l, f);
        let residual = relative_residual(k, &solution, f);
        Ok(SolveReport {
            solution,
            method: SolveMethod::Cholesky,
            iterations: 0,
            relative_residual: residual,
        })
    } else {
        conjugate_gradient(k, f, 1e-12)
    }
}

pub fn conjugate_gradient(k: &PackedSymmetric, f: &[f64], tol: f64) -> Result<SolveReport, SolveError> {
    let n = k.n;
    if f.len() != n {
        return Err(SolveError::DimensionMismatch { n, len: f.len() });
    }
    let mut diag = vec![0.0; n];
    for (i, d) in diag.iter_mut().enumerate() {
        let v = k.get(i, i);
        if v <= 0.0 {
            return Err(SolveError::NotPositiveDefinite { row: i, pivot: v });
        }
        *d = 1.0 / v;
    }
    let norm_f = dot(f, f).sqrt();
    if norm_f == 0.0 {
        return Ok(SolveReport {
            solution: vec![0.0; n],
            method: SolveMethod::ConjugateGradient,
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut u = vec![0.0; n];
    let mut r = f.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut kp = vec![0.0; n];
    let max_iter = 40 * n + 200;
    for it in 1..=max_iter {
        k.matvec(&p, &mut kp);
        let alpha = rz / dot(&p, &kp);
        for i in 0..n {
            u[i] += alpha * p[i];
            r[i] -= alpha * kp[i];
        }
        let res = dot(&r, &r).sqrt() / norm_f;
        if res <= tol {
            return Ok(SolveReport {
                solution: u,
                method: SolveMethod::ConjugateGradient,
                iterations: it,
                relative_residual: res,
            });
        }
        for i in 0..n {
            z[i] = r[i] * diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(SolveError::CgStalled {
        iterations: max_iter,
        residual: dot(&r, &r).sqrt() / norm_f,
    })
}

pub fn relative_residual(k: &PackedSymmetric, u: &[f64], f: &[f64]) -> f64 {
    let mut ku = vec![0.0; k.n];
    k.matvec(u, &mut ku);
    let num: f64 = ku.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den = dot(f, f).sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_spd(n: usize, seed: u64) -> (PackedSymmetric, Vec<f64>) {
        // A = B^T B + I is comfortably positive definite.
        let mut rng = StdRng::seed_from_u64(seed);
        let b: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut a = PackedSymmetric::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let mut v = if i == j { 1.0 } else { 0.0 };
                for row in &b {
                    v += row[i] * row[j];
                }
                a.set(i, j, v);
            }
        }
        let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        (a, target)
    }

    #[test]
    fn identity_solve() {
        let mut k = PackedSymmetric::zeros(4);
        for i in 0..4 {
            k.set(i, i, 1.0);
        }
        let mut f = vec![0.0; 4];
        f[0] = 1.0;
        let rep = solve_spd(&k, &f).unwrap();
        assert_eq!(rep.method, SolveMethod::Cholesky);
        assert_relative_eq!(rep.solution[0], 1.0);
        assert!(rep.solution[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recovers_constructed_solution() {
        let (a, u_star) = random_spd(50, 7);
        let mut f = vec![0.0; 50];
        a.matvec(&u_star, &mut f);
        let rep = solve_spd(&a, &f).unwrap();
        for (got, want) in rep.solution.iter().zip(&u_star) {
            assert_relative_eq!(got, want, max_relative = 1e-10, epsilon = 1e-10);
        }
        assert!(rep.relative_residual <= 1e-10);
        // Galerkin identity f^T u = u^T K u.
        let fu = dot(&f, &rep.solution);
        let uku = a.quadratic_form(&rep.solution);
        assert_relative_eq!(fu, uku, max_relative = 1e-10);
    }

    #[test]
    fn cholesky_and_cg_agree() {
        let (a, f) = random_spd(80, 3);
        let chol = solve_spd(&a, &f).unwrap();
        let cg = conjugate_gradient(&a, &f, 1e-12).unwrap();
        assert_eq!(cg.method, SolveMethod::ConjugateGradient);
        assert!(cg.iterations > 0);
        for (x, y) in chol.solution.iter().zip(&cg.solution) {
            assert_relative_eq!(x, y, max_relative = 1e-8, epsilon = 1e-10);
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let mut k = PackedSymmetric::zeros(2);
        k.set(0, 0, 1.0);
        k.set(1, 1, -1.0);
        match solve_spd(&k, &[1.0, 1.0]) {
            Err(SolveError::NotPositiveDefinite { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected pivot failure, got {other:?}"),
        }
    }

    #[test]
    fn permuted_system_gives_permuted_solution() {
        let (a, f) = random_spd(24, 11);
        let base = solve_spd(&a, &f).unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        let mut perm: Vec<usize> = (0..24).collect();
        for i in (1..24).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let mut ap = PackedSymmetric::zeros(24);
        for i in 0..24 {
            for j in 0..=i {
                ap.set(i, j, a.get(perm[i], perm[j]));
            }
        }
        let fp: Vec<f64> = perm.iter().map(|&p| f[p]).collect();
        let rep = solve_spd(&ap, &fp).unwrap();
        for i in 0..24 {
            assert_relative_eq!(rep.solution[i], base.solution[perm[i]], max_relative = 1e-10, epsilon = 1e-12);
        }
    }

    #[test]
    fn matvec_matches_dense_reference() {
        let (a, x) = random_spd(17, 23);
        let mut y = vec![0.0; 17];
        a.matvec(&x, &mut y);
        for i in 0..17 {
            let mut want = 0.0;
            for j in 0..17 {
                want += a.get(i, j) * x[j];
            }
            assert_relative_eq!(y[i], want, max_relative = 1e-13);
        }
    }
}
