//! Convex-hull feature subspace of an identity and the bounded least-squares
//! solve for the hull point closest to a query feature.
//!
//! The subspace of identity `k` is the set of convex combinations of its
//! training features. Finding the closest point to a query `y` is the
//! quadratic program `min ||F a - y||` over the simplex (with optional box
//! bounds on the coefficients), solved by projected gradient descent with an
//! exact simplex projection.

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, project_simplex, SimplexBounds};

const PG_TOLERANCE: f64 = 1e-8;
const MAX_ITERATIONS: usize = 5000;
const POWER_ITERATIONS: usize = 50;

/// Unit-norm feature columns of one identity's training images.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    dim: usize,
    columns: Vec<Vec<f64>>,
    pub identity_id: u32,
}

impl FeatureMatrix {
    pub fn new(columns: Vec<Vec<f64>>, identity_id: u32) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::invalid("feature matrix needs at least one column"));
        }
        let dim = columns[0].len();
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        for (i, c) in columns.iter().enumerate() {
            if c.len() != dim {
                return Err(Error::invalid(format!(
                    "column {} has dimension {}, expected {}",
                    i,
                    c.len(),
                    dim
                )));
            }
            let norm = l2_norm(c);
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "column {} is not unit norm (|norm - 1| = {:.3e})",
                    i,
                    (norm - 1.0).abs()
                )));
            }
        }
        Ok(FeatureMatrix {
            dim,
            columns,
            identity_id,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    /// `F * alpha` without re-normalization.
    pub fn combine(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        if alpha.len() != self.columns.len() {
            return Err(Error::invalid(format!(
                "coefficient length {} does not match column count {}",
                alpha.len(),
                self.columns.len()
            )));
        }
        let mut out = vec![0.0; self.dim];
        for (a, col) in alpha.iter().zip(&self.columns) {
            for (o, c) in out.iter_mut().zip(col) {
                *o += a * c;
            }
        }
        Ok(out)
    }
}

/// Coefficients on the bounded simplex, the hull point they produce, and the
/// distance from that point to the query.
#[derive(Debug, Clone)]
pub struct HullSolution {
    pub alpha: Vec<f64>,
    pub hull_point: Vec<f64>,
    pub residual: f64,
}

/// Prepared solver for repeated queries against one feature matrix. Caches
/// the Gram matrix and the gradient Lipschitz constant, which dominate the
/// per-query cost when the same identity is queried hundreds of times.
pub struct HullSolver<'a> {
    matrix: &'a FeatureMatrix,
    gram: Vec<f64>, // n x n, row-major
    step: f64,
    bounds: SimplexBounds,
}

impl<'a> HullSolver<'a> {
    pub fn new(matrix: &'a FeatureMatrix, bounds: SimplexBounds) -> Result<Self> {
        let n = matrix.n_columns();
        bounds.validate(n)?;
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let g = dot(&matrix.columns[i], &matrix.columns[j]);
                gram[i * n + j] = g;
                gram[j * n + i] = g;
            }
        }
        let lipschitz = largest_eigenvalue(&gram, n);
        // Columns are unit norm so trace(G) = n >= lambda_max >= 1; the guard
        // only matters for n = 1 where the loop below exits immediately.
        let step = 1.0 / lipschitz.max(1e-12);
        Ok(HullSolver {
            matrix,
            gram,
            step,
            bounds,
        })
    }

    /// Closest hull point to `y`: projected gradient descent from the uniform
    /// coefficient vector, fixed step 1/L, stopping when the projected
    /// gradient norm drops below 1e-8 (or at the iteration cap).
    pub fn solve(&self, y: &[f64]) -> Result<HullSolution> {
        let n = self.matrix.n_columns();
        if y.len() != self.matrix.dim {
            return Err(Error::invalid(format!(
                "query dimension {} does not match feature dimension {}",
                y.len(),
                self.matrix.dim
            )));
        }

        // gradient of 0.5||F a - y||^2 is G a - F^T y
        let fty: Vec<f64> = self.matrix.columns.iter().map(|c| dot(c, y)).collect();

        let mut alpha = vec![1.0 / n as f64; n];
        let mut grad = vec![0.0; n];
        for _ in 0..MAX_ITERATIONS {
            for i in 0..n {
                grad[i] = dot(&self.gram[i * n..(i + 1) * n], &alpha) - fty[i];
            }
            let stepped: Vec<f64> = alpha
                .iter()
                .zip(&grad)
                .map(|(a, g)| a - self.step * g)
                .collect();
            let next = project_simplex(&stepped, self.bounds)?;

            // Projected gradient: displacement of the unit-step projection,
            // zero exactly at a first-order optimal point.
            let pg_norm = {
                let probe: Vec<f64> = alpha.iter().zip(&grad).map(|(a, g)| a - g).collect();
                let proj = project_simplex(&probe, self.bounds)?;
                proj.iter()
                    .zip(&alpha)
                    .map(|(p, a)| (p - a) * (p - a))
                    .sum::<f64>()
                    .sqrt()
            };
            alpha = next;
            if pg_norm < PG_TOLERANCE {
                break;
            }
        }

        let hull_point = self.matrix.combine(&alpha)?;
        let residual = hull_point
            .iter()
            .zip(y)
            .map(|(h, q)| (h - q) * (h - q))
            .sum::<f64>()
            .sqrt();
        Ok(HullSolution {
            alpha,
            hull_point,
            residual,
        })
    }
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration from a
/// fixed deterministic start.
fn largest_eigenvalue(gram: &[f64], n: usize) -> f64 {
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let mut w = vec![0.0; n];
        for i in 0..n {
            w[i] = dot(&gram[i * n..(i + 1) * n], &v);
        }
        let norm = l2_norm(&w);
        if norm < 1e-300 {
            return 1.0;
        }
        lambda = norm;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
    }
    lambda
}

/// One-shot solve of the bounded least-squares problem for the closest hull
/// point to `y`.
pub fn solve_hull(matrix: &FeatureMatrix, y: &[f64], bounds: SimplexBounds) -> Result<HullSolution> {
    HullSolver::new(matrix, bounds)?.solve(y)
}

/// `F * alpha` for caller-supplied coefficients (not re-normalized).
pub fn hull_point(matrix: &FeatureMatrix, alpha: &[f64]) -> Result<Vec<f64>> {
    matrix.combine(alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_distance;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            if let Ok(u) = crate::numerics::l2_normalize(&v) {
                return u;
            }
        }
    }

    /// Brute-force residual minimization over a barycentric grid on the
    /// 2-simplex; independent of the projected-gradient path.
    pub(crate) fn grid_residual_n3(columns: &[Vec<f64>], y: &[f64], steps: usize) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let a0 = i as f64 / steps as f64;
                let a1 = j as f64 / steps as f64;
                let a2 = 1.0 - a0 - a1;
                let mut d2 = 0.0;
                for t in 0..y.len() {
                    let h = a0 * columns[0][t] + a1 * columns[1][t] + a2 * columns[2][t];
                    d2 += (h - y[t]) * (h - y[t]);
                }
                if d2 < best {
                    best = d2;
                }
            }
        }
        best.sqrt()
    }

    #[test]
    fn singleton_hull_is_the_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let col = random_unit(&mut rng, 6);
        let y = random_unit(&mut rng, 6);
        let f = FeatureMatrix::new(vec![col.clone()], 0).unwrap();
        let sol = solve_hull(&f, &y, SimplexBounds::default()).unwrap();
        assert!((sol.alpha[0] - 1.0).abs() < 1e-12);
        assert!((sol.residual - l2_distance(&col, &y)).abs() < 1e-12);
    }

    #[test]
    fn midpoint_query_on_a_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f1 = random_unit(&mut rng, 8);
        let f2 = random_unit(&mut rng, 8);
        let mid: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| 0.5 * (a + b)).collect();
        let f = FeatureMatrix::new(vec![f1, f2], 0).unwrap();
        let sol = solve_hull(&f, &mid, SimplexBounds::default()).unwrap();
        assert!((sol.alpha[0] - 0.5).abs() < 1e-6, "alpha {:?}", sol.alpha);
        assert!((sol.alpha[1] - 0.5).abs() < 1e-6);
        assert!(sol.residual < 1e-8);
    }

    #[test]
    fn matches_barycentric_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let columns: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut rng, 5)).collect();
            let y = random_unit(&mut rng, 5);
            let f = FeatureMatrix::new(columns.clone(), 0).unwrap();
            let sol = solve_hull(&f, &y, SimplexBounds::default()).unwrap();
            let oracle = grid_residual_n3(&columns, &y, 1000);
            assert!(
                (sol.residual - oracle).abs() < 1e-4,
                "solver {} vs oracle {}",
                sol.residual,
                oracle
            );
        }
    }

    #[test]
    fn solution_lies_on_the_simplex_and_dominates_vertices() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.random_range(1..=8usize);
            let d = rng.random_range(2..=10usize);
            let columns: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, d)).collect();
            let y = random_unit(&mut rng, d);
            let f = FeatureMatrix::new(columns.clone(), 0).unwrap();
            let sol = solve_hull(&f, &y, SimplexBounds::default()).unwrap();

            let sum: f64 = sol.alpha.iter().sum();
            assert!((sum - 1.0).abs() < 1e-8);
            assert!(sol.alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
            let recomputed = f.combine(&sol.alpha).unwrap();
            assert!(l2_distance(&recomputed, &sol.hull_point) < 1e-9);
            assert!((l2_distance(&sol.hull_point, &y) - sol.residual).abs() < 1e-9);

            for col in &columns {
                assert!(sol.residual <= l2_distance(col, &y) + 1e-9);
            }
        }
    }

    #[test]
    fn convex_residual_at_least_affine_residual() {
        // Affine least squares (sum(alpha) = 1, unbounded) solved through the
        // KKT system with dense Gaussian elimination; the convex solution is
        // feasible for the affine problem, never better.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.random_range(2..=5usize);
            let d = rng.random_range(n + 1..=n + 6);
            let columns: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, d)).collect();
            let y = random_unit(&mut rng, d);
            let f = FeatureMatrix::new(columns.clone(), 0).unwrap();
            let convex = solve_hull(&f, &y, SimplexBounds::default()).unwrap();

            let affine = affine_ls_residual(&columns, &y);
            assert!(
                convex.residual >= affine - 1e-9,
                "convex {} < affine {}",
                convex.residual,
                affine
            );
        }
    }

    fn affine_ls_residual(columns: &[Vec<f64>], y: &[f64]) -> f64 {
        let n = columns.len();
        // KKT: [G  1; 1^T 0] [alpha; mu] = [F^T y; 1]
        let m = n + 1;
        let mut a = vec![0.0; m * m];
        let mut b = vec![0.0; m];
        for i in 0..n {
            for j in 0..n {
                a[i * m + j] = dot(&columns[i], &columns[j]);
            }
            a[i * m + n] = 1.0;
            a[n * m + i] = 1.0;
            b[i] = dot(&columns[i], y);
        }
        b[n] = 1.0;
        gaussian_solve(&mut a, &mut b, m);
        let alpha = &b[..n];
        let mut d2 = 0.0;
        for t in 0..y.len() {
            let mut h = 0.0;
            for (ai, col) in alpha.iter().zip(columns) {
                h += ai * col[t];
            }
            d2 += (h - y[t]) * (h - y[t]);
        }
        d2.sqrt()
    }

    fn gaussian_solve(a: &mut [f64], b: &mut [f64], m: usize) {
        for col in 0..m {
            let pivot = (col..m)
                .max_by(|&i, &j| a[i * m + col].abs().partial_cmp(&a[j * m + col].abs()).unwrap())
                .unwrap();
            for k in 0..m {
                a.swap(col * m + k, pivot * m + k);
            }
            b.swap(col, pivot);
            let p = a[col * m + col];
            for row in (col + 1)..m {
                let factor = a[row * m + col] / p;
                for k in col..m {
                    a[row * m + k] -= factor * a[col * m + k];
                }
                b[row] -= factor * b[col];
            }
        }
        for row in (0..m).rev() {
            let mut s = b[row];
            for k in (row + 1)..m {
                s -= a[row * m + k] * b[k];
            }
            b[row] = s / a[row * m + row];
        }
    }

    #[test]
    fn solver_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let columns: Vec<Vec<f64>> = (0..4).map(|_| random_unit(&mut rng, 7)).collect();
        let y = random_unit(&mut rng, 7);
        let f = FeatureMatrix::new(columns, 0).unwrap();
        let a = solve_hull(&f, &y, SimplexBounds::default()).unwrap();
        let b = solve_hull(&f, &y, SimplexBounds::default()).unwrap();
        assert_eq!(a.alpha, b.alpha);
        assert_eq!(a.residual, b.residual);
    }

    #[test]
    fn hull_point_vertex_and_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let col = random_unit(&mut rng, 4);
        let f = FeatureMatrix::new(vec![col.clone(), col.clone(), col.clone()], 0).unwrap();

        let vertex = hull_point(&f, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(vertex, col);

        let uniform = hull_point(&f, &[1.0 / 3.0; 3]).unwrap();
        for (u, c) in uniform.iter().zip(&col) {
            assert!((u - c).abs() < 1e-12);
        }

        assert!(hull_point(&f, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(FeatureMatrix::new(vec![], 0).is_err());
        assert!(FeatureMatrix::new(vec![vec![0.5, 0.5]], 0).is_err()); // not unit norm
        let f = FeatureMatrix::new(vec![vec![1.0, 0.0]], 0).unwrap();
        assert!(solve_hull(&f, &[1.0, 0.0, 0.0], SimplexBounds::default()).is_err());
        assert!(solve_hull(&f, &[1.0, 0.0], SimplexBounds::new(0.6, 0.9)).is_err());
    }
}
