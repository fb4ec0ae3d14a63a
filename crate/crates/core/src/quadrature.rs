//! Gauss quadrature rules via the Golub–Welsch eigenvalue method.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights of a Gauss rule from its Jacobi matrix.
fn golub_welsch(n: usize, off_diagonal: impl Fn(usize) -> f64, mu0: f64) -> Vec<(f64, f64)> {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = off_diagonal(k);
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut rule: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], mu0 * v0 * v0)
        })
        .collect();
    rule.sort_by(|a, b| a.0.total_cmp(&b.0));
    rule
}

/// Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    golub_welsch(n, |k| k as f64 / ((4 * k * k - 1) as f64).sqrt(), 2.0)
}

/// Rule for `E[f(Z)]` with `Z` standard normal (probabilists' Hermite);
/// weights sum to 1.
pub fn gauss_hermite_normal(n: usize) -> Vec<(f64, f64)> {
    golub_welsch(n, |k| (k as f64).sqrt(), 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials() {
        let rule = gauss_legendre(8);
        let int = |p: i32| rule.iter().map(|(x, w)| w * x.powi(p)).sum::<f64>();
        assert!((int(0) - 2.0).abs() < 1e-14);
        assert!(int(7).abs() < 1e-14);
        assert!((int(14) - 2.0 / 15.0).abs() < 1e-13);
    }

    #[test]
    fn hermite_matches_normal_moments() {
        let rule = gauss_hermite_normal(20);
        let m = |p: i32| rule.iter().map(|(x, w)| w * x.powi(p)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-13);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
        assert!((m(6) - 15.0).abs() < 1e-10);
    }
}
