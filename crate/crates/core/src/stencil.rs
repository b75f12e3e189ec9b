//! Finite-difference coefficients shared by the pointwise operators and the
//! sparse assembly used by the reconstruction solver.

/// A 1D stencil: `weights[m]` multiplies sample `start + m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub start: usize,
    weights: [f64; 4],
    len: usize,
}

impl Stencil {
    /// Nonzero `(index, weight)` pairs.
    pub fn terms(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights[..self.len]
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(move |(m, w)| (self.start + m, *w))
    }

    /// Apply to a strided line: sample `j` lives at `data[offset + j * stride]`.
    #[inline]
    pub fn apply(&self, data: &[f64], offset: usize, stride: usize) -> f64 {
        let mut acc = 0.0;
        for m in 0..self.len {
            acc += self.weights[m] * data[offset + (self.start + m) * stride];
        }
        acc
    }
}

/// First derivative at node `i` of an `n`-point line with spacing `h`:
/// central in the interior, three-point one-sided at the ends.
pub fn first(n: usize, i: usize, h: f64) -> Stencil {
    debug_assert!(n >= 3 && i < n);
    let r = 1.0 / h;
    if i == 0 {
        Stencil { start: 0, weights: [-1.5 * r, 2.0 * r, -0.5 * r, 0.0], len: 3 }
    } else if i == n - 1 {
        Stencil { start: n - 3, weights: [0.5 * r, -2.0 * r, 1.5 * r, 0.0], len: 3 }
    } else {
        Stencil { start: i - 1, weights: [-0.5 * r, 0.0, 0.5 * r, 0.0], len: 3 }
    }
}

/// Second derivative at node `i`: central in the interior, four-point
/// one-sided (second order) at the ends.
pub fn second(n: usize, i: usize, h: f64) -> Stencil {
    debug_assert!(n >= 4 && i < n);
    let r = 1.0 / (h * h);
    if i == 0 {
        Stencil { start: 0, weights: [2.0 * r, -5.0 * r, 4.0 * r, -r], len: 4 }
    } else if i == n - 1 {
        Stencil { start: n - 4, weights: [-r, 4.0 * r, -5.0 * r, 2.0 * r], len: 4 }
    } else {
        Stencil { start: i - 1, weights: [r, -2.0 * r, r, 0.0], len: 3 }
    }
}

/// Stencil for derivative `order` (1 or 2).
pub fn of_order(order: usize, n: usize, i: usize, h: f64) -> Stencil {
    match order {
        1 => first(n, i, h),
        2 => second(n, i, h),
        _ => panic!("unsupported derivative order {order}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(s: &Stencil, f: &[f64]) -> f64 {
        s.terms().map(|(j, w)| w * f[j]).sum()
    }

    #[test]
    fn exact_on_quadratics() {
        let h = 0.1;
        let n = 8;
        let f: Vec<f64> = (0..n).map(|j| {
            let x = j as f64 * h;
            1.0 - 2.0 * x + 3.0 * x * x
        }).collect();
        for i in 0..n {
            let x = i as f64 * h;
            assert!((eval(&first(n, i, h), &f) - (-2.0 + 6.0 * x)).abs() < 1e-10);
            assert!((eval(&second(n, i, h), &f) - 6.0).abs() < 1e-9);
        }
    }

    #[test]
    fn second_exact_on_cubics_at_ends() {
        let h = 0.25;
        let n = 6;
        let f: Vec<f64> = (0..n).map(|j| (j as f64 * h).powi(3)).collect();
        let x_end = (n - 1) as f64 * h;
        assert!(eval(&second(n, 0, h), &f).abs() < 1e-10);
        assert!((eval(&second(n, n - 1, h), &f) - 6.0 * x_end).abs() < 1e-9);
    }

    #[test]
    fn apply_matches_terms() {
        let data = [0.3, -1.0, 2.0, 0.5, 4.0, 1.5];
        for i in 0..3 {
            let s = second(data.len(), i, 0.5);
            let direct: f64 = s.terms().map(|(j, w)| w * data[j]).sum();
            assert_eq!(s.apply(&data, 0, 1), direct);
        }
    }
}
