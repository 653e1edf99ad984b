//! Banded LU without pivoting, for the diagonally dominant systems of the
//! θ-scheme.

use crate::error::{Error, Result};

/// Square matrix with `lower` sub- and `upper` super-diagonals, stored row by
/// row over the band.
#[derive(Clone, Debug)]
pub struct BandMatrix {
    n: usize,
    lower: usize,
    upper: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, lower: usize, upper: usize) -> Self {
        BandMatrix { n, lower, upper, data: vec![0.0; n * (lower + upper + 1)] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        if j + self.lower < i || j > i + self.upper {
            None
        } else {
            Some(i * (self.lower + self.upper + 1) + (j + self.lower - i))
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |k| self.data[k])
    }

    /// Adds `v` at `(i, j)`; panics outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.slot(i, j).unwrap_or_else(|| panic!("entry ({i}, {j}) outside the band"));
        self.data[k] += v;
    }

    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        i.saturating_sub(self.lower)..(i + self.upper + 1).min(self.n)
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        let w = self.lower + self.upper + 1;
        let edge = |i: usize| -> f64 {
            let range = self.row_range(i);
            let first = range.start + self.lower - i;
            let row = &self.data[i * w + first..i * w + first + range.len()];
            row.iter().zip(&x[range]).map(|(a, b)| a * b).sum()
        };
        let inner = self.lower..self.n.saturating_sub(self.upper).max(self.lower);
        for i in (0..self.lower.min(self.n)).chain(inner.end..self.n) {
            y[i] = edge(i);
        }
        // Rows whose whole band lies inside the matrix.
        let rows = self.data[inner.start * w..inner.end * w].chunks_exact(w);
        for ((yi, row), xs) in y[inner].iter_mut().zip(rows).zip(x.windows(w)) {
            *yi = row.iter().zip(xs).map(|(a, b)| a * b).sum();
        }
    }

    /// In-place Doolittle factorization. Fails on a vanishing pivot.
    pub fn factor(&self) -> Result<BandLu> {
        let mut lu = self.clone();
        let w = lu.lower + lu.upper + 1;
        for k in 0..lu.n {
            let pivot = lu.data[k * w + lu.lower];
            if pivot.abs() < 1e-300 || !pivot.is_finite() {
                return Err(Error::Solver { residual: f64::INFINITY });
            }
            let last = (k + lu.lower).min(lu.n - 1);
            let col_end = (k + lu.upper).min(lu.n - 1);
            for i in k + 1..=last {
                let ik = i * w + (k + lu.lower - i);
                let l = lu.data[ik] / pivot;
                lu.data[ik] = l;
                if l == 0.0 {
                    continue;
                }
                for j in k + 1..=col_end {
                    let kj = k * w + (j + lu.lower - k);
                    let ij = i * w + (j + lu.lower - i);
                    lu.data[ij] -= l * lu.data[kj];
                }
            }
        }
        Ok(BandLu { lu, a: self.clone() })
    }
}

#[derive(Clone, Debug)]
pub struct BandLu {
    lu: BandMatrix,
    a: BandMatrix,
}

impl BandLu {
    fn substitute(&self, b: &[f64], x: &mut [f64]) {
        let m = &self.lu;
        let w = m.lower + m.upper + 1;
        x.copy_from_slice(b);
        for i in 0..m.n {
            let mut acc = x[i];
            for j in i.saturating_sub(m.lower)..i {
                acc -= m.data[i * w + (j + m.lower - i)] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..m.n).rev() {
            let mut acc = x[i];
            for j in i + 1..(i + m.upper + 1).min(m.n) {
                acc -= m.data[i * w + (j + m.lower - i)] * x[j];
            }
            x[i] = acc / m.data[i * w + m.lower];
        }
    }

    /// Solves `A x = b` to relative residual `tol`, with up to two steps of
    /// iterative refinement.
    pub fn solve(&self, b: &[f64], tol: f64) -> Result<Vec<f64>> {
        let n = self.a.n;
        let mut x = vec![0.0; n];
        self.substitute(b, &mut x);
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if bnorm == 0.0 {
            return Ok(x);
        }
        let mut ax = vec![0.0; n];
        let mut r = vec![0.0; n];
        let mut dx = vec![0.0; n];
        let mut res = f64::INFINITY;
        for _ in 0..3 {
            self.a.mul_vec(&x, &mut ax);
            for i in 0..n {
                r[i] = b[i] - ax[i];
            }
            res = r.iter().map(|v| v * v).sum::<f64>().sqrt() / bnorm;
            if res <= tol {
                return Ok(x);
            }
            self.substitute(&r, &mut dx);
            for i in 0..n {
                x[i] += dx[i];
            }
        }
        if res.is_finite() && res <= tol {
            Ok(x)
        } else {
            Err(Error::Solver { residual: res })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tridiagonal_solve() {
        let n = 50;
        let mut a = BandMatrix::zeros(n, 1, 1);
        for i in 0..n {
            a.add(i, i, 4.0);
            if i > 0 {
                a.add(i, i - 1, -1.0);
            }
            if i + 1 < n {
                a.add(i, i + 1, -1.5);
            }
        }
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut b = vec![0.0; n];
        a.mul_vec(&x_true, &mut b);
        let x = a.factor().unwrap().solve(&b, 1e-12).unwrap();
        for (u, v) in x.iter().zip(&x_true) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_band() {
        let n = 40;
        let mut a = BandMatrix::zeros(n, 7, 7);
        for i in 0..n {
            a.add(i, i, 10.0);
            for off in [1usize, 6, 7] {
                if i >= off {
                    a.add(i, i - off, -1.0);
                }
                if i + off < n {
                    a.add(i, i + off, -0.5 - 0.1 * off as f64);
                }
            }
        }
        let x_true: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let mut b = vec![0.0; n];
        a.mul_vec(&x_true, &mut b);
        let x = a.factor().unwrap().solve(&b, 1e-12).unwrap();
        for (u, v) in x.iter().zip(&x_true) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_pivot_fails() {
        let a = BandMatrix::zeros(3, 1, 1);
        assert!(matches!(a.factor(), Err(Error::Solver { .. })));
    }
}
