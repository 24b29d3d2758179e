//! Small direct solvers: tridiagonal (Thomas), banded LU with partial
//! pivoting, and dense LU for the bordered blocks.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum LinalgError {
    #[error("singular matrix: zero pivot at row {row}")]
    Singular { row: usize },
    #[error("dimension mismatch")]
    Dimension,
}

/// Solves a tridiagonal system in place. `lower[i]` multiplies `x[i-1]` in
/// row `i` (`lower[0]` unused), `upper[i]` multiplies `x[i+1]`.
pub fn solve_tridiagonal(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &mut [f64],
    scratch: &mut Vec<f64>,
) -> Result<(), LinalgError> {
    let n = diag.len();
    if lower.len() != n || upper.len() != n || rhs.len() != n {
        return Err(LinalgError::Dimension);
    }
    if n == 0 {
        return Ok(());
    }
    scratch.clear();
    scratch.resize(n, 0.0);
    let mut denom = diag[0];
    if denom == 0.0 || !denom.is_finite() {
        return Err(LinalgError::Singular { row: 0 });
    }
    scratch[0] = upper[0] / denom;
    rhs[0] /= denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * scratch[i - 1];
        if denom == 0.0 || !denom.is_finite() {
            return Err(LinalgError::Singular { row: i });
        }
        scratch[i] = upper[i] / denom;
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
    Ok(())
}

/// Square banded matrix with `kl` sub- and `ku` super-diagonals, stored by
/// rows with room for the fill-in that partial pivoting creates.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    /// Row width: `kl + ku + kl + 1` (extra `kl` columns for fill-in).
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> Option<usize> {
        // Column j sits at position j - i + kl in row i.
        let pos = j as isize - i as isize + self.kl as isize;
        if pos < 0 || pos as usize >= self.width {
            None
        } else {
            Some(i * self.width + pos as usize)
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.offset(i, j).map_or(0.0, |k| self.data[k])
    }

    /// Adds `v` to entry `(i, j)`.
    ///
    /// # Panics
    /// If `(i, j)` lies outside the declared band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let in_band = j + self.kl >= i && j <= i + self.ku;
        assert!(in_band, "entry ({i}, {j}) outside band ({}, {})", self.kl, self.ku);
        let k = self.offset(i, j).expect("in band");
        self.data[k] += v;
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let in_band = j + self.kl >= i && j <= i + self.ku;
        assert!(in_band, "entry ({i}, {j}) outside band ({}, {})", self.kl, self.ku);
        let k = self.offset(i, j).expect("in band");
        self.data[k] = v;
    }

    pub fn scale_row(&mut self, i: usize, s: f64) {
        let row = &mut self.data[i * self.width..(i + 1) * self.width];
        for v in row {
            *v *= s;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for (i, yi) in y.iter_mut().enumerate() {
            let j0 = i.saturating_sub(self.kl);
            let j1 = (i + self.ku + self.kl).min(self.n - 1);
            *yi = (j0..=j1).map(|j| self.get(i, j) * x[j]).sum();
        }
        y
    }

    /// LU factorisation with row partial pivoting; consumes the matrix.
    pub fn factor(mut self) -> Result<BandLu, LinalgError> {
        let n = self.n;
        let kl = self.kl;
        let mut piv = vec![0usize; n];
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.get(k, k).abs();
            for i in k + 1..=last_row {
                let v = self.get(i, k).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(LinalgError::Singular { row: k });
            }
            piv[k] = p;
            // Upper reach of row k after possible swap.
            let last_col = (k + kl + self.ku).min(n - 1);
            if p != k {
                for j in k..=last_col {
                    let a = self.get(k, j);
                    let b = self.get(p, j);
                    if let Some(o) = self.offset(k, j) {
                        self.data[o] = b;
                    }
                    if let Some(o) = self.offset(p, j) {
                        self.data[o] = a;
                    }
                }
            }
            let pivot = self.get(k, k);
            for i in k + 1..=last_row {
                let oik = self.offset(i, k).expect("in band");
                let l = self.data[oik] / pivot;
                self.data[oik] = l;
                if l == 0.0 {
                    continue;
                }
                for j in k + 1..=last_col {
                    let ukj = self.get(k, j);
                    if ukj != 0.0 {
                        let o = self.offset(i, j).expect("fill within band");
                        self.data[o] -= l * ukj;
                    }
                }
            }
        }
        Ok(BandLu { m: self, piv })
    }
}

/// Factored band matrix.
#[derive(Debug, Clone)]
pub struct BandLu {
    m: BandMatrix,
    piv: Vec<usize>,
}

impl BandLu {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.m.n;
        let kl = self.m.kl;
        let ku = self.m.ku;
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk != 0.0 {
                for i in k + 1..=(k + kl).min(n - 1) {
                    b[i] -= self.m.get(i, k) * bk;
                }
            }
        }
        for k in (0..n).rev() {
            let last_col = (k + kl + ku).min(n - 1);
            let mut s = b[k];
            for j in k + 1..=last_col {
                s -= self.m.get(k, j) * b[j];
            }
            b[k] = s / self.m.get(k, k);
        }
    }

    /// Smallest |U_kk| relative to the largest; a cheap conditioning hint.
    pub fn pivot_ratio(&self) -> f64 {
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for k in 0..self.m.n {
            let v = self.m.get(k, k).abs();
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi == 0.0 {
            0.0
        } else {
            lo / hi
        }
    }
}

/// Dense row-major LU with partial pivoting.
#[derive(Debug, Clone)]
pub struct DenseLu {
    n: usize,
    a: Vec<f64>,
    piv: Vec<usize>,
}

impl DenseLu {
    pub fn factor(n: usize, mut a: Vec<f64>) -> Result<Self, LinalgError> {
        if a.len() != n * n {
            return Err(LinalgError::Dimension);
        }
        let mut piv = vec![0; n];
        for k in 0..n {
            let (p, best) = (k..n)
                .map(|i| (i, a[i * n + k].abs()))
                .fold((k, -1.0), |acc, v| if v.1 > acc.1 { v } else { acc });
            if best == 0.0 || !best.is_finite() {
                return Err(LinalgError::Singular { row: k });
            }
            piv[k] = p;
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
            }
            let pivot = a[k * n + k];
            for i in k + 1..n {
                let l = a[i * n + k] / pivot;
                a[i * n + k] = l;
                for j in k + 1..n {
                    a[i * n + j] -= l * a[k * n + j];
                }
            }
        }
        Ok(Self { n, a, piv })
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for k in 0..n {
            b.swap(k, self.piv[k]);
        }
        for k in 0..n {
            for i in k + 1..n {
                b[i] -= self.a[i * n + k] * b[k];
            }
        }
        for k in (0..n).rev() {
            let mut s = b[k];
            for j in k + 1..n {
                s -= self.a[k * n + j] * b[j];
            }
            b[k] = s / self.a[k * n + k];
        }
    }
}
