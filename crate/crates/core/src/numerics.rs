//! Small numerical kernels shared by the geometry, flow and entropy layers.

use std::f64::consts::PI;

/// Volume of the unit `k`-sphere `S^k` embedded in `R^{k+1}`.
///
/// Uses `|S^k| = 2 pi^{(k+1)/2} / Gamma((k+1)/2)` evaluated through the
/// exact two-step recursion `|S^k| = 2 pi |S^{k-2}| / (k - 1)`.
pub fn unit_sphere_volume(k: usize) -> f64 {
    match k {
        0 => 2.0,
        1 => 2.0 * PI,
        _ => 2.0 * PI * unit_sphere_volume(k - 2) / (k as f64 - 1.0),
    }
}

/// Finite-difference weights for derivatives `0..=max_order` at `z` from the
/// nodes `x` (Fornberg's recursion). Returns `w[k][j]`, the weight of node `j`
/// in the `k`-th derivative.
pub fn fd_weights(z: f64, x: &[f64], max_order: usize) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut c = vec![vec![0.0; n]; max_order + 1];
    let mut c1 = 1.0;
    let mut c4 = x[0] - z;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(max_order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i] - z;
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

/// Allocation-free variant of [`fd_weights`] for `P`-point stencils, returning
/// weights for the value, first and second derivative.
pub fn fd_weights_array<const P: usize>(z: f64, x: &[f64; P]) -> [[f64; P]; 3] {
    let mut c = [[0.0; P]; 3];
    let mut c1 = 1.0;
    let mut c4 = x[0] - z;
    c[0][0] = 1.0;
    for i in 1..P {
        let mn = i.min(2);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i] - z;
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; order];
    let mut weights = vec![0.0; order];
    let m = order.div_ceil(2);
    for i in 0..m {
        let mut x = (PI * (i as f64 + 0.75) / (order as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(order, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(order, x);
        if d != 0.0 {
            dp = d;
        }
        nodes[i] = -x;
        nodes[order - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[order - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(order: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if order == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=order {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let n = order as f64;
    let d = n * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// A tridiagonal matrix, optionally with the two corner entries of a cyclic
/// (periodic) system.
#[derive(Debug, Clone)]
pub struct Tridiagonal {
    /// `lower[i] = A[i+1][i]`
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    /// `upper[i] = A[i][i+1]`
    pub upper: Vec<f64>,
    /// `(A[0][n-1], A[n-1][0])` for cyclic systems.
    pub corners: Option<(f64, f64)>,
}

impl Tridiagonal {
    pub fn zeros(n: usize, cyclic: bool) -> Self {
        Tridiagonal {
            lower: vec![0.0; n.saturating_sub(1)],
            diag: vec![0.0; n],
            upper: vec![0.0; n.saturating_sub(1)],
            corners: cyclic.then_some((0.0, 0.0)),
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Adds `value` at `(row, col)`; `row` and `col` must be adjacent
    /// (cyclically, when the matrix has corners).
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        let n = self.len();
        if row == col {
            self.diag[row] += value;
        } else if col == row + 1 {
            self.upper[row] += value;
        } else if row == col + 1 {
            self.lower[col] += value;
        } else if let Some((ref mut top, ref mut bottom)) = self.corners {
            if row == 0 && col == n - 1 {
                *top += value;
            } else if row == n - 1 && col == 0 {
                *bottom += value;
            } else {
                panic!("entry ({row}, {col}) outside the cyclic band");
            }
        } else {
            panic!("entry ({row}, {col}) outside the band");
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = self.diag[i] * x[i];
            if i > 0 {
                acc += self.lower[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                acc += self.upper[i] * x[i + 1];
            }
            y[i] = acc;
        }
        if let Some((top, bottom)) = self.corners {
            y[0] += top * x[n - 1];
            y[n - 1] += bottom * x[0];
        }
        y
    }

    /// Solves `A x = b` by Gaussian elimination with partial pivoting.
    /// Returns `None` when the matrix is numerically singular.
    pub fn solve(&self, b: &[f64]) -> Option<Vec<f64>> {
        match self.corners {
            None => solve_banded(&self.lower, &self.diag, &self.upper, b),
            Some((top, bottom)) => self.solve_cyclic(top, bottom, b),
        }
    }

    fn solve_cyclic(&self, top: f64, bottom: f64, b: &[f64]) -> Option<Vec<f64>> {
        let n = self.len();
        if n < 3 {
            return dense_solve(&self.to_dense(), b);
        }
        // Sherman-Morrison: A = T + u v^T with u = (g, 0, .., 0, bottom), v = (1, 0, .., 0, top / g).
        let gamma = if self.diag[0] != 0.0 { -self.diag[0] } else { -1.0 };
        let mut diag = self.diag.clone();
        diag[0] -= gamma;
        diag[n - 1] -= bottom * top / gamma;
        let x = solve_banded(&self.lower, &diag, &self.upper, b)?;
        let mut u = vec![0.0; n];
        u[0] = gamma;
        u[n - 1] = bottom;
        let z = solve_banded(&self.lower, &diag, &self.upper, &u)?;
        let vx = x[0] + top / gamma * x[n - 1];
        let vz = z[0] + top / gamma * z[n - 1];
        let denom = 1.0 + vz;
        if denom.abs() < 1e-300 {
            return None;
        }
        let factor = vx / denom;
        Some(x.iter().zip(&z).map(|(xi, zi)| xi - factor * zi).collect())
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            a[i][i] = self.diag[i];
            if i + 1 < n {
                a[i][i + 1] = self.upper[i];
                a[i + 1][i] = self.lower[i];
            }
        }
        if let Some((top, bottom)) = self.corners {
            a[0][n - 1] += top;
            a[n - 1][0] += bottom;
        }
        a
    }
}

/// Tridiagonal solve with partial pivoting (the LAPACK `gtsv` scheme).
fn solve_banded(lower: &[f64], diag: &[f64], upper: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    if n == 0 {
        return Some(Vec::new());
    }
    if n == 1 {
        return (diag[0] != 0.0).then(|| vec![b[0] / diag[0]]);
    }
    let dl = lower.to_vec();
    let mut d = diag.to_vec();
    let mut du = upper.to_vec();
    let mut du2 = vec![0.0; n];
    let mut x = b.to_vec();
    for i in 0..n - 1 {
        if d[i].abs() >= dl[i].abs() {
            if d[i] == 0.0 {
                return None;
            }
            let fact = dl[i] / d[i];
            d[i + 1] -= fact * du[i];
            x[i + 1] -= fact * x[i];
            du2[i] = 0.0;
        } else {
            let fact = d[i] / dl[i];
            d[i] = dl[i];
            let temp = d[i + 1];
            d[i + 1] = du[i] - fact * temp;
            if i + 1 < n - 1 {
                du2[i] = du[i + 1];
                du[i + 1] *= -fact;
            }
            du[i] = temp;
            x.swap(i, i + 1);
            x[i + 1] -= fact * x[i];
        }
    }
    if d[n - 1] == 0.0 {
        return None;
    }
    x[n - 1] /= d[n - 1];
    x[n - 2] = (x[n - 2] - du[n - 2] * x[n - 1]) / d[n - 2];
    for i in (0..n.saturating_sub(2)).rev() {
        x[i] = (x[i] - du[i] * x[i + 1] - du2[i] * x[i + 2]) / d[i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Dense Gaussian elimination with partial pivoting.
pub fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col] == 0.0 {
            return None;
        }
        m.swap(col, pivot);
        x.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            if f != 0.0 {
                let (top, bottom) = m.split_at_mut(row);
                for (a, b) in bottom[0][col..].iter_mut().zip(&top[col][col..]) {
                    *a -= f * b;
                }
                x[row] -= f * x[col];
            }
        }
    }
    for row in (0..n).rev() {
        let mut acc = x[row];
        for k in row + 1..n {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Ordinary least-squares line `y = intercept + slope * x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|xi| (xi - mx) * (xi - mx)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(xi, yi)| (xi - mx) * (yi - my)).sum();
    let slope = sxy / sxx;
    Some((my - slope * mx, slope))
}
