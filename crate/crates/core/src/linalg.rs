//! Dense least squares via column-pivoted Householder QR.
//!
//! The annihilator `M_Z = I - Z (Z'Z)^-1 Z'` is never formed; it is applied by
//! computing `Q'v`, zeroing the leading `k` entries and applying `Q` back.

use thiserror::Error;

/// Pivot tolerance relative to the largest pivot of `R`.
pub const RANK_TOLERANCE: f64 = 1e-10;
/// `dot(M_Z a, M_Z a) < DEGENERATE_TOLERANCE * dot(a, a)` means the controls
/// explain the treatment completely.
pub const DEGENERATE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("design matrix is numerically rank deficient (rank {rank} of {cols})")]
    RankDeficient { rank: usize, cols: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("treatment is fully explained by the controls")]
    DegenerateTreatment,
    #[error("treatment has zero variance")]
    ConstantTreatment,
    #[error("matrix must have at least one row and one column")]
    Empty,
    #[error("non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("controls do not span the intercept")]
    MissingIntercept,
}

impl LinalgError {
    pub fn name(&self) -> &'static str {
        match self {
            LinalgError::RankDeficient { .. } => "RankDeficient",
            LinalgError::DimensionMismatch { .. } => "DimensionMismatch",
            LinalgError::DegenerateTreatment => "DegenerateTreatment",
            LinalgError::ConstantTreatment => "ConstantTreatment",
            LinalgError::Empty => "Empty",
            LinalgError::NonFinite { .. } => "NonFinite",
            LinalgError::MissingIntercept => "MissingIntercept",
        }
    }
}

/// Dense matrix, stored column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if n == 0 || k == 0 {
            return Err(LinalgError::Empty);
        }
        let mut data = vec![0.0; n * k];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(LinalgError::DimensionMismatch {
                    expected: k,
                    found: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                data[j * n + i] = v;
            }
        }
        Self::checked(n, k, data)
    }

    pub fn from_columns<C: AsRef<[f64]>>(columns: &[C]) -> Result<Self, LinalgError> {
        let k = columns.len();
        let n = columns.first().map_or(0, |c| c.as_ref().len());
        if n == 0 || k == 0 {
            return Err(LinalgError::Empty);
        }
        let mut data = Vec::with_capacity(n * k);
        for c in columns {
            let c = c.as_ref();
            if c.len() != n {
                return Err(LinalgError::DimensionMismatch {
                    expected: n,
                    found: c.len(),
                });
            }
            data.extend_from_slice(c);
        }
        Self::checked(n, k, data)
    }

    /// `[1 | columns...]`.
    pub fn with_intercept<C: AsRef<[f64]>>(n: usize, columns: &[C]) -> Result<Self, LinalgError> {
        if n == 0 {
            return Err(LinalgError::Empty);
        }
        let mut data = vec![1.0; n];
        for c in columns {
            let c = c.as_ref();
            if c.len() != n {
                return Err(LinalgError::DimensionMismatch {
                    expected: n,
                    found: c.len(),
                });
            }
            data.extend_from_slice(c);
        }
        Self::checked(n, columns.len() + 1, data)
    }

    pub fn intercept(n: usize) -> Result<Self, LinalgError> {
        Self::with_intercept::<Vec<f64>>(n, &[])
    }

    fn checked(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if let Some(p) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: p % rows,
                col: p / rows,
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for (j, &xj) in x.iter().enumerate() {
            axpy(xj, self.column(j), &mut out);
        }
        out
    }

    /// Appends columns on the right.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if other.rows != self.rows {
            return Err(LinalgError::DimensionMismatch {
                expected: self.rows,
                found: other.rows,
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols + other.cols,
            data,
        })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Householder QR with column pivoting, `Z P = Q R`.
#[derive(Debug, Clone)]
pub struct Qr {
    rows: usize,
    cols: usize,
    // Householder vectors below the diagonal, R on and above it.
    qr: Vec<f64>,
    tau: Vec<f64>,
    perm: Vec<usize>,
}

impl Qr {
    /// Factorizes `z`, failing when its columns are numerically collinear.
    pub fn new(z: &Matrix) -> Result<Self, LinalgError> {
        let (n, k) = (z.rows, z.cols);
        if n < k {
            return Err(LinalgError::RankDeficient { rank: n, cols: k });
        }
        let mut qr = z.data.clone();
        let mut tau = vec![0.0; k];
        let mut perm: Vec<usize> = (0..k).collect();
        let mut norms: Vec<f64> = (0..k).map(|j| dot(z.column(j), z.column(j))).collect();
        let mut max_pivot = 0.0_f64;

        for j in 0..k {
            // Recompute remaining squared norms exactly; k is small so this is cheap
            // and avoids the cancellation of downdating.
            for (c, norm) in norms.iter_mut().enumerate().skip(j) {
                let col = &qr[c * n + j..(c + 1) * n];
                *norm = dot(col, col);
            }
            let p = (j..k)
                .max_by(|&a, &b| norms[a].total_cmp(&norms[b]))
                .unwrap_or(j);
            if p != j {
                for i in 0..n {
                    qr.swap(j * n + i, p * n + i);
                }
                norms.swap(j, p);
                perm.swap(j, p);
            }

            let col = &mut qr[j * n..(j + 1) * n];
            let alpha = norms[j].sqrt();
            if j == 0 {
                max_pivot = alpha;
            }
            if alpha <= RANK_TOLERANCE * max_pivot || alpha == 0.0 {
                return Err(LinalgError::RankDeficient { rank: j, cols: k });
            }
            let x0 = col[j];
            let beta = if x0 >= 0.0 { -alpha } else { alpha };
            let v0 = x0 - beta;
            for v in col[j + 1..].iter_mut() {
                *v /= v0;
            }
            tau[j] = (beta - x0) / beta;
            col[j] = beta;

            let (head, tail) = qr.split_at_mut((j + 1) * n);
            let v = &head[j * n + j + 1..(j + 1) * n];
            for c in 0..k - j - 1 {
                let target = &mut tail[c * n + j..(c + 1) * n];
                let s = tau[j] * (target[0] + dot(v, &target[1..]));
                target[0] -= s;
                axpy(-s, v, &mut target[1..]);
            }
        }
        Ok(Qr {
            rows: n,
            cols: k,
            qr,
            tau,
            perm,
        })
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    fn apply_qt(&self, v: &mut [f64]) {
        let n = self.rows;
        for j in 0..self.cols {
            let h = &self.qr[j * n + j + 1..(j + 1) * n];
            let s = self.tau[j] * (v[j] + dot(h, &v[j + 1..]));
            v[j] -= s;
            axpy(-s, h, &mut v[j + 1..]);
        }
    }

    fn apply_q(&self, v: &mut [f64]) {
        let n = self.rows;
        for j in (0..self.cols).rev() {
            let h = &self.qr[j * n + j + 1..(j + 1) * n];
            let s = self.tau[j] * (v[j] + dot(h, &v[j + 1..]));
            v[j] -= s;
            axpy(-s, h, &mut v[j + 1..]);
        }
    }

    fn check_len(&self, v: &[f64]) -> Result<(), LinalgError> {
        if v.len() != self.rows {
            return Err(LinalgError::DimensionMismatch {
                expected: self.rows,
                found: v.len(),
            });
        }
        Ok(())
    }

    /// `M_Z v`.
    pub fn annihilate(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        self.check_len(v)?;
        let mut w = v.to_vec();
        self.apply_qt(&mut w);
        w[..self.cols].iter_mut().for_each(|x| *x = 0.0);
        self.apply_q(&mut w);
        Ok(w)
    }

    /// Least-squares coefficients, in the original column order.
    pub fn solve(&self, y: &[f64]) -> Result<Vec<f64>, LinalgError> {
        self.check_len(y)?;
        let (n, k) = (self.rows, self.cols);
        let mut w = y.to_vec();
        self.apply_qt(&mut w);
        let mut x = vec![0.0; k];
        for i in (0..k).rev() {
            let mut s = w[i];
            for (c, xc) in x.iter().enumerate().skip(i + 1) {
                s -= self.qr[c * n + i] * xc;
            }
            x[i] = s / self.qr[i * n + i];
        }
        let mut out = vec![0.0; k];
        for (i, &p) in self.perm.iter().enumerate() {
            out[p] = x[i];
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
    pub ssr: f64,
    /// Present when the design contains a constant column.
    pub r_squared: Option<f64>,
}

pub fn ols_fit(design: &Matrix, y: &[f64]) -> Result<OlsFit, LinalgError> {
    let qr = Qr::new(design)?;
    let coefficients = qr.solve(y)?;
    let residuals = qr.annihilate(y)?;
    let ssr = dot(&residuals, &residuals);
    let has_constant = (0..design.cols).any(|j| {
        let c = design.column(j);
        c[0] != 0.0 && c.iter().all(|&v| v == c[0])
    });
    let r_squared = has_constant.then(|| {
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        if tss > 0.0 {
            (1.0 - ssr / tss).clamp(0.0, 1.0)
        } else {
            0.0
        }
    });
    Ok(OlsFit {
        coefficients,
        residuals,
        ssr,
        r_squared,
    })
}

pub fn annihilate(z: &Matrix, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
    Qr::new(z)?.annihilate(v)
}

/// Coefficient on `a` in the regression of `y` on `[a | z]`, computed by
/// partialling `z` out of both sides.
pub fn fwl_coefficient(a: &[f64], z: &Matrix, y: &[f64]) -> Result<f64, LinalgError> {
    let qr = Qr::new(z)?;
    fwl_with(&qr, a, y)
}

/// Same as [`fwl_coefficient`] with a precomputed factorization of the controls.
pub fn fwl_with(qr: &Qr, a: &[f64], y: &[f64]) -> Result<f64, LinalgError> {
    let ra = qr.annihilate(a)?;
    let ry = qr.annihilate(y)?;
    let den = dot(&ra, &ra);
    if !(den >= DEGENERATE_TOLERANCE * dot(a, a)) || den == 0.0 {
        return Err(LinalgError::DegenerateTreatment);
    }
    Ok(dot(&ra, &ry) / den)
}

fn centered_ss(a: &[f64]) -> f64 {
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    a.iter().map(|v| (v - mean).powi(2)).sum()
}

/// `1 - a'M_Z a / a'M_1 a`. `z` must have the constant vector in its span.
pub fn r_squared_of(a: &[f64], z: &Matrix) -> Result<f64, LinalgError> {
    let qr = Qr::new(z)?;
    qr.check_len(a)?;
    let n = a.len();
    let ones = vec![1.0; n];
    let r1 = qr.annihilate(&ones)?;
    if dot(&r1, &r1) > 1e-16 * n as f64 {
        return Err(LinalgError::MissingIntercept);
    }
    let tss = centered_ss(a);
    if tss <= DEGENERATE_TOLERANCE * dot(a, a) {
        return Err(LinalgError::ConstantTreatment);
    }
    let ra = qr.annihilate(a)?;
    Ok((1.0 - dot(&ra, &ra) / tss).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn exact_line_through_two_points() {
        let d = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let fit = ols_fit(&d, &[1.0, 3.0]).unwrap();
        assert!(close(fit.coefficients[0], 1.0, 1e-12));
        assert!(close(fit.coefficients[1], 2.0, 1e-12));
        assert!(fit.ssr < 1e-24);
    }

    #[test]
    fn intercept_only_fit_is_the_mean() {
        let d = Matrix::intercept(3).unwrap();
        let fit = ols_fit(&d, &[2.0, 4.0, 6.0]).unwrap();
        assert!(close(fit.coefficients[0], 4.0, 1e-12));
        for (r, e) in fit.residuals.iter().zip([-2.0, 0.0, 2.0]) {
            assert!(close(*r, e, 1e-12));
        }
        assert!(close(fit.ssr, 8.0, 1e-12));
        assert_eq!(fit.r_squared, Some(0.0));
    }

    #[test]
    fn three_point_regression_matches_normal_equations() {
        // Normal equations: [3 3; 3 5] b = [7; 10] -> b = (5/6, 3/2).
        let d = Matrix::with_intercept(3, &[vec![0.0, 1.0, 2.0]]).unwrap();
        let fit = ols_fit(&d, &[1.0, 2.0, 4.0]).unwrap();
        assert!(close(fit.coefficients[0], 5.0 / 6.0, 1e-12));
        assert!(close(fit.coefficients[1], 1.5, 1e-12));
        assert!(close(fit.ssr, 1.0 / 6.0, 1e-12));
        let r = annihilate(&d, &[1.0, 2.0, 4.0]).unwrap();
        for (x, e) in r.iter().zip([1.0 / 6.0, -1.0 / 3.0, 1.0 / 6.0]) {
            assert!(close(*x, e, 1e-12));
        }
    }

    #[test]
    fn centering() {
        let r = annihilate(&Matrix::intercept(3).unwrap(), &[1.0, 2.0, 3.0]).unwrap();
        for (x, e) in r.iter().zip([-1.0, 0.0, 1.0]) {
            assert!(close(*x, e, 1e-12));
        }
    }

    #[test]
    fn own_column_is_annihilated() {
        let x = vec![0.3, -1.2, 2.5, 0.7, 1.1];
        let z = Matrix::with_intercept(5, &[x.clone()]).unwrap();
        let r = annihilate(&z, &x).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn collinear_design_is_rejected() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let z = Matrix::with_intercept(4, &[x, y]).unwrap();
        assert!(matches!(
            Qr::new(&z),
            Err(LinalgError::RankDeficient { .. })
        ));
    }

    #[test]
    fn too_few_rows_is_rank_deficient() {
        let z = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(
            Qr::new(&z),
            Err(LinalgError::RankDeficient { .. })
        ));
    }

    #[test]
    fn length_mismatch() {
        let z = Matrix::intercept(3).unwrap();
        assert!(matches!(
            annihilate(&z, &[1.0, 2.0]),
            Err(LinalgError::DimensionMismatch {
                expected: 3,
                found: 2
            })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            Matrix::from_columns(&[vec![1.0, f64::NAN]]),
            Err(LinalgError::NonFinite { row: 1, col: 0 })
        ));
    }

    #[test]
    fn fwl_intercept_only_is_simple_slope() {
        let a = [1.0, 2.0, 4.0, 7.0];
        let y = [0.5, 1.0, 3.0, 2.0];
        let b = fwl_coefficient(&a, &Matrix::intercept(4).unwrap(), &y).unwrap();
        let ma = a.iter().sum::<f64>() / 4.0;
        let my = y.iter().sum::<f64>() / 4.0;
        let sxy: f64 = a.iter().zip(&y).map(|(x, y)| (x - ma) * (y - my)).sum();
        let sxx: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        assert!(close(b, sxy / sxx, 1e-12));
    }

    #[test]
    fn fwl_degenerate_treatment() {
        let x = vec![1.0, 2.0, 3.0, 5.0];
        let a: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        let z = Matrix::with_intercept(4, &[x]).unwrap();
        assert_eq!(
            fwl_coefficient(&a, &z, &[1.0, 0.0, 1.0, 0.0]),
            Err(LinalgError::DegenerateTreatment)
        );
    }

    #[test]
    fn r_squared_limits() {
        let x = vec![0.1, 0.5, -0.3, 1.2, 0.8];
        let z = Matrix::with_intercept(5, &[x.clone()]).unwrap();
        assert!(close(r_squared_of(&x, &z).unwrap(), 1.0, 1e-12));
        let z1 = Matrix::intercept(5).unwrap();
        assert!(close(r_squared_of(&x, &z1).unwrap(), 0.0, 1e-12));
        assert_eq!(
            r_squared_of(&[2.0; 5], &z1),
            Err(LinalgError::ConstantTreatment)
        );
        let no_icpt = Matrix::from_columns(&[x.clone()]).unwrap();
        assert_eq!(
            r_squared_of(&x, &no_icpt),
            Err(LinalgError::MissingIntercept)
        );
    }
}
