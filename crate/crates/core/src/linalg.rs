//! Small dense matrix helpers used by the EEG preprocessing path.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::diff::kernels::gemm;
use crate::error::{shape_err, Error, Result};

/// Row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err("mat", &[rows, cols], &[data.len()]);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn eye(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.at(r, c);
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return shape_err(
                "mat matmul",
                &[self.rows, self.cols],
                &[other.rows, other.cols],
            );
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            false,
            &other.data,
            false,
            0.0,
            &mut out.data,
        );
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.cols {
            return shape_err(
                "mat matmul_nt",
                &[self.rows, self.cols],
                &[other.rows, other.cols],
            );
        }
        let mut out = Mat::zeros(self.rows, other.rows);
        gemm(
            self.rows,
            self.cols,
            other.rows,
            &self.data,
            false,
            &other.data,
            true,
            0.0,
            &mut out.data,
        );
        Ok(out)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// Inverse by Gauss–Jordan elimination with partial pivoting.
    pub fn inverse(&self) -> Result<Mat> {
        let n = self.rows;
        if n != self.cols {
            return shape_err("inverse", &[self.rows, self.cols], &[n, n]);
        }
        let mut a = self.clone();
        let mut inv = Mat::eye(n);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a.at(i, col).abs().total_cmp(&a.at(j, col).abs()))
                .unwrap();
            let pv = a.at(pivot, col);
            if pv.abs() < 1e-300 {
                return Err(Error::RankDeficient {
                    dim: col,
                    value: pv,
                });
            }
            if pivot != col {
                for c in 0..n {
                    a.data.swap(pivot * n + c, col * n + c);
                    inv.data.swap(pivot * n + c, col * n + c);
                }
            }
            let inv_p = 1.0 / a.at(col, col);
            for c in 0..n {
                a.data[col * n + c] *= inv_p;
                inv.data[col * n + c] *= inv_p;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = a.at(r, col);
                if f == 0.0 {
                    continue;
                }
                for c in 0..n {
                    a.data[r * n + c] -= f * a.data[col * n + c];
                    inv.data[r * n + c] -= f * inv.data[col * n + c];
                }
            }
        }
        Ok(inv)
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// the columns of the returned matrix.
pub fn symmetric_eigen(m: &Mat) -> Result<(Vec<f64>, Mat)> {
    let n = m.rows;
    if n != m.cols {
        return shape_err("symmetric_eigen", &[m.rows, m.cols], &[n, n]);
    }
    let mut a = m.clone();
    let mut v = Mat::eye(n);
    let scale = m.frobenius().max(1e-300);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.at(i, j) * a.at(i, j))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.at(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.at(k, p);
                    let akq = a.at(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.at(p, k);
                    let aqk = a.at(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.at(j, j).total_cmp(&a.at(i, i)));
    let values = order.iter().map(|&i| a.at(i, i)).collect();
    let mut vecs = Mat::zeros(n, n);
    for (new_c, &old_c) in order.iter().enumerate() {
        for r in 0..n {
            vecs.set(r, new_c, v.at(r, old_c));
        }
    }
    Ok((values, vecs))
}

/// `(M Mᵀ)^{-1/2} M`, the symmetric decorrelation used by parallel FastICA.
pub fn symmetric_decorrelate(m: &Mat) -> Result<Mat> {
    let mmt = m.matmul_nt(m)?;
    let (vals, vecs) = symmetric_eigen(&mmt)?;
    let n = m.rows;
    let mut scaled = vecs.clone();
    for c in 0..n {
        let inv = 1.0 / vals[c].max(1e-14).sqrt();
        for r in 0..n {
            scaled.data[r * n + c] *= inv;
        }
    }
    scaled.matmul_nt(&vecs)?.matmul(m)
}
