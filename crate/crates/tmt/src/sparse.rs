//! Minimal CSR sparse matrix with transpose products, plus CGNR.
//!
//! Everything downstream (decomposition solves, forward operators,
//! regularized inversion) reduces to least squares on stacked sparse
//! blocks, so this is the one linear-algebra workhorse in the crate.

use crate::{Result, TmtError};
use rayon::prelude::*;

/// Compressed sparse row matrix.
#[derive(Debug, Clone)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Build from per-row (column, value) lists. Duplicate columns in a row
    /// are summed.
    pub fn from_rows(ncols: usize, rows: Vec<Vec<(u32, f64)>>) -> Csr {
        let nrows = rows.len();
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        row_ptr.push(0usize);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for mut row in rows {
            row.sort_unstable_by_key(|e| e.0);
            let mut k = 0;
            while k < row.len() {
                let c = row[k].0;
                let mut v = 0.0;
                while k < row.len() && row[k].0 == c {
                    v += row[k].1;
                    k += 1;
                }
                if v != 0.0 {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Csr {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// y = A x.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        y.par_iter_mut().enumerate().for_each(|(r, out)| {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k] as usize];
            }
            *out = acc;
        });
    }

    /// C = A B (standard row-by-row sparse product).
    pub fn matmul(&self, other: &Csr) -> Csr {
        assert_eq!(self.ncols, other.nrows);
        let rows: Vec<Vec<(u32, f64)>> = (0..self.nrows)
            .into_par_iter()
            .map(|r| {
                let mut acc: std::collections::HashMap<u32, f64> = std::collections::HashMap::new();
                for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                    let a = self.values[k];
                    let mid = self.col_idx[k] as usize;
                    for k2 in other.row_ptr[mid]..other.row_ptr[mid + 1] {
                        *acc.entry(other.col_idx[k2]).or_insert(0.0) += a * other.values[k2];
                    }
                }
                acc.into_iter().collect()
            })
            .collect();
        Csr::from_rows(other.ncols, rows)
    }

    /// Submatrix: keep the listed rows (in order); remap columns through
    /// `col_map` (None = drop the column).
    pub fn select(&self, rows: &[usize], col_map: &[Option<u32>], new_ncols: usize) -> Csr {
        assert_eq!(col_map.len(), self.ncols);
        let out_rows: Vec<Vec<(u32, f64)>> = rows
            .iter()
            .map(|&r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .filter_map(|k| {
                        col_map[self.col_idx[k] as usize].map(|c| (c, self.values[k]))
                    })
                    .collect()
            })
            .collect();
        Csr::from_rows(new_ncols, out_rows)
    }

    /// A^T as a new matrix (counting sort over columns).
    pub fn transpose(&self) -> Csr {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.col_idx {
            counts[c as usize + 1] += 1;
        }
        for k in 1..counts.len() {
            counts[k] += counts[k - 1];
        }
        let row_ptr = counts.clone();
        let mut col_idx = vec![0u32; self.nnz()];
        let mut values = vec![0.0f64; self.nnz()];
        let mut cursor = counts;
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let dst = cursor[self.col_idx[k] as usize];
                col_idx[dst] = r as u32;
                values[dst] = self.values[k];
                cursor[self.col_idx[k] as usize] += 1;
            }
        }
        Csr {
            nrows: self.ncols,
            ncols: self.nrows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// y += A^T x (serial scatter; rows may share columns).
    pub fn mul_transpose_add(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.nrows);
        assert_eq!(y.len(), self.ncols);
        for r in 0..self.nrows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.col_idx[k] as usize] += self.values[k] * xr;
            }
        }
    }
}

/// A stacked least-squares system: minimize sum_b ||w_b (A_b x - rhs_b)||^2.
pub struct LsqBlock<'a> {
    pub mat: &'a Csr,
    pub rhs: Vec<f64>,
    pub weight: f64,
}

/// Outcome of a CGNR solve.
#[derive(Debug, Clone)]
pub struct CgnrSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Relative normal-equation residual ||A^T r|| / ||A^T b||.
    pub rel_normal_residual: f64,
    /// Per-block final data residual norms ||A_b x - rhs_b||.
    pub block_residuals: Vec<f64>,
}

/// A solve that cannot push the relative normal residual below this after
/// `max_iter` iterations is reported as stagnation.
pub const STAGNATION_FLOOR: f64 = 1e-4;

/// CGNR (conjugate gradients on the normal equations) for stacked blocks.
///
/// Converges to the least-squares minimizer; with zero right-hand side the
/// iterate stays exactly zero. Hitting `max_iter` with a substantially
/// reduced normal residual returns the iterate; [`TmtError::SolverStagnation`]
/// is raised only when the residual stays above [`STAGNATION_FLOOR`].
pub fn cgnr(blocks: &[LsqBlock<'_>], rel_tol: f64, max_iter: usize) -> Result<CgnrSolution> {
    let ncols = blocks[0].mat.ncols;
    for b in blocks {
        assert_eq!(b.mat.ncols, ncols, "block column mismatch");
        assert_eq!(b.mat.nrows, b.rhs.len(), "rhs length mismatch");
    }
    let mut x = vec![0.0; ncols];
    // r_b = w_b (rhs_b - A_b x); with x = 0 that is w_b rhs_b.
    let mut res: Vec<Vec<f64>> = blocks
        .iter()
        .map(|b| b.rhs.iter().map(|v| v * b.weight).collect())
        .collect();
    // explicit transposes make the normal-equation product a parallel matvec
    let trans: Vec<Csr> = blocks.iter().map(|b| b.mat.transpose()).collect();
    // Jacobi column scaling (CG runs on A D^-1 with d_j = column 2-norm);
    // this evens out penalty blocks against data rows and costs one pass
    let mut d = vec![0.0f64; ncols];
    for (b, t) in blocks.iter().zip(trans.iter()) {
        let w2 = b.weight * b.weight;
        for (j, dj) in d.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in t.row_ptr[j]..t.row_ptr[j + 1] {
                acc += t.values[k] * t.values[k];
            }
            *dj += w2 * acc;
        }
    }
    for v in d.iter_mut() {
        *v = if *v > 0.0 { v.sqrt() } else { 1.0 };
    }
    // s = D^-1 sum_b w_b A_b^T r_b
    let normal = |res: &[Vec<f64>]| {
        let mut s = vec![0.0; ncols];
        let mut tmp = vec![0.0; ncols];
        for ((b, t), r) in blocks.iter().zip(trans.iter()).zip(res.iter()) {
            t.mul_vec(r, &mut tmp);
            for (si, ti) in s.iter_mut().zip(tmp.iter()) {
                *si += b.weight * ti;
            }
        }
        for (si, di) in s.iter_mut().zip(d.iter()) {
            *si /= di;
        }
        s
    };
    let mut s = normal(&res);
    let s0_norm = norm(&s);
    if s0_norm == 0.0 {
        return Ok(CgnrSolution {
            x,
            iterations: 0,
            rel_normal_residual: 0.0,
            block_residuals: res.iter().map(|r| norm(r)).collect(),
        });
    }
    let mut p = s.clone();
    let mut gamma = dot(&s, &s);
    let mut iters = 0;
    let mut rel = 1.0;
    for it in 0..max_iter {
        iters = it + 1;
        // q_b = w_b A_b D^-1 p
        let pd: Vec<f64> = p.iter().zip(d.iter()).map(|(pi, di)| pi / di).collect();
        let mut denom = 0.0;
        let qs: Vec<Vec<f64>> = blocks
            .iter()
            .map(|b| {
                let mut q = vec![0.0; b.mat.nrows];
                b.mat.mul_vec(&pd, &mut q);
                for qi in q.iter_mut() {
                    *qi *= b.weight;
                }
                denom += dot(&q, &q);
                q
            })
            .collect();
        if denom == 0.0 {
            break;
        }
        let alpha = gamma / denom;
        for (xi, pi) in x.iter_mut().zip(p.iter()) {
            *xi += alpha * pi;
        }
        for (r, q) in res.iter_mut().zip(qs.iter()) {
            for (ri, qi) in r.iter_mut().zip(q.iter()) {
                *ri -= alpha * qi;
            }
        }
        s = normal(&res);
        let gamma_new = dot(&s, &s);
        rel = gamma_new.sqrt() / s0_norm;
        if rel <= rel_tol {
            break;
        }
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        for (pi, si) in p.iter_mut().zip(s.iter()) {
            *pi = si + beta * *pi;
        }
    }
    if rel > STAGNATION_FLOOR {
        return Err(TmtError::SolverStagnation {
            achieved: rel,
            target: rel_tol,
            iters,
        });
    }
    // map the scaled iterate back to the original variables
    for (xi, di) in x.iter_mut().zip(d.iter()) {
        *xi /= di;
    }
    Ok(CgnrSolution {
        x,
        iterations: iters,
        rel_normal_residual: rel,
        block_residuals: res.iter().map(|r| norm(r)).collect(),
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_to_csr(rows: &[&[f64]]) -> Csr {
        let ncols = rows[0].len();
        Csr::from_rows(
            ncols,
            rows.iter()
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .filter(|(_, v)| **v != 0.0)
                        .map(|(c, v)| (c as u32, *v))
                        .collect()
                })
                .collect(),
        )
    }

    #[test]
    fn matvec_and_transpose() {
        let a = dense_to_csr(&[&[1.0, 2.0, 0.0], &[0.0, -1.0, 3.0]]);
        let mut y = vec![0.0; 2];
        a.mul_vec(&[1.0, 1.0, 1.0], &mut y);
        assert_eq!(y, vec![3.0, 2.0]);
        let mut z = vec![0.0; 3];
        a.mul_transpose_add(&[1.0, 2.0], &mut z);
        assert_eq!(z, vec![1.0, 0.0, 6.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = dense_to_csr(&[&[1.0, 0.0, 2.0], &[0.0, 3.0, 0.0]]);
        let at = a.transpose();
        assert_eq!(at.nrows, 3);
        assert_eq!(at.ncols, 2);
        let mut y = vec![0.0; 3];
        at.mul_vec(&[1.0, 1.0], &mut y);
        let mut z = vec![0.0; 3];
        a.mul_transpose_add(&[1.0, 1.0], &mut z);
        assert_eq!(y, z);
        let back = at.transpose();
        assert_eq!(back.row_ptr, a.row_ptr);
        assert_eq!(back.col_idx, a.col_idx);
        assert_eq!(back.values, a.values);
    }

    #[test]
    fn cgnr_solves_consistent_system() {
        let a = dense_to_csr(&[
            &[4.0, 1.0, 0.0],
            &[1.0, 3.0, 1.0],
            &[0.0, 1.0, 5.0],
            &[1.0, 0.0, 1.0],
        ]);
        let x_true = vec![1.0, -2.0, 0.5];
        let mut b = vec![0.0; 4];
        a.mul_vec(&x_true, &mut b);
        let sol = cgnr(
            &[LsqBlock {
                mat: &a,
                rhs: b,
                weight: 1.0,
            }],
            1e-12,
            100,
        )
        .unwrap();
        for (xi, ti) in sol.x.iter().zip(x_true.iter()) {
            assert!((xi - ti).abs() < 1e-9);
        }
    }

    #[test]
    fn cgnr_zero_rhs_returns_zero() {
        let a = dense_to_csr(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let sol = cgnr(
            &[LsqBlock {
                mat: &a,
                rhs: vec![0.0, 0.0],
                weight: 1.0,
            }],
            1e-10,
            10,
        )
        .unwrap();
        assert_eq!(sol.x, vec![0.0, 0.0]);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn cgnr_regularized_stack() {
        // min ||Ax-b||^2 + w^2||x||^2 has the closed form (A^T A + w^2 I)^-1 A^T b.
        let a = dense_to_csr(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let id = dense_to_csr(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let sol = cgnr(
            &[
                LsqBlock {
                    mat: &a,
                    rhs: vec![2.0, 4.0],
                    weight: 1.0,
                },
                LsqBlock {
                    mat: &id,
                    rhs: vec![0.0, 0.0],
                    weight: 1.0,
                },
            ],
            1e-12,
            50,
        )
        .unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-10);
        assert!((sol.x[1] - 2.0).abs() < 1e-10);
    }
}
