//! Dense reference implementations shared by the integration tests.
//!
//! Everything here works on explicit `n × n` and `n × s` matrices and is
//! written independently of the structured code paths it checks.

#![allow(dead_code)]

use std::f64::consts::PI;
use std::sync::Arc;

use mlrfit::synth::{random_hierarchy, random_model};
use mlrfit::{HierarchicalPartition, PsdMlr, RankAllocation};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CAP: usize = 5000;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random hierarchy with uneven blocks and a random model on it.
pub fn random_psd(seed: u64, n: usize, levels: usize, factor_ranks: &[usize]) -> PsdMlr {
    let mut r = rng(seed);
    let p = Arc::new(random_hierarchy(n, levels, &mut r));
    random_model(p, RankAllocation::from_factor_ranks(factor_ranks), &mut r)
}

/// Random model with size, depth and ranks drawn from the given ranges.
pub fn random_case(seed: u64, n_range: (usize, usize), level_range: (usize, usize), max_rank: usize) -> PsdMlr {
    let mut r = rng(seed ^ 0x5eed);
    let n = r.random_range(n_range.0..=n_range.1);
    let levels = r.random_range(level_range.0..=level_range.1);
    let ranks: Vec<usize> = (0..levels - 1).map(|_| r.random_range(1..=max_rank)).collect();
    random_psd(seed, n, levels, &ranks)
}

pub fn rel_err(got: &DMatrix<f64>, expected: &DMatrix<f64>) -> f64 {
    (got - expected).norm() / expected.norm().max(f64::MIN_POSITIVE)
}

pub fn rel_err_vec(got: &DVector<f64>, expected: &DVector<f64>) -> f64 {
    (got - expected).norm() / expected.norm().max(f64::MIN_POSITIVE)
}

/// Inverse and log-determinant through a dense Cholesky factorization.
pub fn dense_inverse_logdet(sigma: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let chol = sigma.clone().cholesky().expect("dense covariance is positive definite");
    let logdet = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    (chol.inverse(), logdet)
}

/// Log |det A| and sign from an LU factorization, for indefinite matrices.
pub fn slogdet(a: &DMatrix<f64>) -> (f64, f64) {
    let lu = a.clone().lu();
    let u = lu.u();
    let mut sign = if lu.p().determinant::<f64>() < 0.0 { -1.0 } else { 1.0 };
    let mut log = 0.0;
    for v in u.diagonal().iter() {
        if *v < 0.0 {
            sign = -sign;
        }
        log += v.abs().ln();
    }
    (sign, log)
}

/// Dense Gaussian log-likelihood of the rows of `y` (mean zero).
pub fn dense_loglik(sigma: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let (inv, logdet) = dense_inverse_logdet(sigma);
    let n = sigma.nrows() as f64;
    let samples = y.nrows() as f64;
    let quad = (y * &inv).component_mul(y).sum();
    -0.5 * n * samples * (2.0 * PI).ln() - 0.5 * samples * logdet - 0.5 * quad
}

/// Columns of the dense `n × s` factor matrix each row may occupy.
pub fn allowed_columns(partition: &HierarchicalPartition, ranks: &RankAllocation) -> Vec<Vec<usize>> {
    let n = partition.n();
    let mut out = vec![Vec::new(); n];
    for l in 0..partition.num_factor_levels() {
        let r = ranks.rank(l);
        let base = ranks.factor_offset(partition, l);
        for k in 0..partition.num_blocks(l) {
            for row in partition.block_range(l, k) {
                out[row].extend(base + k * r..base + (k + 1) * r);
            }
        }
    }
    out
}

/// Dense E-step matrices: `V = F0ᵀΣ0⁻¹YᵀY` (`s × n`) and
/// `W = N(I − F0ᵀΣ0⁻¹F0) + F0ᵀΣ0⁻¹YᵀYΣ0⁻¹F0` (`s × s`).
pub fn dense_vw(f0: &DMatrix<f64>, d0: &DVector<f64>, y: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let sigma = f0 * f0.transpose() + DMatrix::from_diagonal(d0);
    let (inv, _) = dense_inverse_logdet(&sigma);
    let yty = y.transpose() * y;
    let a = f0.transpose() * &inv;
    let samples = y.nrows() as f64;
    let s = f0.ncols();
    let v = &a * &yty;
    let w = (DMatrix::identity(s, s) - &a * f0) * samples + &v * a.transpose();
    (v, w)
}

/// Expected complete-data log-likelihood `Q(F, D; F0, D0)`.
pub fn q_value(
    f: &DMatrix<f64>,
    d: &DVector<f64>,
    v: &DMatrix<f64>,
    w: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> f64 {
    let n = f.nrows();
    let samples = y.nrows() as f64;
    let fv = f * v;
    let fwf = f * w * f.transpose();
    let mut total = -0.5 * samples * n as f64 * (2.0 * PI).ln();
    for j in 0..n {
        let yy = y.column(j).norm_squared();
        total -= 0.5 * samples * d[j].ln();
        total -= 0.5 * (yy - 2.0 * fv[(j, j)] + fwf[(j, j)]) / d[j];
    }
    total
}

/// Gradient of `Q` with respect to `F`, zeroed outside the allowed support.
pub fn q_gradient(
    f: &DMatrix<f64>,
    d: &DVector<f64>,
    v: &DMatrix<f64>,
    w: &DMatrix<f64>,
    allowed: &[Vec<usize>],
) -> DMatrix<f64> {
    let full = v.transpose() - f * w;
    let mut out = DMatrix::zeros(f.nrows(), f.ncols());
    for (j, cols) in allowed.iter().enumerate() {
        for &c in cols {
            out[(j, c)] = full[(j, c)] / d[j];
        }
    }
    out
}

/// One naive dense EM step: every row solves its own normal equations
/// `W_cc f = V_cj` over its allowed columns.
pub fn dense_em_step(
    f0: &DMatrix<f64>,
    d0: &DVector<f64>,
    y: &DMatrix<f64>,
    allowed: &[Vec<usize>],
    floor: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let (v, w) = dense_vw(f0, d0, y);
    let n = f0.nrows();
    let samples = y.nrows() as f64;
    let mut f1 = DMatrix::zeros(n, f0.ncols());
    for (j, cols) in allowed.iter().enumerate() {
        if cols.is_empty() {
            continue;
        }
        let wc = w.select_rows(cols).select_columns(cols);
        let vc = DVector::from_iterator(cols.len(), cols.iter().map(|&c| v[(c, j)]));
        let sol = wc.lu().solve(&vc).expect("reduced W is nonsingular");
        for (i, &c) in cols.iter().enumerate() {
            f1[(j, c)] = sol[i];
        }
    }
    let fv = &f1 * &v;
    let fwf = &f1 * &w * f1.transpose();
    let d1 = DVector::from_fn(n, |j, _| {
        let value = (y.column(j).norm_squared() - 2.0 * fv[(j, j)] + fwf[(j, j)]) / samples;
        value.max(floor)
    });
    (f1, d1)
}

/// One dense EM step with covariates: each row regresses on `[X, E z]`
/// with the second-moment correction on the factor block.
pub fn dense_covariate_step(
    f0: &DMatrix<f64>,
    d0: &DVector<f64>,
    b0: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    allowed: &[Vec<usize>],
    floor: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let n = f0.nrows();
    let p = x.ncols();
    let samples = y.nrows() as f64;
    let sigma = f0 * f0.transpose() + DMatrix::from_diagonal(d0);
    let (inv, _) = dense_inverse_logdet(&sigma);
    let resid = y - x * b0.transpose();
    let z = &resid * &inv * f0; // N × s posterior means
    let g = f0.transpose() * &inv * f0;
    let s = f0.ncols();
    let mut f1 = DMatrix::zeros(n, s);
    let mut b1 = DMatrix::zeros(n, p);
    let mut d1 = DVector::zeros(n);
    for (j, cols) in allowed.iter().enumerate() {
        let q = p + cols.len();
        let zc = z.select_columns(cols);
        let mut m = DMatrix::zeros(q, q);
        m.view_mut((0, 0), (p, p)).copy_from(&(x.transpose() * x));
        let xz = x.transpose() * &zc;
        m.view_mut((0, p), (p, cols.len())).copy_from(&xz);
        m.view_mut((p, 0), (cols.len(), p)).copy_from(&xz.transpose());
        let gc = g.select_rows(cols).select_columns(cols);
        let wc = (DMatrix::identity(cols.len(), cols.len()) - gc) * samples + zc.transpose() * &zc;
        m.view_mut((p, p), (cols.len(), cols.len())).copy_from(&wc);
        let yj = y.column(j);
        let mut u = DVector::zeros(q);
        u.rows_mut(0, p).copy_from(&(x.transpose() * yj));
        u.rows_mut(p, cols.len()).copy_from(&(zc.transpose() * yj));
        let sol = m.clone().lu().solve(&u).expect("augmented moment matrix is nonsingular");
        for c in 0..p {
            b1[(j, c)] = sol[c];
        }
        for (i, &c) in cols.iter().enumerate() {
            f1[(j, c)] = sol[p + i];
        }
        let value = (yj.norm_squared() - 2.0 * sol.dot(&u) + (sol.transpose() * &m * &sol)[(0, 0)]) / samples;
        d1[j] = value.max(floor);
    }
    (b1, f1, d1)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}
