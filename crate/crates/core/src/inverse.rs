//! Linear-time inverse and log-determinant of a PSD MLR matrix.
//!
//! The inverse has the same hierarchical partition and rank allocation,
//! `Σ⁻¹ = D⁻¹ − H_1H_1ᵀ − … − H_{L-1}H_{L-1}ᵀ` with `supp(H_l) = supp(F_l)`.
//! It is built from the bottom level up with the Woodbury identity
//! `Σ_{l+}⁻¹ = Σ_{(l+1)+}⁻¹ − H_l H_lᵀ`, where
//! `H_l = Σ_{(l+1)+}⁻¹F_l (I + F_lᵀΣ_{(l+1)+}⁻¹F_l)^{-1/2}`.
//!
//! The only recursion state is `Σ_{(l+1)+}⁻¹F_{l−}`, which has the sparsity
//! of `F_{l−}` and is therefore stored in the same compressed `n × Σ r`
//! layout as the factors. Per level and block the five steps are
//!
//! 1. `M₁ = M₀ᵀF_{(l−1)−}`,
//! 2. `M₂ = (I + F_lᵀM₀)⁻¹` and `H_l = M₀(I + F_lᵀM₀)^{-1/2}` from one
//!    symmetric eigendecomposition `QΛQᵀ`,
//! 3. `M₃ = M₂M₁`,
//! 4. `M₄ = M₀M₃`,
//! 5. `Σ_{l+}⁻¹F_{(l−1)−} = Σ_{(l+1)+}⁻¹F_{(l−1)−} − M₄`,
//!
//! with `M₀` the level-`l` columns of the state. `log det Σ` is
//! `Σ log d_i + Σ_l log det Λ_l`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, MlrError, Result};
use crate::linalg::{spectral_map, sym_eigen};
use crate::mlr::{lowrank_accumulate, PsdMlr};
use crate::partition::{HierarchicalPartition, RankAllocation};

/// Eigenvalues of `I + F_lᵀΣ_{(l+1)+}⁻¹F_l` below `1 - EIGEN_FLOOR_TOL` are
/// reported as a numerical failure.
pub const EIGEN_FLOOR_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct InverseMlr {
    partition: Arc<HierarchicalPartition>,
    ranks: RankAllocation,
    h: Vec<DMatrix<f64>>,
    dinv: DVector<f64>,
    logdet: f64,
    level_eigs: Vec<DVector<f64>>,
}

/// Scalar counts of the storage used by one inversion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkspaceStats {
    /// Peak number of live scalars in the recursion state, outputs and `M_i` terms.
    pub peak_scalars: usize,
    /// Largest eigensolver workspace, counted apart from the bound.
    pub eigen_scalars: usize,
}

#[derive(Default)]
struct Tracker {
    live: usize,
    stats: WorkspaceStats,
}

impl Tracker {
    fn alloc(&mut self, scalars: usize) {
        self.live += scalars;
        self.stats.peak_scalars = self.stats.peak_scalars.max(self.live);
    }

    fn free(&mut self, scalars: usize) {
        self.live -= scalars;
    }
}

/// Per-level intermediates kept for the expanded Cholesky factorization.
#[derive(Debug, Clone)]
pub(crate) struct LevelRecord {
    /// `I + F_{l,k}ᵀ M₀` per block (symmetrized).
    pub(crate) gram: Vec<DMatrix<f64>>,
    /// `M₃` per block, `r_l × Σ_{l'<l} r_{l'}`.
    pub(crate) m3: Vec<DMatrix<f64>>,
}

/// Runs the bottom-up recursion. When `keep` is set, per-level records are
/// returned for the expanded Cholesky factorization.
pub(crate) fn recurse(
    m: &PsdMlr,
    keep: bool,
) -> Result<(InverseMlr, Option<Vec<LevelRecord>>, WorkspaceStats)> {
    let partition = m.partition();
    let ranks = m.ranks();
    let n = m.n();
    let levels = partition.num_factor_levels();
    let width = ranks.factor_width();
    let mut tracker = Tracker::default();

    let dinv = m.d().map(|v| 1.0 / v);
    let mut logdet: f64 = m.d().iter().map(|v| v.ln()).sum();

    // Σ_{L+}⁻¹ F = D⁻¹F in compressed layout.
    let mut state = DMatrix::zeros(n, width);
    for l in 0..levels {
        let f = m.factors(l);
        let mut cols = state.columns_mut(ranks.column_offset(l), ranks.rank(l));
        for (i, mut row) in cols.row_iter_mut().enumerate() {
            row.copy_from(&(f.row(i) * dinv[i]));
        }
    }
    tracker.alloc(n * width);

    let mut h: Vec<DMatrix<f64>> = (0..levels)
        .map(|l| DMatrix::zeros(n, ranks.rank(l)))
        .collect();
    let mut level_eigs: Vec<DVector<f64>> = (0..levels)
        .map(|l| DVector::zeros(partition.num_blocks(l) * ranks.rank(l)))
        .collect();
    let mut records: Vec<LevelRecord> = Vec::new();

    for l in (0..levels).rev() {
        let r = ranks.rank(l);
        let p = partition.num_blocks(l);
        let cum = ranks.column_offset(l);
        if r == 0 {
            if keep {
                records.push(LevelRecord {
                    gram: vec![DMatrix::zeros(0, 0); p],
                    m3: vec![DMatrix::zeros(0, cum); p],
                });
            }
            continue;
        }
        let f = m.factors(l);
        tracker.alloc(n * r);
        // M₁, M₂, M₃ are held for the whole level.
        let level_terms = p * (2 * r * cum + r * r);
        tracker.alloc(level_terms);
        tracker.stats.eigen_scalars = tracker.stats.eigen_scalars.max(3 * r * r);

        let mut gram_blocks = Vec::with_capacity(if keep { p } else { 0 });
        let mut m3_blocks = Vec::with_capacity(if keep { p } else { 0 });

        for k in 0..p {
            let range = partition.block_range(l, k);
            let (start, len) = (range.start, range.len());
            let m0 = state.view((start, cum), (len, r)).clone_owned();
            let fk = f.rows(start, len);

            let mut gram = fk.transpose() * &m0;
            for i in 0..r {
                gram[(i, i)] += 1.0;
            }
            gram = (&gram + gram.transpose()) * 0.5;
            let (lambda, q) = sym_eigen(&gram);
            let min = lambda.min();
            if !(min >= 1.0 - EIGEN_FLOOR_TOL) {
                return Err(MlrError::Numerical(format!(
                    "level {l} block {k}: eigenvalue {min:e} of I + FᵀΣ⁻¹F is below 1"
                )));
            }
            logdet += lambda.iter().map(|v| v.ln()).sum::<f64>();
            level_eigs[l].rows_mut(k * r, r).copy_from(&lambda);

            let inv_sqrt = spectral_map(&lambda, &q, |v| 1.0 / v.sqrt());
            h[l].rows_mut(start, len).copy_from(&(&m0 * inv_sqrt));

            if cum > 0 {
                let fprev = m.factor_prefix_rows(start, len, cum);
                let m1 = m0.transpose() * fprev;
                let m2 = spectral_map(&lambda, &q, |v| 1.0 / v);
                let m3 = m2 * m1;
                tracker.alloc(len * cum);
                let m4 = &m0 * &m3;
                let mut target = state.view_mut((start, 0), (len, cum));
                target -= m4;
                tracker.free(len * cum);
                if keep {
                    m3_blocks.push(m3);
                }
            } else if keep {
                m3_blocks.push(DMatrix::zeros(r, 0));
            }
            if keep {
                gram_blocks.push(gram);
            }
        }
        tracker.free(level_terms);
        if keep {
            records.push(LevelRecord {
                gram: gram_blocks,
                m3: m3_blocks,
            });
        }
    }
    if keep {
        records.reverse();
    }

    let inverse = InverseMlr {
        partition: m.partition_arc().clone(),
        ranks: ranks.clone(),
        h,
        dinv,
        logdet,
        level_eigs,
    };
    Ok((inverse, keep.then_some(records), tracker.stats))
}

/// Inverts `Σ` in `O(n r² + p_{L−1} r_max r²)`.
pub fn invert(m: &PsdMlr) -> Result<InverseMlr> {
    Ok(recurse(m, false)?.0)
}

/// [`invert`] together with storage counts.
pub fn invert_with_stats(m: &PsdMlr) -> Result<(InverseMlr, WorkspaceStats)> {
    let (inv, _, stats) = recurse(m, false)?;
    Ok((inv, stats))
}

impl PsdMlr {
    /// Rows `start..start+len` of the first `cols` compressed factor columns.
    pub(crate) fn factor_prefix_rows(&self, start: usize, len: usize, cols: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(len, cols);
        let mut c = 0;
        for f in self.factor_levels() {
            if c >= cols {
                break;
            }
            let w = f.ncols().min(cols - c);
            out.columns_mut(c, w)
                .copy_from(&f.view((start, 0), (len, w)));
            c += w;
        }
        out
    }
}

impl InverseMlr {
    pub fn partition(&self) -> &HierarchicalPartition {
        &self.partition
    }

    pub fn partition_arc(&self) -> &Arc<HierarchicalPartition> {
        &self.partition
    }

    pub fn ranks(&self) -> &RankAllocation {
        &self.ranks
    }

    pub fn n(&self) -> usize {
        self.partition.n()
    }

    /// Stacked `n × r_l` inverse factor `H̄^l`.
    pub fn h(&self, level: usize) -> &DMatrix<f64> {
        &self.h[level]
    }

    pub fn h_levels(&self) -> &[DMatrix<f64>] {
        &self.h
    }

    pub fn h_levels_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.h
    }

    pub fn dinv(&self) -> &DVector<f64> {
        &self.dinv
    }

    /// `log det Σ`, accumulated as a sum of logarithms.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Eigenvalues `Λ_l` of `I + F_lᵀΣ_{(l+1)+}⁻¹F_l`, block `k` at
    /// positions `k r_l .. (k+1) r_l`.
    pub fn level_eigs(&self, level: usize) -> &DVector<f64> {
        &self.level_eigs[level]
    }

    /// `Σ⁻¹X` in `O(n r m)`.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("matrix rows", self.n(), x.nrows())?;
        let mut out = x.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row *= self.dinv[i];
        }
        lowrank_accumulate(&self.partition, &self.h, &self.h, x, &mut out, -1.0);
        Ok(out)
    }

    /// Applies the diagonal blocks of `Σ⁻¹` at `level` to a stacked
    /// block-diagonal `x`: rows of block `k` receive `(Σ⁻¹)_{kk} x_k`.
    /// Linear in `n`, unlike forming `Σ⁻¹` times the block-diagonal matrix.
    pub fn apply_within_blocks(&self, level: usize, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("matrix rows", self.n(), x.nrows())?;
        let mut out = x.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row *= self.dinv[i];
        }
        if x.ncols() == 0 {
            return Ok(out);
        }
        for (l, h) in self.h.iter().enumerate() {
            if h.ncols() == 0 {
                continue;
            }
            // The finer of the two levels fixes the blocks on which the
            // truncated product is block diagonal.
            let fine = l.max(level);
            for b in 0..self.partition.num_blocks(fine) {
                let range = self.partition.block_range(fine, b);
                let hb = h.rows(range.start, range.len());
                let coeff = hb.transpose() * x.rows(range.start, range.len());
                let mut target = out.rows_mut(range.start, range.len());
                target -= hb * coeff;
            }
        }
        Ok(out)
    }

    pub fn apply_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("vector length", self.n(), x.len())?;
        let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        Ok(self.apply(&xm)?.column(0).into_owned())
    }

    /// `diag(Σ⁻¹)`.
    pub fn diag_inverse(&self) -> DVector<f64> {
        let mut out = self.dinv.clone();
        for h in &self.h {
            for (i, row) in h.row_iter().enumerate() {
                out[i] -= row.norm_squared();
            }
        }
        out
    }

    /// Dense `Σ⁻¹`; refuses when `n > cap`.
    pub fn to_dense(&self, cap: usize) -> Result<DMatrix<f64>> {
        let n = self.n();
        if n > cap {
            return Err(MlrError::DenseCapExceeded { n, cap });
        }
        let mut out = DMatrix::from_diagonal(&self.dinv);
        for (l, h) in self.h.iter().enumerate() {
            for k in 0..self.partition.num_blocks(l) {
                let range = self.partition.block_range(l, k);
                let block = h.rows(range.start, range.len());
                let gram = block * block.transpose();
                let mut view = out.view_mut((range.start, range.start), (range.len(), range.len()));
                view -= gram;
            }
        }
        Ok(out)
    }

    /// Dense `n × s` matrix `H = [H_1 … H_{L-1}]` in the column layout of `F`.
    pub fn dense_factor(&self, cap: usize) -> Result<DMatrix<f64>> {
        let n = self.n();
        if n > cap {
            return Err(MlrError::DenseCapExceeded { n, cap });
        }
        let s = self.ranks.num_factors(&self.partition);
        let mut out = DMatrix::zeros(n, s);
        for (l, h) in self.h.iter().enumerate() {
            let r = self.ranks.rank(l);
            let base = self.ranks.factor_offset(&self.partition, l);
            for k in 0..self.partition.num_blocks(l) {
                let range = self.partition.block_range(l, k);
                out.view_mut((range.start, base + k * r), (range.len(), r))
                    .copy_from(&h.rows(range.start, range.len()));
            }
        }
        Ok(out)
    }

    /// Stacked `[H̄^1 … H̄^{L-1}]`.
    pub fn compressed_h(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n(), self.ranks.factor_width());
        for (l, h) in self.h.iter().enumerate() {
            out.columns_mut(self.ranks.column_offset(l), h.ncols())
                .copy_from(h);
        }
        out
    }
}
