//! PSD multilevel low rank matrices `Σ = F_1F_1ᵀ + … + F_{L-1}F_{L-1}ᵀ + D`.
//!
//! Factors are held per level as the vertically stacked `n × r_l` matrix
//! `F̄^l`; the factor of block `k` is the row range of that block, so every
//! per-block operation works on a contiguous view and the block-diagonal
//! `F_l` is never formed.

use std::sync::Arc;

use nalgebra::{DMatrix, DMatrixView, DVector};

use crate::error::{check_dim, MlrError, Result};
use crate::linalg::rel_frobenius;
use crate::partition::{HierarchicalPartition, RankAllocation};

/// Largest `n` for which dense oracles will materialize an `n × n` matrix.
pub const DEFAULT_DENSE_CAP: usize = 5000;

#[derive(Debug, Clone, PartialEq)]
pub struct PsdMlr {
    partition: Arc<HierarchicalPartition>,
    ranks: RankAllocation,
    factors: Vec<DMatrix<f64>>,
    d: DVector<f64>,
}

/// `F̄ = [F̄^1 … F̄^{L-1}]` together with `diag(D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedForm {
    pub fbar: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl PsdMlr {
    /// `factors[l]` is `F̄^l`, of shape `n × r_l`.
    pub fn new(
        partition: Arc<HierarchicalPartition>,
        ranks: RankAllocation,
        factors: Vec<DMatrix<f64>>,
        d: DVector<f64>,
    ) -> Result<Self> {
        ranks.check_partition(&partition)?;
        let n = partition.n();
        check_dim(
            "factor level count",
            partition.num_factor_levels(),
            factors.len(),
        )?;
        for (l, f) in factors.iter().enumerate() {
            check_dim("factor rows", n, f.nrows())?;
            if f.ncols() != ranks.rank(l) {
                return Err(MlrError::Structural(format!(
                    "level {l} factor has {} columns but rank {}",
                    f.ncols(),
                    ranks.rank(l)
                )));
            }
        }
        check_dim("diagonal length", n, d.len())?;
        if let Some((index, &value)) = d.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(MlrError::NonPositive {
                what: "diagonal entry",
                index,
                value,
            });
        }
        Ok(Self {
            partition,
            ranks,
            factors,
            d,
        })
    }

    /// Builds from per-block factors `blocks[l][k]` of shape `n_{l,k} × r_l`.
    pub fn from_blocks(
        partition: Arc<HierarchicalPartition>,
        ranks: RankAllocation,
        blocks: &[Vec<DMatrix<f64>>],
        d: DVector<f64>,
    ) -> Result<Self> {
        ranks.check_partition(&partition)?;
        check_dim(
            "factor level count",
            partition.num_factor_levels(),
            blocks.len(),
        )?;
        let n = partition.n();
        let mut factors = Vec::with_capacity(blocks.len());
        for (l, level) in blocks.iter().enumerate() {
            check_dim("block count", partition.num_blocks(l), level.len())?;
            let r = ranks.rank(l);
            let mut f = DMatrix::zeros(n, r);
            for (k, block) in level.iter().enumerate() {
                if block.nrows() != partition.block_len(l, k) || block.ncols() != r {
                    return Err(MlrError::Structural(format!(
                        "factor block ({l}, {k}) has shape {}x{}, expected {}x{r}",
                        block.nrows(),
                        block.ncols(),
                        partition.block_len(l, k)
                    )));
                }
                f.rows_mut(partition.block_start(l, k), block.nrows())
                    .copy_from(block);
            }
            factors.push(f);
        }
        Self::new(partition, ranks, factors, d)
    }

    /// `Σ = diag(d)`, with zero factors of the given ranks.
    pub fn diagonal(
        partition: Arc<HierarchicalPartition>,
        ranks: RankAllocation,
        d: DVector<f64>,
    ) -> Result<Self> {
        let n = partition.n();
        let factors = (0..partition.num_factor_levels())
            .map(|l| DMatrix::zeros(n, ranks.rank(l)))
            .collect();
        Self::new(partition, ranks, factors, d)
    }

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

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    /// `F̄^l` for factor level `level`.
    pub fn factors(&self, level: usize) -> &DMatrix<f64> {
        &self.factors[level]
    }

    pub fn factor_levels(&self) -> &[DMatrix<f64>] {
        &self.factors
    }

    /// `F_{l,k}`.
    pub fn factor_block(&self, level: usize, block: usize) -> DMatrixView<'_, f64> {
        self.factors[level].rows(
            self.partition.block_start(level, block),
            self.partition.block_len(level, block),
        )
    }

    /// `Σx`.
    pub fn matvec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("vector length", self.n(), x.len())?;
        let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        Ok(self.apply(&xm)?.column(0).into_owned())
    }

    /// `ΣX` for an `n × m` matrix, in `O(n r m)`.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("matrix rows", self.n(), x.nrows())?;
        let mut out = x.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row *= self.d[i];
        }
        lowrank_accumulate(
            &self.partition,
            &self.factors,
            &self.factors,
            x,
            &mut out,
            1.0,
        );
        Ok(out)
    }

    /// `diag(Σ)`.
    pub fn diag_sigma(&self) -> DVector<f64> {
        let mut out = self.d.clone();
        for f in &self.factors {
            for (i, row) in f.row_iter().enumerate() {
                out[i] += row.norm_squared();
            }
        }
        out
    }

    /// Dense `Σ`; refuses when `n > cap`.
    pub fn to_dense(&self, cap: usize) -> Result<DMatrix<f64>> {
        let n = self.n();
        if n > cap {
            return Err(MlrError::DenseCapExceeded { n, cap });
        }
        let mut out = DMatrix::from_diagonal(&self.d);
        for (l, f) in self.factors.iter().enumerate() {
            for k in 0..self.partition.num_blocks(l) {
                let range = self.partition.block_range(l, k);
                let block = f.rows(range.start, range.len());
                let gram = block * block.transpose();
                let mut view = out.view_mut((range.start, range.start), (range.len(), range.len()));
                view += gram;
            }
        }
        Ok(out)
    }

    /// Dense `n × s` factor matrix `F = [F_1 … F_{L-1}]`.
    pub fn dense_factor(&self, cap: usize) -> Result<DMatrix<f64>> {
        let n = self.n();
        if n > cap {
            return Err(MlrError::DenseCapExceeded { n, cap });
        }
        let s = self.ranks.num_factors(&self.partition);
        let mut out = DMatrix::zeros(n, s);
        for (l, f) in self.factors.iter().enumerate() {
            let r = self.ranks.rank(l);
            let base = self.ranks.factor_offset(&self.partition, l);
            for k in 0..self.partition.num_blocks(l) {
                let range = self.partition.block_range(l, k);
                out.view_mut((range.start, base + k * r), (range.len(), r))
                    .copy_from(&f.rows(range.start, range.len()));
            }
        }
        Ok(out)
    }

    pub fn pack_compressed(&self) -> CompressedForm {
        let n = self.n();
        let width = self.ranks.factor_width();
        let mut fbar = DMatrix::zeros(n, width);
        for (l, f) in self.factors.iter().enumerate() {
            fbar.columns_mut(self.ranks.column_offset(l), f.ncols())
                .copy_from(f);
        }
        CompressedForm {
            fbar,
            d: self.d.clone(),
        }
    }

    pub fn unpack_compressed(
        partition: Arc<HierarchicalPartition>,
        ranks: RankAllocation,
        compressed: &CompressedForm,
    ) -> Result<Self> {
        ranks.check_partition(&partition)?;
        check_dim("compressed rows", partition.n(), compressed.fbar.nrows())?;
        check_dim(
            "compressed width",
            ranks.factor_width(),
            compressed.fbar.ncols(),
        )?;
        let factors = (0..partition.num_factor_levels())
            .map(|l| {
                compressed
                    .fbar
                    .columns(ranks.column_offset(l), ranks.rank(l))
                    .into_owned()
            })
            .collect();
        Self::new(partition, ranks, factors, compressed.d.clone())
    }

    /// `‖Σ − S‖_F / ‖S‖_F`.
    pub fn frobenius_error(&self, s: &DMatrix<f64>, cap: usize) -> Result<f64> {
        check_dim("matrix rows", self.n(), s.nrows())?;
        check_dim("matrix columns", self.n(), s.ncols())?;
        let dense = self.to_dense(cap)?;
        Ok(rel_frobenius(&dense, s))
    }
}

/// `out += sign · Σ_l Σ_k B_{l,k} (C_{l,k}ᵀ X_k)` over the factor levels of
/// `partition`, where `left[l]` and `right[l]` are stacked `n × r_l` factors.
pub(crate) fn lowrank_accumulate(
    partition: &HierarchicalPartition,
    left: &[DMatrix<f64>],
    right: &[DMatrix<f64>],
    x: &DMatrix<f64>,
    out: &mut DMatrix<f64>,
    sign: f64,
) {
    for (l, (b, c)) in left.iter().zip(right).enumerate() {
        if b.ncols() == 0 {
            continue;
        }
        for k in 0..partition.num_blocks(l) {
            let range = partition.block_range(l, k);
            let xk = x.rows(range.start, range.len());
            let coeff = c.rows(range.start, range.len()).transpose() * xk;
            let contrib = b.rows(range.start, range.len()) * coeff;
            let mut target = out.rows_mut(range.start, range.len());
            target += contrib * sign;
        }
    }
}
