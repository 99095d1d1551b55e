//! General (non-symmetric) MLR matrices and their products.
//!
//! A general MLR matrix is `A = Σ_l A_l` with `A_l = blkdiag(B_{l,k}C_{l,k}ᵀ)`
//! over the blocks of level `l`, including the singleton level. The product
//! of two such matrices on the same partition is again MLR with per-level
//! widths `r_l + r'_l`, because
//! `A A' = Σ_l (A_l A'_{l+} + A_{(l+1)+} A'_l)` and both terms are block
//! diagonal at level `l`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, MlrError, Result};
use crate::inverse::InverseMlr;
use crate::mlr::PsdMlr;
use crate::partition::HierarchicalPartition;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralMlr {
    partition: Arc<HierarchicalPartition>,
    /// Stacked `n × w_l` left factors, one per level (singleton level last).
    left: Vec<DMatrix<f64>>,
    right: Vec<DMatrix<f64>>,
}

impl GeneralMlr {
    pub fn new(
        partition: Arc<HierarchicalPartition>,
        left: Vec<DMatrix<f64>>,
        right: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = partition.n();
        check_dim("left factor levels", partition.num_levels(), left.len())?;
        check_dim("right factor levels", partition.num_levels(), right.len())?;
        for (b, c) in left.iter().zip(&right) {
            check_dim("left factor rows", n, b.nrows())?;
            check_dim("right factor rows", n, c.nrows())?;
            check_dim("right factor width", b.ncols(), c.ncols())?;
        }
        Ok(Self {
            partition,
            left,
            right,
        })
    }

    /// Embeds `Σ` with `B_l = C_l = F_l` and `B_L = d`, `C_L = 1`.
    pub fn from_psd(m: &PsdMlr) -> Self {
        let n = m.n();
        let mut left: Vec<DMatrix<f64>> = m.factor_levels().to_vec();
        let mut right = left.clone();
        left.push(DMatrix::from_column_slice(n, 1, m.d().as_slice()));
        right.push(DMatrix::from_element(n, 1, 1.0));
        Self {
            partition: m.partition_arc().clone(),
            left,
            right,
        }
    }

    /// Embeds `Σ⁻¹` with `B_l = −H_l`, `C_l = H_l` and `B_L = d⁻¹`, `C_L = 1`.
    pub fn from_inverse(inv: &InverseMlr) -> Self {
        let n = inv.n();
        let mut left: Vec<DMatrix<f64>> = inv.h_levels().iter().map(|h| -h).collect();
        let mut right: Vec<DMatrix<f64>> = inv.h_levels().to_vec();
        left.push(DMatrix::from_column_slice(n, 1, inv.dinv().as_slice()));
        right.push(DMatrix::from_element(n, 1, 1.0));
        Self {
            partition: inv.partition_arc().clone(),
            left,
            right,
        }
    }

    pub fn partition(&self) -> &HierarchicalPartition {
        &self.partition
    }

    pub fn n(&self) -> usize {
        self.partition.n()
    }

    /// Factor width of every level.
    pub fn widths(&self) -> Vec<usize> {
        self.left.iter().map(|b| b.ncols()).collect()
    }

    /// MLR-rank `Σ_l w_l`.
    pub fn mlr_rank(&self) -> usize {
        self.widths().iter().sum()
    }

    pub fn left(&self, level: usize) -> &DMatrix<f64> {
        &self.left[level]
    }

    pub fn right(&self, level: usize) -> &DMatrix<f64> {
        &self.right[level]
    }

    pub fn left_mut(&mut self, level: usize) -> &mut DMatrix<f64> {
        &mut self.left[level]
    }

    /// `AX`.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("matrix rows", self.n(), x.nrows())?;
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        accumulate(&self.partition, &self.left, &self.right, 0, x, &mut out);
        Ok(out)
    }

    pub fn matvec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        Ok(self.apply(&xm)?.column(0).into_owned())
    }

    /// Dense form of a single level `A_l`.
    pub fn level_dense(&self, level: usize, cap: usize) -> Result<DMatrix<f64>> {
        let n = self.n();
        if n > cap {
            return Err(MlrError::DenseCapExceeded { n, cap });
        }
        let mut out = DMatrix::zeros(n, n);
        let (b, c) = (&self.left[level], &self.right[level]);
        for k in 0..self.partition.num_blocks(level) {
            let range = self.partition.block_range(level, k);
            let block =
                b.rows(range.start, range.len()) * c.rows(range.start, range.len()).transpose();
            out.view_mut((range.start, range.start), (range.len(), range.len()))
                .copy_from(&block);
        }
        Ok(out)
    }

    pub fn to_dense(&self, cap: usize) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.n(), self.n());
        for l in 0..self.left.len() {
            out += self.level_dense(l, cap)?;
        }
        Ok(out)
    }
}

/// `out += Σ_{l ≥ from} A_l X` with `A_l = blkdiag(B_{l,k}C_{l,k}ᵀ)`.
fn accumulate(
    partition: &HierarchicalPartition,
    left: &[DMatrix<f64>],
    right: &[DMatrix<f64>],
    from: usize,
    x: &DMatrix<f64>,
    out: &mut DMatrix<f64>,
) {
    for l in from..left.len() {
        let (b, c) = (&left[l], &right[l]);
        if b.ncols() == 0 {
            continue;
        }
        for k in 0..partition.num_blocks(l) {
            let range = partition.block_range(l, k);
            let coeff =
                c.rows(range.start, range.len()).transpose() * x.rows(range.start, range.len());
            let mut target = out.rows_mut(range.start, range.len());
            target += b.rows(range.start, range.len()) * coeff;
        }
    }
}

/// Product `AA'` as an MLR matrix with widths `w_l + w'_l`.
///
/// Level `l` of the result has left factor `[B_l | B̄_l]` and right factor
/// `[C̄_l | C'_l]`, where `C̄_l = A'_{l+}ᵀ C_l` and `B̄_l = A_{(l+1)+} B'_l`.
pub fn multiply(a: &GeneralMlr, b: &GeneralMlr) -> Result<GeneralMlr> {
    if !a.partition.same_structure(&b.partition) {
        return Err(MlrError::PartitionMismatch {
            left: a.n(),
            right: b.n(),
        });
    }
    let levels = a.left.len();
    let n = a.n();
    let mut left = Vec::with_capacity(levels);
    let mut right = Vec::with_capacity(levels);
    let b_transposed_left = &b.right;
    let b_transposed_right = &b.left;
    for l in 0..levels {
        let (wa, wb) = (a.left[l].ncols(), b.left[l].ncols());
        // C̄_l = (Σ_{lt ≥ l} A'_lt)ᵀ C_l, i.e. factors swapped.
        let mut cbar = DMatrix::zeros(n, wa);
        accumulate(
            &a.partition,
            b_transposed_left,
            b_transposed_right,
            l,
            &a.right[l],
            &mut cbar,
        );
        let mut bbar = DMatrix::zeros(n, wb);
        accumulate(
            &a.partition,
            &a.left,
            &a.right,
            l + 1,
            &b.left[l],
            &mut bbar,
        );

        let mut lf = DMatrix::zeros(n, wa + wb);
        lf.columns_mut(0, wa).copy_from(&a.left[l]);
        lf.columns_mut(wa, wb).copy_from(&bbar);
        let mut rf = DMatrix::zeros(n, wa + wb);
        rf.columns_mut(0, wa).copy_from(&cbar);
        rf.columns_mut(wa, wb).copy_from(&b.right[l]);
        left.push(lf);
        right.push(rf);
    }
    Ok(GeneralMlr {
        partition: a.partition.clone(),
        left,
        right,
    })
}

/// `‖ΣΣ⁻¹ − I‖_F` from the dense form of the MLR product.
pub fn identity_residual(m: &PsdMlr, inv: &InverseMlr, cap: usize) -> Result<f64> {
    let product = multiply(&GeneralMlr::from_psd(m), &GeneralMlr::from_inverse(inv))?;
    let dense = product.to_dense(cap)?;
    Ok((dense - DMatrix::identity(m.n(), m.n())).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inverse::invert;
    use crate::partition::RankAllocation;
    use crate::synth::random_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example_partition() -> Arc<HierarchicalPartition> {
        Arc::new(
            HierarchicalPartition::from_sizes(&[vec![5], vec![3, 2], vec![1, 2, 1, 1]]).unwrap(),
        )
    }

    fn random_general(p: Arc<HierarchicalPartition>, widths: &[usize], seed: u64) -> GeneralMlr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = p.n();
        let mut gen = |w: usize| DMatrix::from_fn(n, w, |_, _| rng.random::<f64>() - 0.5);
        let left = widths.iter().map(|&w| gen(w)).collect();
        let right = widths.iter().map(|&w| gen(w)).collect();
        GeneralMlr::new(p, left, right).unwrap()
    }

    #[test]
    fn embedding_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_model(
            example_partition(),
            RankAllocation::from_factor_ranks(&[2, 1, 1]),
            &mut rng,
        );
        let g = GeneralMlr::from_psd(&m);
        assert_eq!(g.left(0), m.factors(0));
        assert_eq!(g.right(1), m.factors(1));
        assert!((g.to_dense(10).unwrap() - m.to_dense(10).unwrap()).norm() < 1e-14);
    }

    #[test]
    fn diagonal_embedding() {
        let m = PsdMlr::diagonal(
            example_partition(),
            RankAllocation::from_factor_ranks(&[0, 0, 0]),
            DVector::from_element(5, 3.0),
        )
        .unwrap();
        let g = GeneralMlr::from_psd(&m);
        assert_eq!(g.widths(), vec![0, 0, 0, 1]);
        assert_eq!(g.to_dense(10).unwrap(), DMatrix::identity(5, 5) * 3.0);
    }

    #[test]
    fn product_matches_dense() {
        let p = example_partition();
        let a = random_general(p.clone(), &[2, 1, 1, 1], 2);
        let b = random_general(p, &[1, 2, 1, 1], 3);
        let c = multiply(&a, &b).unwrap();
        assert_eq!(c.widths(), vec![3, 3, 2, 2]);
        assert_eq!(c.mlr_rank(), 10);
        let want = a.to_dense(10).unwrap() * b.to_dense(10).unwrap();
        assert!((c.to_dense(10).unwrap() - &want).norm() / want.norm() < 1e-11);
    }

    #[test]
    fn identity_on_the_right() {
        let p = example_partition();
        let a = random_general(p.clone(), &[2, 1, 1, 1], 4);
        let id = GeneralMlr::from_psd(
            &PsdMlr::diagonal(
                p,
                RankAllocation::from_factor_ranks(&[1, 1, 1]),
                DVector::from_element(5, 1.0),
            )
            .unwrap(),
        );
        let c = multiply(&a, &id).unwrap();
        assert!((c.to_dense(10).unwrap() - a.to_dense(10).unwrap()).norm() < 1e-14);
    }

    #[test]
    fn identity_residual_and_negative_control() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Arc::new(crate::synth::random_hierarchy(60, 4, &mut rng));
        let m = random_model(p, RankAllocation::from_factor_ranks(&[3, 2, 2]), &mut rng);
        let mut inv = invert(&m).unwrap();
        assert!(identity_residual(&m, &inv, 100).unwrap() < 1e-8 * 60f64.sqrt());
        inv.h_levels_mut()[1][(7, 0)] += 0.1;
        assert!(identity_residual(&m, &inv, 100).unwrap() > 1e-3);
    }

    #[test]
    fn diagonal_identity_residual() {
        let m = PsdMlr::diagonal(
            example_partition(),
            RankAllocation::from_factor_ranks(&[1, 1, 1]),
            DVector::from_vec(vec![1.0, 2.0, 0.5, 4.0, 8.0]),
        )
        .unwrap();
        let inv = invert(&m).unwrap();
        assert!(identity_residual(&m, &inv, 10).unwrap() < 1e-15);
    }

    #[test]
    fn mismatched_partitions() {
        let a = random_general(example_partition(), &[1, 1, 1, 1], 6);
        let other = Arc::new(HierarchicalPartition::from_sizes(&[vec![5], vec![2, 3]]).unwrap());
        let b = random_general(other, &[1, 1, 1], 7);
        assert!(matches!(
            multiply(&a, &b),
            Err(MlrError::PartitionMismatch { .. })
        ));
    }

    #[test]
    fn level_products_keep_coarse_support() {
        let p = example_partition();
        let a = random_general(p.clone(), &[1, 1, 1, 1], 8);
        let b = random_general(p.clone(), &[1, 1, 1, 1], 9);
        for l in 0..4 {
            for lt in l..4 {
                let prod = a.level_dense(l, 10).unwrap() * b.level_dense(lt, 10).unwrap();
                for i in 0..5 {
                    for j in 0..5 {
                        if p.block_of(l, i) != p.block_of(l, j) {
                            assert_eq!(prod[(i, j)], 0.0);
                        }
                    }
                }
            }
        }
    }
}
