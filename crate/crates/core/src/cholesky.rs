//! Sparse LDLᵀ factorization of the expanded matrix
//!
//! ```text
//! E = [ D   F  ]
//!     [ Fᵀ −I_s ]
//! ```
//!
//! whose Schur complement with respect to `−I_s` is `Σ`. The factor
//! columns of `E` are ordered from the finest factor level to the coarsest,
//! which makes the elimination fill-free:
//!
//! * the feature strip of level `l` is `(D⁻¹F_l)ᵀ`,
//! * the diagonal block of level `l` is `R_l`, with
//!   `I + F_lᵀΣ_{(l+1)+}⁻¹F_l = R_l V_l R_lᵀ` per block,
//! * the coupling between a finer block `k` of level `l` and its ancestor at
//!   a coarser level `c` is `M₃[:, c]ᵀ R_{l,k}`, reusing the inverse recursion.
//!
//! `Dᴱ = blkdiag(D, −V_{L-1}, …, −V_1)`. In block mode `R_l = I` and `V_l`
//! is the full block; scalar mode runs an unpivoted LDLᵀ on every block so
//! that `V_l` is diagonal.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{MlrError, Result};
use crate::inverse::recurse;
use crate::linalg::{ldl, sym_eigen};
use crate::mlr::PsdMlr;
use crate::partition::{HierarchicalPartition, RankAllocation};

const MAGIC: &[u8; 8] = b"MLRCHOL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PivotMode {
    /// `R_l = I`, `V_l` holds the full `r_l × r_l` blocks.
    #[default]
    Block,
    /// `R_l` unit lower triangular, `V_l` diagonal.
    Scalar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedCholesky {
    partition: Arc<HierarchicalPartition>,
    ranks: RankAllocation,
    mode: PivotMode,
    d: DVector<f64>,
    /// Per level, `D⁻¹F̄^l` (`n × r_l`).
    strips: Vec<DMatrix<f64>>,
    /// `cross[l][k][c]` couples block `k` of level `l` to its ancestor at
    /// level `c < l`; shape `r_c × r_l`.
    cross: Vec<Vec<Vec<DMatrix<f64>>>>,
    r_blocks: Vec<Vec<DMatrix<f64>>>,
    v_blocks: Vec<Vec<DMatrix<f64>>>,
    smw_logdet: f64,
}

/// Column offset of every factor level inside `E`.
fn level_offsets(partition: &HierarchicalPartition, ranks: &RankAllocation) -> Vec<usize> {
    let levels = partition.num_factor_levels();
    let mut offsets = vec![0; levels];
    let mut at = partition.n();
    for l in (0..levels).rev() {
        offsets[l] = at;
        at += partition.num_blocks(l) * ranks.rank(l);
    }
    offsets
}

/// Dense `E` in the column order used by the factorization.
pub fn build_expanded_dense(m: &PsdMlr, cap: usize) -> Result<DMatrix<f64>> {
    let partition = m.partition();
    let n = m.n();
    let s = m.ranks().num_factors(partition);
    if n + s > cap {
        return Err(MlrError::DenseCapExceeded { n: n + s, cap });
    }
    let offsets = level_offsets(partition, m.ranks());
    let mut e = DMatrix::zeros(n + s, n + s);
    e.view_mut((0, 0), (n, n)).set_diagonal(m.d());
    for i in n..n + s {
        e[(i, i)] = -1.0;
    }
    for (l, f) in m.factor_levels().iter().enumerate() {
        let r = f.ncols();
        for k in 0..partition.num_blocks(l) {
            let range = partition.block_range(l, k);
            let col = offsets[l] + k * r;
            let block = f.rows(range.start, range.len());
            e.view_mut((range.start, col), (range.len(), r))
                .copy_from(&block);
            e.view_mut((col, range.start), (r, range.len()))
                .copy_from(&block.transpose());
        }
    }
    Ok(e)
}

/// `‖E / (−I_s) − Σ‖_F / ‖Σ‖_F` by dense block elimination.
pub fn schur_complement_check(m: &PsdMlr, cap: usize) -> Result<f64> {
    let e = build_expanded_dense(m, cap)?;
    let n = m.n();
    let s = e.nrows() - n;
    let top = e.view((0, 0), (n, n));
    let coupling = e.view((0, n), (n, s));
    let corner = e.view((n, n), (s, s)).into_owned();
    let corner_inv = corner
        .try_inverse()
        .ok_or_else(|| MlrError::Singular("−I block".into()))?;
    let schur = top - coupling * corner_inv * coupling.transpose();
    let sigma = m.to_dense(cap)?;
    Ok((schur - &sigma).norm() / sigma.norm())
}

/// Factorizes `E` in block mode.
pub fn factorize(m: &PsdMlr) -> Result<ExpandedCholesky> {
    factorize_with(m, PivotMode::Block)
}

pub fn factorize_with(m: &PsdMlr, mode: PivotMode) -> Result<ExpandedCholesky> {
    let (inverse, records, _) = recurse(m, true)?;
    let records = records.expect("records were requested");
    let partition = m.partition();
    let ranks = m.ranks();
    let levels = partition.num_factor_levels();
    let dinv = inverse.dinv();

    let strips = m
        .factor_levels()
        .iter()
        .map(|f| {
            let mut s = f.clone();
            for (i, mut row) in s.row_iter_mut().enumerate() {
                row *= dinv[i];
            }
            s
        })
        .collect();

    let mut cross = Vec::with_capacity(levels);
    let mut r_blocks = Vec::with_capacity(levels);
    let mut v_blocks = Vec::with_capacity(levels);
    for (l, record) in records.iter().enumerate() {
        let r = ranks.rank(l);
        let mut level_cross = Vec::with_capacity(record.gram.len());
        let mut level_r = Vec::with_capacity(record.gram.len());
        let mut level_v = Vec::with_capacity(record.gram.len());
        for (k, gram) in record.gram.iter().enumerate() {
            let (rk, vk) = match mode {
                PivotMode::Block => (DMatrix::identity(r, r), gram.clone()),
                PivotMode::Scalar => {
                    let (rk, v) = ldl(gram).ok_or_else(|| {
                        MlrError::Numerical(format!(
                            "level {l} block {k}: LDLᵀ pivot is not positive"
                        ))
                    })?;
                    (rk, DMatrix::from_diagonal(&v))
                }
            };
            let m3 = &record.m3[k];
            let blocks = (0..l)
                .map(|c| {
                    let rc = ranks.rank(c);
                    m3.columns(ranks.column_offset(c), rc).transpose() * &rk
                })
                .collect();
            level_cross.push(blocks);
            level_r.push(rk);
            level_v.push(vk);
        }
        cross.push(level_cross);
        r_blocks.push(level_r);
        v_blocks.push(level_v);
    }

    Ok(ExpandedCholesky {
        partition: m.partition_arc().clone(),
        ranks: ranks.clone(),
        mode,
        d: m.d().clone(),
        strips,
        cross,
        r_blocks,
        v_blocks,
        smw_logdet: inverse.logdet(),
    })
}

impl ExpandedCholesky {
    pub fn partition(&self) -> &HierarchicalPartition {
        &self.partition
    }

    pub fn ranks(&self) -> &RankAllocation {
        &self.ranks
    }

    pub fn mode(&self) -> PivotMode {
        self.mode
    }

    pub fn n(&self) -> usize {
        self.partition.n()
    }

    /// Total factor count `s`.
    pub fn s(&self) -> usize {
        self.ranks.num_factors(&self.partition)
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn v_block(&self, level: usize, block: usize) -> &DMatrix<f64> {
        &self.v_blocks[level][block]
    }

    pub fn r_block(&self, level: usize, block: usize) -> &DMatrix<f64> {
        &self.r_blocks[level][block]
    }

    /// Log-determinant accumulated during the inverse recursion.
    pub fn smw_logdet(&self) -> f64 {
        self.smw_logdet
    }

    /// `log det Σ = Σ log d_i + Σ log det V_l`, read off `Dᴱ`.
    pub fn logdet(&self) -> Result<f64> {
        let mut total: f64 = self.d.iter().map(|v| v.ln()).sum();
        for (l, blocks) in self.v_blocks.iter().enumerate() {
            for (k, v) in blocks.iter().enumerate() {
                if v.nrows() == 0 {
                    continue;
                }
                let chol = v.clone().cholesky().ok_or_else(|| {
                    MlrError::Numerical(format!(
                        "level {l} block {k}: pivot block is not positive definite"
                    ))
                })?;
                total += 2.0
                    * chol
                        .l_dirty()
                        .diagonal()
                        .iter()
                        .map(|x| x.ln())
                        .sum::<f64>();
            }
        }
        Ok(total)
    }

    /// Number of positive and negative eigenvalues of `Dᴱ`.
    pub fn inertia(&self) -> (usize, usize) {
        let mut pos = self.d.iter().filter(|&&v| v > 0.0).count();
        let mut neg = self.d.len() - pos;
        for v in self.v_blocks.iter().flatten() {
            let (values, _) = sym_eigen(v);
            // Dᴱ holds −V.
            neg += values.iter().filter(|&&x| x > 0.0).count();
            pos += values.iter().filter(|&&x| x <= 0.0).count();
        }
        (pos, neg)
    }

    /// Stored entries of `L`, counting the unit diagonal.
    pub fn nnz(&self) -> usize {
        let n = self.n();
        let strips: usize = self.strips.iter().map(|s| s.len()).sum();
        let cross: usize = self.cross.iter().flatten().flatten().map(|c| c.len()).sum();
        let tri: usize = self
            .r_blocks
            .iter()
            .flatten()
            .map(|r| match self.mode {
                PivotMode::Block => r.nrows(),
                PivotMode::Scalar => r.nrows() * (r.nrows() + 1) / 2,
            })
            .sum();
        n + strips + cross + tri
    }

    /// Dense unit lower triangular `L`.
    pub fn dense_l(&self, cap: usize) -> Result<DMatrix<f64>> {
        let n = self.n();
        let size = n + self.s();
        if size > cap {
            return Err(MlrError::DenseCapExceeded { n: size, cap });
        }
        let offsets = level_offsets(&self.partition, &self.ranks);
        let mut out = DMatrix::identity(size, size);
        for (l, strip) in self.strips.iter().enumerate() {
            let r = self.ranks.rank(l);
            for k in 0..self.partition.num_blocks(l) {
                let range = self.partition.block_range(l, k);
                let row = offsets[l] + k * r;
                out.view_mut((row, range.start), (r, range.len()))
                    .copy_from(&strip.rows(range.start, range.len()).transpose());
                out.view_mut((row, row), (r, r))
                    .copy_from(&self.r_blocks[l][k]);
                for (c, block) in self.cross[l][k].iter().enumerate() {
                    let rc = self.ranks.rank(c);
                    let anc = self.partition.ancestor(l, k, c);
                    out.view_mut((offsets[c] + anc * rc, row), (rc, r))
                        .copy_from(block);
                }
            }
        }
        Ok(out)
    }

    /// Dense block diagonal `Dᴱ`.
    pub fn dense_d(&self, cap: usize) -> Result<DMatrix<f64>> {
        let n = self.n();
        let size = n + self.s();
        if size > cap {
            return Err(MlrError::DenseCapExceeded { n: size, cap });
        }
        let offsets = level_offsets(&self.partition, &self.ranks);
        let mut out = DMatrix::zeros(size, size);
        out.view_mut((0, 0), (n, n)).set_diagonal(&self.d);
        for (l, blocks) in self.v_blocks.iter().enumerate() {
            let r = self.ranks.rank(l);
            for (k, v) in blocks.iter().enumerate() {
                let at = offsets[l] + k * r;
                out.view_mut((at, at), (r, r)).copy_from(&(-v));
            }
        }
        Ok(out)
    }

    /// Writes the little-endian dump: magic, `n`, `s`, `L`, mode, ranks,
    /// block counts, then `d` and per level (finest first) the feature
    /// strip, coupling blocks, `R` blocks and `V` blocks, all row-major.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let levels = self.partition.num_levels();
        w.write_all(MAGIC)?;
        for v in [self.n(), self.s(), levels, self.mode as usize] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for &r in self.ranks.as_slice() {
            w.write_all(&(r as u64).to_le_bytes())?;
        }
        for l in 0..levels {
            w.write_all(&(self.partition.num_blocks(l) as u64).to_le_bytes())?;
        }
        write_values(&mut w, self.d.iter().copied())?;
        for l in (0..self.strips.len()).rev() {
            write_row_major(&mut w, &self.strips[l])?;
            for blocks in &self.cross[l] {
                for c in blocks {
                    write_row_major(&mut w, c)?;
                }
            }
            for r in &self.r_blocks[l] {
                write_row_major(&mut w, r)?;
            }
            for v in &self.v_blocks[l] {
                write_row_major(&mut w, v)?;
            }
        }
        Ok(())
    }

    /// Reads a dump written by [`write_binary`](Self::write_binary). The
    /// partition must be supplied since only block counts are stored.
    pub fn read_binary<R: Read>(mut r: R, partition: Arc<HierarchicalPartition>) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(MlrError::Structural("not a factorization dump".into()));
        }
        let n = read_u64(&mut r)?;
        let s = read_u64(&mut r)?;
        let levels = read_u64(&mut r)?;
        let mode = match read_u64(&mut r)? {
            0 => PivotMode::Block,
            1 => PivotMode::Scalar,
            other => return Err(MlrError::Structural(format!("unknown pivot mode {other}"))),
        };
        if n != partition.n() || levels != partition.num_levels() {
            return Err(MlrError::Structural(
                "dump does not match the partition".into(),
            ));
        }
        let ranks: Vec<usize> = (0..levels)
            .map(|_| read_u64(&mut r))
            .collect::<Result<_>>()?;
        let ranks = RankAllocation::new(ranks)?;
        for l in 0..levels {
            if read_u64(&mut r)? != partition.num_blocks(l) {
                return Err(MlrError::Structural(format!(
                    "block count mismatch at level {l}"
                )));
            }
        }
        if s != ranks.num_factors(&partition) {
            return Err(MlrError::Structural("factor count mismatch".into()));
        }
        let d = DVector::from_vec(read_values(&mut r, n)?);
        let factor_levels = partition.num_factor_levels();
        let mut strips = vec![DMatrix::zeros(0, 0); factor_levels];
        let mut cross = vec![Vec::new(); factor_levels];
        let mut r_blocks = vec![Vec::new(); factor_levels];
        let mut v_blocks = vec![Vec::new(); factor_levels];
        for l in (0..factor_levels).rev() {
            let rl = ranks.rank(l);
            let p = partition.num_blocks(l);
            strips[l] = read_row_major(&mut r, n, rl)?;
            cross[l] = (0..p)
                .map(|_| {
                    (0..l)
                        .map(|c| read_row_major(&mut r, ranks.rank(c), rl))
                        .collect()
                })
                .collect::<Result<_>>()?;
            r_blocks[l] = (0..p)
                .map(|_| read_row_major(&mut r, rl, rl))
                .collect::<Result<_>>()?;
            v_blocks[l] = (0..p)
                .map(|_| read_row_major(&mut r, rl, rl))
                .collect::<Result<_>>()?;
        }
        let mut out = Self {
            partition,
            ranks,
            mode,
            d,
            strips,
            cross,
            r_blocks,
            v_blocks,
            smw_logdet: 0.0,
        };
        out.smw_logdet = out.logdet()?;
        Ok(out)
    }
}

fn write_values<W: Write>(w: &mut W, values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_row_major<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    for row in m.row_iter() {
        write_values(w, row.iter().copied())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<usize> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf) as usize)
}

fn read_values<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut buf = [0u8; 8];
    (0..count)
        .map(|_| {
            r.read_exact(&mut buf)?;
            Ok(f64::from_le_bytes(buf))
        })
        .collect()
}

fn read_row_major<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    Ok(DMatrix::from_row_slice(
        rows,
        cols,
        &read_values(r, rows * cols)?,
    ))
}
