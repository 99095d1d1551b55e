//! Hierarchical index partitions and rank allocations.
//!
//! Levels are indexed from zero internally: level `0` is the coarsest
//! partition and level `L - 1` is the partition into singletons that carries
//! the diagonal. Every block is a contiguous index range once a partition has
//! been built; raw groupings are contiguized by [`HierarchicalPartition::from_assignments`].

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{MlrError, Result};

/// Nested contiguous partitions `J_1 ⪰ … ⪰ J_L` of `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierarchicalPartition {
    n: usize,
    sizes: Vec<Vec<usize>>,
    offsets: Vec<Vec<usize>>,
    parents: Vec<Vec<usize>>,
    perm: Vec<usize>,
}

impl HierarchicalPartition {
    /// Builds a contiguous partition from per-level block sizes.
    ///
    /// If the last level is not made of singletons, a singleton level is
    /// appended. The permutation is the identity.
    pub fn from_sizes(levels: &[Vec<usize>]) -> Result<Self> {
        let n: usize = levels
            .first()
            .ok_or_else(|| MlrError::Structural("hierarchy has no levels".into()))?
            .iter()
            .sum();
        Self::from_sizes_with_perm(levels, (0..n).collect())
    }

    pub fn from_sizes_with_perm(levels: &[Vec<usize>], perm: Vec<usize>) -> Result<Self> {
        let mut sizes: Vec<Vec<usize>> = levels.to_vec();
        let n: usize = sizes
            .first()
            .ok_or_else(|| MlrError::Structural("hierarchy has no levels".into()))?
            .iter()
            .sum();
        if n == 0 {
            return Err(MlrError::Structural("hierarchy covers no features".into()));
        }
        if sizes
            .last()
            .is_none_or(|last| last.iter().any(|&s| s != 1))
        {
            sizes.push(vec![1; n]);
        }
        if sizes.len() < 2 {
            // A single singleton level: prepend the trivial top group.
            sizes.insert(0, vec![n]);
        }

        let mut offsets = Vec::with_capacity(sizes.len());
        for (l, level) in sizes.iter().enumerate() {
            let mut off = Vec::with_capacity(level.len() + 1);
            off.push(0);
            for (k, &s) in level.iter().enumerate() {
                if s == 0 {
                    return Err(MlrError::EmptyGroup {
                        level: l,
                        group: k.to_string(),
                    });
                }
                off.push(off[k] + s);
            }
            let total = *off.last().unwrap();
            if total != n {
                return Err(MlrError::Structural(format!(
                    "level {l} block sizes sum to {total}, expected {n}"
                )));
            }
            offsets.push(off);
        }

        let mut parents = vec![Vec::new(); sizes.len()];
        parents[0] = vec![0; sizes[0].len()];
        for l in 1..sizes.len() {
            let coarse = &offsets[l - 1];
            let fine = &offsets[l];
            let mut parent = Vec::with_capacity(sizes[l].len());
            let mut q = 0;
            for k in 0..sizes[l].len() {
                let (start, end) = (fine[k], fine[k + 1]);
                while coarse[q + 1] <= start {
                    q += 1;
                }
                if end > coarse[q + 1] {
                    return Err(MlrError::NotNested {
                        level: l,
                        group: k.to_string(),
                    });
                }
                parent.push(q);
            }
            parents[l] = parent;
        }

        if perm.len() != n {
            return Err(MlrError::Dimension {
                what: "permutation length",
                expected: n,
                found: perm.len(),
            });
        }
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || seen[p] {
                return Err(MlrError::Structural(
                    "permutation is not a bijection".into(),
                ));
            }
            seen[p] = true;
        }

        Ok(Self {
            n,
            sizes,
            offsets,
            parents,
            perm,
        })
    }

    /// Contiguizes a raw grouping.
    ///
    /// `assignments[l][j]` is the group label of raw feature `j` at level `l`,
    /// coarsest level first. Groups are ordered by first appearance at the top
    /// level and then recursively by first appearance inside their parent.
    /// Labels are global within a level, so reusing one label under two parents
    /// is reported as a nesting violation. A singleton bottom level is appended
    /// unless the last level already separates every feature.
    pub fn from_assignments<S: AsRef<str>>(assignments: &[Vec<S>]) -> Result<Self> {
        let levels = assignments.len();
        if levels == 0 {
            return Err(MlrError::Structural("hierarchy has no levels".into()));
        }
        let n = assignments[0].len();
        if n == 0 {
            return Err(MlrError::Structural("hierarchy covers no features".into()));
        }
        for level in assignments {
            if level.len() != n {
                return Err(MlrError::Dimension {
                    what: "assignment length",
                    expected: n,
                    found: level.len(),
                });
            }
        }

        // Intern labels per level and check that each label has one parent.
        let mut ids: Vec<Vec<usize>> = Vec::with_capacity(levels);
        let mut names: Vec<Vec<String>> = Vec::with_capacity(levels);
        for level in assignments {
            let mut map: HashMap<&str, usize> = HashMap::new();
            let mut level_names = Vec::new();
            let mut level_ids = Vec::with_capacity(n);
            for label in level {
                let label = label.as_ref();
                let next = map.len();
                let id = *map.entry(label).or_insert_with(|| {
                    level_names.push(label.to_string());
                    next
                });
                level_ids.push(id);
            }
            ids.push(level_ids);
            names.push(level_names);
        }
        for l in 1..levels {
            let mut parent_of: Vec<Option<usize>> = vec![None; names[l].len()];
            for j in 0..n {
                let g = ids[l][j];
                let p = ids[l - 1][j];
                match parent_of[g] {
                    None => parent_of[g] = Some(p),
                    Some(q) if q != p => {
                        return Err(MlrError::NotNested {
                            level: l,
                            group: names[l][g].clone(),
                        })
                    }
                    _ => {}
                }
            }
        }

        let mut perm = Vec::with_capacity(n);
        let mut sizes: Vec<Vec<usize>> = vec![Vec::new(); levels];
        let all: Vec<usize> = (0..n).collect();
        contiguize(&ids, 0, &all, &mut perm, &mut sizes);

        Self::from_sizes_with_perm(&sizes, perm)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of levels `L`, including the singleton level.
    pub fn num_levels(&self) -> usize {
        self.sizes.len()
    }

    /// Number of levels that carry factors (`L - 1`).
    pub fn num_factor_levels(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_blocks(&self, level: usize) -> usize {
        self.sizes[level].len()
    }

    pub fn block_sizes(&self, level: usize) -> &[usize] {
        &self.sizes[level]
    }

    pub fn level_sizes(&self) -> &[Vec<usize>] {
        &self.sizes
    }

    pub fn block_range(&self, level: usize, block: usize) -> Range<usize> {
        self.offsets[level][block]..self.offsets[level][block + 1]
    }

    pub fn block_start(&self, level: usize, block: usize) -> usize {
        self.offsets[level][block]
    }

    pub fn block_len(&self, level: usize, block: usize) -> usize {
        self.sizes[level][block]
    }

    /// Index of the level-`level - 1` block containing block `block` of `level`.
    pub fn parent(&self, level: usize, block: usize) -> usize {
        self.parents[level][block]
    }

    /// Index of the block at `ancestor_level` containing block `block` of `level`.
    pub fn ancestor(&self, level: usize, block: usize, ancestor_level: usize) -> usize {
        debug_assert!(ancestor_level <= level);
        let mut b = block;
        let mut l = level;
        while l > ancestor_level {
            b = self.parents[l][b];
            l -= 1;
        }
        b
    }

    /// Block of `level` containing feature `row`.
    pub fn block_of(&self, level: usize, row: usize) -> usize {
        match self.offsets[level].binary_search(&row) {
            Ok(k) => k,
            Err(k) => k - 1,
        }
    }

    /// Range of level-`fine` blocks contained in block `block` of `coarse`.
    pub fn children_range(&self, coarse: usize, block: usize, fine: usize) -> Range<usize> {
        let r = self.block_range(coarse, block);
        let first = self.block_of(fine, r.start);
        let last = self.block_of(fine, r.end - 1);
        first..last + 1
    }

    /// `perm[i]` is the raw feature index stored at contiguous position `i`.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// The same partition with the identity permutation.
    pub fn without_perm(&self) -> Self {
        Self {
            perm: (0..self.n).collect(),
            ..self.clone()
        }
    }

    /// Blocks of one level as explicit index sets.
    pub fn level_sets(&self, level: usize) -> Vec<Vec<usize>> {
        (0..self.num_blocks(level))
            .map(|k| self.block_range(level, k).collect())
            .collect()
    }

    /// Same block structure, ignoring the permutation.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.n == other.n && self.sizes == other.sizes
    }
}

fn contiguize(
    ids: &[Vec<usize>],
    level: usize,
    members: &[usize],
    perm: &mut Vec<usize>,
    sizes: &mut [Vec<usize>],
) {
    if level == ids.len() {
        perm.extend_from_slice(members);
        return;
    }
    let mut order: Vec<usize> = Vec::new();
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for &j in members {
        let g = ids[level][j];
        groups
            .entry(g)
            .or_insert_with(|| {
                order.push(g);
                Vec::new()
            })
            .push(j);
    }
    for g in order {
        let group = &groups[&g];
        sizes[level].push(group.len());
        contiguize(ids, level + 1, group, perm, sizes);
    }
}

/// True iff every block of `fine` lies inside some block of `coarse`.
///
/// Blocks are arbitrary (not necessarily contiguous) index sets over `0..n`.
pub fn refines(fine: &[Vec<usize>], coarse: &[Vec<usize>]) -> Result<bool> {
    let n_fine: usize = fine.iter().map(Vec::len).sum();
    let n_coarse: usize = coarse.iter().map(Vec::len).sum();
    if n_fine != n_coarse {
        return Err(MlrError::PartitionMismatch {
            left: n_fine,
            right: n_coarse,
        });
    }
    let mut owner = vec![usize::MAX; n_coarse];
    for (b, block) in coarse.iter().enumerate() {
        for &i in block {
            if i >= n_coarse || owner[i] != usize::MAX {
                return Err(MlrError::Structural(
                    "coarse argument is not a partition".into(),
                ));
            }
            owner[i] = b;
        }
    }
    let mut seen = vec![false; n_fine];
    for block in fine {
        for &i in block {
            if i >= n_fine || seen[i] {
                return Err(MlrError::Structural(
                    "fine argument is not a partition".into(),
                ));
            }
            seen[i] = true;
        }
    }
    Ok(fine.iter().all(|block| match block.first() {
        None => true,
        Some(&first) => block.iter().all(|&i| owner[i] == owner[first]),
    }))
}

/// Rank allocation `(r_1, …, r_{L-1}, 1)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct RankAllocation {
    ranks: Vec<usize>,
}

impl RankAllocation {
    /// Accepts either all `L` ranks (the last must be 1) or the `L - 1`
    /// factor ranks with the trailing 1 implied.
    pub fn new(ranks: Vec<usize>) -> Result<Self> {
        if ranks.is_empty() {
            return Err(MlrError::InvalidArgument("rank allocation is empty".into()));
        }
        if *ranks.last().unwrap() != 1 {
            return Err(MlrError::InvalidArgument(format!(
                "the diagonal level must have rank 1, got {}",
                ranks.last().unwrap()
            )));
        }
        if ranks.len() < 2 {
            return Err(MlrError::InvalidArgument(
                "a rank allocation needs at least two levels".into(),
            ));
        }
        Ok(Self { ranks })
    }

    /// Builds from factor ranks `r_1..r_{L-1}`, appending the diagonal rank.
    pub fn from_factor_ranks(factor_ranks: &[usize]) -> Self {
        let mut ranks = factor_ranks.to_vec();
        ranks.push(1);
        Self { ranks }
    }

    /// Resolves a user-supplied list against a known level count.
    pub fn for_levels(ranks: &[usize], num_levels: usize) -> Result<Self> {
        if ranks.len() + 1 == num_levels {
            Ok(Self::from_factor_ranks(ranks))
        } else if ranks.len() == num_levels {
            Self::new(ranks.to_vec())
        } else {
            Err(MlrError::Dimension {
                what: "rank allocation length",
                expected: num_levels,
                found: ranks.len(),
            })
        }
    }

    pub fn num_levels(&self) -> usize {
        self.ranks.len()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.ranks
    }

    /// Rank of factor level `level` (`level < L - 1`).
    pub fn rank(&self, level: usize) -> usize {
        self.ranks[level]
    }

    /// The MLR-rank `r = r_1 + … + r_{L-1} + 1`.
    pub fn mlr_rank(&self) -> usize {
        self.ranks.iter().sum()
    }

    /// Width `r - 1` of the compressed factor matrix.
    pub fn factor_width(&self) -> usize {
        self.mlr_rank() - 1
    }

    /// First compressed column of factor level `level`.
    pub fn column_offset(&self, level: usize) -> usize {
        self.ranks[..level].iter().sum()
    }

    /// Total factor count `s = Σ p_l r_l`.
    pub fn num_factors(&self, partition: &HierarchicalPartition) -> usize {
        (0..partition.num_factor_levels())
            .map(|l| partition.num_blocks(l) * self.ranks[l])
            .sum()
    }

    /// Offset of level `level` inside the columns of `F = [F_1 … F_{L-1}]`.
    pub fn factor_offset(&self, partition: &HierarchicalPartition, level: usize) -> usize {
        (0..level)
            .map(|l| partition.num_blocks(l) * self.ranks[l])
            .sum()
    }

    pub fn check_partition(&self, partition: &HierarchicalPartition) -> Result<()> {
        if self.ranks.len() != partition.num_levels() {
            return Err(MlrError::Dimension {
                what: "rank allocation length",
                expected: partition.num_levels(),
                found: self.ranks.len(),
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<usize>> for RankAllocation {
    type Error = MlrError;

    fn try_from(value: Vec<usize>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<RankAllocation> for Vec<usize> {
    fn from(value: RankAllocation) -> Self {
        value.ranks
    }
}

/// Rows of `F` that share one sparsity pattern, and the factor columns that
/// pattern selects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityGroup {
    pub index: usize,
    /// Contiguous rows `s_i` (the action of `S_{r_i}`).
    pub rows: Range<usize>,
    /// Columns of `F` selected by `S_{c_i}`, ordered by level then rank.
    pub columns: Vec<usize>,
    /// Block index of the ancestor at every factor level.
    pub ancestors: Vec<usize>,
}

impl SparsityGroup {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// One group per block of level `L - 1`, in leaf order.
pub fn sparsity_groups(
    partition: &HierarchicalPartition,
    ranks: &RankAllocation,
) -> Result<Vec<SparsityGroup>> {
    ranks.check_partition(partition)?;
    let leaf = partition.num_levels() - 2;
    let factor_levels = partition.num_factor_levels();
    Ok((0..partition.num_blocks(leaf))
        .map(|i| {
            let ancestors: Vec<usize> = (0..factor_levels)
                .map(|l| partition.ancestor(leaf, i, l))
                .collect();
            let columns = (0..factor_levels)
                .flat_map(|l| {
                    let base = ranks.factor_offset(partition, l) + ancestors[l] * ranks.rank(l);
                    base..base + ranks.rank(l)
                })
                .collect();
            SparsityGroup {
                index: i,
                rows: partition.block_range(leaf, i),
                columns,
                ancestors,
            }
        })
        .collect())
}

/// JSON description of a hierarchy, as consumed by the CLI.
///
/// Exactly one of `levels` (contiguous block sizes) or `assignments`
/// (per-level group labels for each feature in `features` order) is given.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct HierarchySpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignments: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks: Option<Vec<usize>>,
}

impl HierarchySpec {
    /// Resolves the description into a partition and, when ranks are given, a rank
    /// allocation. The partition's permutation indexes `features` order.
    pub fn build(&self) -> Result<(HierarchicalPartition, Option<RankAllocation>)> {
        let partition = match (&self.levels, &self.assignments) {
            (Some(levels), None) => HierarchicalPartition::from_sizes(levels)?,
            (None, Some(assignments)) => HierarchicalPartition::from_assignments(assignments)?,
            (Some(_), Some(_)) => {
                return Err(MlrError::Structural(
                    "hierarchy must give either `levels` or `assignments`, not both".into(),
                ))
            }
            (None, None) => {
                return Err(MlrError::Structural(
                    "hierarchy must give `levels` or `assignments`".into(),
                ))
            }
        };
        if let Some(n) = self.n {
            if n != partition.n() {
                return Err(MlrError::Dimension {
                    what: "hierarchy feature count",
                    expected: n,
                    found: partition.n(),
                });
            }
        }
        if let Some(features) = &self.features {
            if features.len() != partition.n() {
                return Err(MlrError::Dimension {
                    what: "feature label count",
                    expected: partition.n(),
                    found: features.len(),
                });
            }
        }
        let ranks = self
            .ranks
            .as_ref()
            .map(|r| RankAllocation::for_levels(r, partition.num_levels()))
            .transpose()?;
        Ok((partition, ranks))
    }
}
