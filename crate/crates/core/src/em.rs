//! Maximum likelihood fitting by expectation maximization.
//!
//! Samples follow `y = Bx + Fz + e` with `z ~ N(0, I_s)` and `e ~ N(0, D)`;
//! without covariates `B` is empty. The latent vector is augmented to
//! `f̃ = [x; z]` and every row `j` of `[B F]` is updated by least squares
//! against the moment matrix of its sparsity pattern `i`:
//!
//! ```text
//! M_i = [ XᵀX      XᵀZ_i              ]      u_j = [ Xᵀy_j   ]
//!       [ Z_iᵀX    N(I − G_i) + Z_iᵀZ_i ],           [ Z_iᵀy_j ]
//! ```
//!
//! where `Z_i = (Y − XBᵀ)Σ⁻¹F_i` collects the posterior means of the
//! pattern's factors and `G_i = F_iᵀΣ⁻¹F_i`. The diagonal update is
//! `d_j = (y_jᵀy_j − 2f̃_jᵀu_j + f̃_jᵀM_if̃_j)/N`.

use std::ops::Range;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, MlrError, Result};
use crate::inverse::{invert, InverseMlr};
use crate::linalg::sym_eigen;
use crate::mlr::{PsdMlr, DEFAULT_DENSE_CAP};
use crate::partition::{sparsity_groups, HierarchicalPartition, RankAllocation};
use crate::synth::psd_truncation;

/// Reduced moment blocks below `MOMENT_FLOOR · λ_max` are rejected.
pub const MOMENT_FLOOR: f64 = 1e-10;

/// Covariate Gram matrices with a larger condition estimate are rejected.
pub const COVARIATE_CONDITION_LIMIT: f64 = 1e12;

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Observations `Y` (`N × n`, rows are samples) and optional covariates
/// `X` (`N × p`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DMatrix<f64>,
    x: Option<DMatrix<f64>>,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>) -> Result<Self> {
        if y.nrows() == 0 {
            return Err(MlrError::InvalidArgument("N must be ≥ 1".into()));
        }
        Ok(Self { y, x: None })
    }

    pub fn with_covariates(y: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        let mut data = Self::new(y)?;
        check_dim("covariate rows", data.y.nrows(), x.nrows())?;
        data.x = (x.ncols() > 0).then_some(x);
        Ok(data)
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn x(&self) -> Option<&DMatrix<f64>> {
        self.x.as_ref()
    }

    pub fn n_samples(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.as_ref().map_or(0, |x| x.ncols())
    }

    /// Per-feature second moments `Σ_t y_tj² / N`.
    pub fn second_moments(&self) -> DVector<f64> {
        let n = self.n_samples() as f64;
        DVector::from_iterator(
            self.n_features(),
            self.y.column_iter().map(|c| c.norm_squared() / n),
        )
    }

    /// `Y − XBᵀ`, or `Y` without covariates.
    pub fn residual(&self, b: Option<&DMatrix<f64>>) -> DMatrix<f64> {
        match (self.x.as_ref(), b) {
            (Some(x), Some(b)) => &self.y - x * b.transpose(),
            _ => self.y.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    FrobeniusSweep,
    /// Random factors drawn from `EmOptions::seed`.
    Random,
    Warm(PsdMlr),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Lower bound on `d`; defaults to `1e-8` times the mean sample variance.
    pub d_floor: Option<f64>,
    pub init: Init,
    pub seed: u64,
    /// Largest top-level block the Frobenius sweep will form densely.
    pub dense_cap: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iters: 300,
            rel_tol: 1e-8,
            d_floor: None,
            init: Init::FrobeniusSweep,
            seed: 0,
            dense_cap: DEFAULT_DENSE_CAP,
        }
    }
}

impl EmOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(MlrError::InvalidArgument(
                "max_iters must be at least 1".into(),
            ));
        }
        if !(self.rel_tol > 0.0) {
            return Err(MlrError::InvalidArgument("rel_tol must be positive".into()));
        }
        if let Some(f) = self.d_floor {
            if !(f > 0.0) {
                return Err(MlrError::InvalidArgument("d_floor must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn resolve_floor(&self, data: &Dataset) -> f64 {
        self.d_floor.unwrap_or_else(|| {
            let mean = data.second_moments().mean();
            if mean > 0.0 {
                1e-8 * mean
            } else {
                1e-8
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    MaxIters,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub loglik: f64,
    /// `|ℓ_k − ℓ_{k−1}| / max(1, |ℓ_{k−1}|)`; NaN at the first row.
    pub rel_change: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    pub rows: Vec<TraceRow>,
    pub status: FitStatus,
    /// Number of `d` entries clamped to the floor in the last M-step.
    pub floored: usize,
    pub floor: f64,
    /// Set when the Frobenius sweep was skipped for a random start.
    pub init_fallback: bool,
}

impl FitTrace {
    pub fn final_loglik(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.loglik)
    }

    /// Number of M-steps taken.
    pub fn iterations(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: PsdMlr,
    /// Covariate loadings (`n × p`) when the data carry covariates.
    pub b: Option<DMatrix<f64>>,
    pub trace: FitTrace,
}

/// Observed-data log-likelihood
/// `−(nN/2) log 2π − (N/2) log det Σ − ½ Σ_t y_tᵀΣ⁻¹y_t`.
pub fn log_likelihood(model: &PsdMlr, data: &Dataset) -> Result<f64> {
    log_likelihood_with_mean(model, None, data)
}

/// As [`log_likelihood`] with sample means `Bx_t`.
pub fn log_likelihood_with_mean(
    model: &PsdMlr,
    b: Option<&DMatrix<f64>>,
    data: &Dataset,
) -> Result<f64> {
    check_dim("data columns", model.n(), data.n_features())?;
    let inv = invert(model)?;
    let residual = data.residual(b);
    let a = inv.apply(&residual.transpose())?;
    Ok(loglik_from_parts(&inv, &residual, &a))
}

fn loglik_from_parts(inv: &InverseMlr, residual: &DMatrix<f64>, a: &DMatrix<f64>) -> f64 {
    let n = inv.n() as f64;
    let samples = residual.nrows() as f64;
    let quad = residual.transpose().component_mul(a).sum();
    -0.5 * n * samples * LOG_2PI - 0.5 * samples * inv.logdet() - 0.5 * quad
}

/// Reduced moments of one sparsity pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternMoments {
    pub rows: Range<usize>,
    /// Global columns of `F` selected by the pattern.
    pub columns: Vec<usize>,
    /// `M_i`, of size `(p + r − 1)²`.
    pub moment: DMatrix<f64>,
    /// `[u_j]` for the pattern's rows, `(p + r − 1) × |s_i|`.
    pub cross: DMatrix<f64>,
}

impl PatternMoments {
    /// The factor block `N(I − G_i) + Z_iᵀZ_i` (the reduced `W`).
    pub fn w(&self, covariates: usize) -> DMatrix<f64> {
        let q = self.moment.nrows();
        self.moment
            .view((covariates, covariates), (q - covariates, q - covariates))
            .into_owned()
    }

    /// The factor rows of the cross moments (the reduced `Vᵀ` columns).
    pub fn v(&self, covariates: usize) -> DMatrix<f64> {
        let q = self.moment.nrows();
        self.cross.rows(covariates, q - covariates).into_owned()
    }
}

#[derive(Debug, Clone)]
pub struct EStep {
    pub patterns: Vec<PatternMoments>,
    pub covariates: usize,
    /// Log-likelihood of the model the moments were computed at.
    pub loglik: f64,
}

/// Computes the reduced moments of every sparsity pattern at the current
/// parameters, together with their log-likelihood.
pub fn e_step(model: &PsdMlr, b: Option<&DMatrix<f64>>, data: &Dataset) -> Result<EStep> {
    check_dim("data columns", model.n(), data.n_features())?;
    let p = data.n_covariates();
    if p > 0 {
        let b =
            b.ok_or_else(|| MlrError::InvalidArgument("covariate loadings are missing".into()))?;
        check_dim("covariate loading rows", model.n(), b.nrows())?;
        check_dim("covariate loading columns", p, b.ncols())?;
    }
    let partition = model.partition();
    let ranks = model.ranks();
    let levels = partition.num_factor_levels();
    let samples = data.n_samples() as f64;
    let inv = invert(model)?;
    let residual = data.residual(b);
    let a = inv.apply(&residual.transpose())?;
    let loglik = loglik_from_parts(&inv, &residual, &a);

    // Z blocks: posterior factor means, N × r_l per block.
    let z: Vec<Vec<DMatrix<f64>>> = (0..levels)
        .map(|l| {
            let f = model.factors(l);
            (0..partition.num_blocks(l))
                .map(|k| {
                    let range = partition.block_range(l, k);
                    a.rows(range.start, range.len()).transpose() * f.rows(range.start, range.len())
                })
                .collect()
        })
        .collect();

    // Diagonal blocks of Σ⁻¹ applied to each level's factors, n × r_l.
    let within: Vec<DMatrix<f64>> = (0..levels)
        .map(|l| inv.apply_within_blocks(l, model.factors(l)))
        .collect::<Result<_>>()?;

    // G[a, b] = F_aᵀΣ⁻¹F_b for nested blocks, stored at the finer block.
    // cross_g[beta][b][alpha] for alpha <= beta.
    let cross_g: Vec<Vec<Vec<DMatrix<f64>>>> = (0..levels)
        .map(|beta| {
            let f = model.factors(beta);
            (0..partition.num_blocks(beta))
                .map(|blk| {
                    let range = partition.block_range(beta, blk);
                    (0..=beta)
                        .map(|alpha| {
                            within[alpha].rows(range.start, range.len()).transpose()
                                * f.rows(range.start, range.len())
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let groups = sparsity_groups(partition, ranks)?;
    let width = ranks.factor_width();
    let q = p + width;
    let xtx = data.x().map(|x| x.transpose() * x);
    let y = data.y();

    let patterns: Result<Vec<PatternMoments>> = groups
        .into_par_iter()
        .map(|group| {
            let anc = &group.ancestors;
            // Z_i: N × (r − 1).
            let mut zi = DMatrix::zeros(data.n_samples(), width);
            let mut g = DMatrix::zeros(width, width);
            for beta in 0..levels {
                let rb = ranks.rank(beta);
                if rb == 0 {
                    continue;
                }
                let cb = ranks.column_offset(beta);
                zi.columns_mut(cb, rb).copy_from(&z[beta][anc[beta]]);
                for alpha in 0..=beta {
                    let ra = ranks.rank(alpha);
                    if ra == 0 {
                        continue;
                    }
                    let ca = ranks.column_offset(alpha);
                    let block = &cross_g[beta][anc[beta]][alpha];
                    g.view_mut((ca, cb), (ra, rb)).copy_from(block);
                    if alpha != beta {
                        g.view_mut((cb, ca), (rb, ra)).copy_from(&block.transpose());
                    }
                }
            }
            let mut w = DMatrix::identity(width, width) * samples - g * samples + zi.transpose() * &zi;
            w = (&w + w.transpose()) * 0.5;
            if width > 0 {
                let (values, _) = sym_eigen(&w);
                let max = values[0];
                let min = values[width - 1];
                if !(min > MOMENT_FLOOR * max.max(f64::MIN_POSITIVE)) {
                    return Err(MlrError::Numerical(format!(
                        "pattern {}: reduced second moment is not positive definite (min eigenvalue {min:e})",
                        group.index
                    )));
                }
            }
            let rows = group.rows.clone();
            let yi = y.columns(rows.start, rows.len());
            let mut moment = DMatrix::zeros(q, q);
            let mut cross = DMatrix::zeros(q, rows.len());
            moment.view_mut((p, p), (width, width)).copy_from(&w);
            cross.rows_mut(p, width).copy_from(&(zi.transpose() * yi));
            if let (Some(x), Some(xtx)) = (data.x(), xtx.as_ref()) {
                moment.view_mut((0, 0), (p, p)).copy_from(xtx);
                let xz = x.transpose() * &zi;
                moment.view_mut((0, p), (p, width)).copy_from(&xz);
                moment.view_mut((p, 0), (width, p)).copy_from(&xz.transpose());
                cross.rows_mut(0, p).copy_from(&(x.transpose() * yi));
            }
            Ok(PatternMoments {
                rows,
                columns: group.columns,
                moment,
                cross,
            })
        })
        .collect();

    Ok(EStep {
        patterns: patterns?,
        covariates: p,
        loglik,
    })
}

#[derive(Debug, Clone)]
pub struct MStep {
    pub model: PsdMlr,
    pub b: Option<DMatrix<f64>>,
    /// Number of `d` entries raised to the floor.
    pub floored: usize,
}

/// Solves the per-pattern least squares problems and updates `d`.
pub fn m_step(
    estep: &EStep,
    data: &Dataset,
    partition: Arc<HierarchicalPartition>,
    ranks: RankAllocation,
    d_floor: f64,
) -> Result<MStep> {
    let n = partition.n();
    check_dim("data columns", n, data.n_features())?;
    let p = estep.covariates;
    let samples = data.n_samples() as f64;
    let width = ranks.factor_width();
    let levels = partition.num_factor_levels();
    let y = data.y();

    struct Solved {
        coeffs: DMatrix<f64>,
        d: DVector<f64>,
    }

    let solved: Result<Vec<Solved>> = estep
        .patterns
        .par_iter()
        .map(|pat| {
            let len = pat.rows.len();
            let (coeffs, d) = if pat.moment.nrows() == 0 {
                (
                    DMatrix::zeros(0, len),
                    DVector::from_fn(len, |j, _| {
                        y.column(pat.rows.start + j).norm_squared() / samples
                    }),
                )
            } else {
                let sym = (&pat.moment + pat.moment.transpose()) * 0.5;
                let chol = sym.clone().cholesky().ok_or_else(|| {
                    MlrError::Singular(format!("moment matrix of rows {:?}", pat.rows))
                })?;
                let coeffs = chol.solve(&pat.cross);
                let d = DVector::from_fn(len, |j, _| {
                    let yj = y.column(pat.rows.start + j);
                    let f = coeffs.column(j);
                    let u = pat.cross.column(j);
                    (yj.norm_squared() - 2.0 * f.dot(&u) + (f.transpose() * &sym * f)[(0, 0)])
                        / samples
                });
                (coeffs, d)
            };
            Ok(Solved { coeffs, d })
        })
        .collect();
    let solved = solved?;

    let mut factors: Vec<DMatrix<f64>> = (0..levels)
        .map(|l| DMatrix::zeros(n, ranks.rank(l)))
        .collect();
    let mut b = (p > 0).then(|| DMatrix::zeros(n, p));
    let mut d = DVector::zeros(n);
    let mut floored = 0;
    for (pat, sol) in estep.patterns.iter().zip(&solved) {
        for j in 0..pat.rows.len() {
            let row = pat.rows.start + j;
            if let Some(b) = b.as_mut() {
                for c in 0..p {
                    b[(row, c)] = sol.coeffs[(c, j)];
                }
            }
            for (l, f) in factors.iter_mut().enumerate() {
                let off = ranks.column_offset(l);
                for c in 0..f.ncols() {
                    f[(row, c)] = sol.coeffs[(p + off + c, j)];
                }
            }
            let v = sol.d[j];
            d[row] = if v >= d_floor {
                v
            } else {
                floored += 1;
                d_floor
            };
        }
    }
    debug_assert_eq!(width, factors.iter().map(|f| f.ncols()).sum::<usize>());
    let model = PsdMlr::new(partition, ranks, factors, d)?;
    Ok(MStep { model, b, floored })
}

/// Ordinary least squares loadings `B` (`n × p`) of `Y` on `X`.
pub fn ols_loadings(data: &Dataset) -> Result<Option<DMatrix<f64>>> {
    let Some(x) = data.x() else {
        return Ok(None);
    };
    let gram = x.transpose() * x;
    let (values, _) = sym_eigen(&gram);
    let max = values[0];
    let min = values[values.len() - 1];
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition < COVARIATE_CONDITION_LIMIT) {
        return Err(MlrError::RankDeficientCovariates { condition });
    }
    let chol = gram
        .cholesky()
        .ok_or(MlrError::RankDeficientCovariates { condition })?;
    Ok(Some(chol.solve(&(x.transpose() * data.y())).transpose()))
}

/// Single top-down sweep of rank-constrained Frobenius fits on the sample
/// covariance `S = YᵀY/N`.
///
/// For every block the residual `S − (fitted coarser levels)` is replaced by
/// its best PSD rank-`r_l` approximation; `d` is the remaining diagonal,
/// floored. Returns `(model, true)` with a random start when the largest
/// top-level block exceeds `cap`.
pub fn init_frobenius_sweep(
    data: &Dataset,
    partition: Arc<HierarchicalPartition>,
    ranks: RankAllocation,
    d_floor: f64,
    cap: usize,
) -> Result<(PsdMlr, bool)> {
    ranks.check_partition(&partition)?;
    check_dim("data columns", partition.n(), data.n_features())?;
    let largest = partition.block_sizes(0).iter().copied().max().unwrap_or(0);
    if largest > cap && ranks.factor_width() > 0 {
        return Ok((init_random(data, partition, ranks, 0)?, true));
    }
    let n = partition.n();
    let y = data.y();
    let samples = data.n_samples() as f64;
    let levels = partition.num_factor_levels();
    let mut factors: Vec<DMatrix<f64>> = (0..levels)
        .map(|l| DMatrix::zeros(n, ranks.rank(l)))
        .collect();
    for l in 0..levels {
        let r = ranks.rank(l);
        if r == 0 {
            continue;
        }
        let cum = ranks.column_offset(l);
        for k in 0..partition.num_blocks(l) {
            let range = partition.block_range(l, k);
            let yk = y.columns(range.start, range.len());
            let mut resid = yk.transpose() * yk / samples;
            if cum > 0 {
                let mut prefix = DMatrix::zeros(range.len(), cum);
                for (lp, f) in factors.iter().enumerate().take(l) {
                    prefix
                        .columns_mut(ranks.column_offset(lp), f.ncols())
                        .copy_from(&f.rows(range.start, range.len()));
                }
                resid -= &prefix * prefix.transpose();
            }
            let block = psd_truncation(&resid, r);
            factors[l]
                .rows_mut(range.start, range.len())
                .copy_from(&block);
        }
    }
    let moments = data.second_moments();
    let d = DVector::from_fn(n, |i, _| {
        let fitted: f64 = factors.iter().map(|f| f.row(i).norm_squared()).sum();
        (moments[i] - fitted).max(d_floor)
    });
    Ok((PsdMlr::new(partition, ranks, factors, d)?, false))
}

/// Random start: factor entries `N(0, 1)·√(v_j / (r − 1) / 2)` and
/// `d_j = v_j / 2`, with `v_j` the sample second moment of feature `j`.
pub fn init_random(
    data: &Dataset,
    partition: Arc<HierarchicalPartition>,
    ranks: RankAllocation,
    seed: u64,
) -> Result<PsdMlr> {
    ranks.check_partition(&partition)?;
    check_dim("data columns", partition.n(), data.n_features())?;
    let n = partition.n();
    let v = data.second_moments().map(|x| if x > 0.0 { x } else { 1.0 });
    let width = ranks.factor_width().max(1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors = (0..partition.num_factor_levels())
        .map(|l| {
            let mut f = DMatrix::zeros(n, ranks.rank(l));
            for i in 0..n {
                let scale = (v[i] / width / 2.0).sqrt();
                for c in 0..f.ncols() {
                    let z: f64 = rng.sample(StandardNormal);
                    f[(i, c)] = z * scale;
                }
            }
            f
        })
        .collect();
    PsdMlr::new(partition, ranks, factors, v / 2.0)
}

/// Runs EM from the configured start until the relative change of the
/// log-likelihood drops below `rel_tol` or `max_iters` M-steps were taken.
///
/// When the data carry covariates the loadings `B` are fitted jointly,
/// starting from ordinary least squares.
pub fn fit(
    data: &Dataset,
    partition: Arc<HierarchicalPartition>,
    ranks: RankAllocation,
    opts: &EmOptions,
) -> Result<FitResult> {
    opts.validate()?;
    ranks.check_partition(&partition)?;
    check_dim("data columns", partition.n(), data.n_features())?;
    let start = Instant::now();
    let floor = opts.resolve_floor(data);
    let mut b = ols_loadings(data)?;
    let centered = match data.x() {
        Some(_) => Dataset::new(data.residual(b.as_ref()))?,
        None => data.clone(),
    };
    let mut init_fallback = false;
    let mut model = match &opts.init {
        Init::FrobeniusSweep => {
            let (m, fallback) = init_frobenius_sweep(
                &centered,
                partition.clone(),
                ranks.clone(),
                floor,
                opts.dense_cap,
            )?;
            init_fallback = fallback;
            if fallback {
                init_random(&centered, partition.clone(), ranks.clone(), opts.seed)?
            } else {
                m
            }
        }
        Init::Random => init_random(&centered, partition.clone(), ranks.clone(), opts.seed)?,
        Init::Warm(m) => {
            if !m.partition().same_structure(&partition) || m.ranks() != &ranks {
                return Err(MlrError::Structural(
                    "warm start model does not match the hierarchy and ranks".into(),
                ));
            }
            m.clone()
        }
    };

    let mut rows = Vec::new();
    let mut prev: Option<f64> = None;
    let mut floored = 0;
    let mut status = FitStatus::MaxIters;
    for iter in 0..=opts.max_iters {
        let estep = e_step(&model, b.as_ref(), data).map_err(|e| match e {
            MlrError::Numerical(msg) => MlrError::Numerical(format!("iteration {iter}: {msg}")),
            other => other,
        })?;
        let ll = estep.loglik;
        if !ll.is_finite() {
            return Err(MlrError::NonFiniteLikelihood { iteration: iter });
        }
        let rel = prev.map_or(f64::NAN, |p| (ll - p).abs() / p.abs().max(1.0));
        rows.push(TraceRow {
            iter,
            loglik: ll,
            rel_change: rel,
            seconds: start.elapsed().as_secs_f64(),
        });
        if rel < opts.rel_tol {
            status = FitStatus::Converged;
            break;
        }
        if iter == opts.max_iters {
            break;
        }
        let next = m_step(&estep, data, partition.clone(), ranks.clone(), floor)?;
        model = next.model;
        if data.x().is_some() {
            b = next.b;
        }
        floored = next.floored;
        prev = Some(ll);
    }
    Ok(FitResult {
        model,
        b,
        trace: FitTrace {
            rows,
            status,
            floored,
            floor,
            init_fallback,
        },
    })
}

/// Alias of [`fit`] for data with covariates; errors if none are present.
pub fn fit_with_covariates(
    data: &Dataset,
    partition: Arc<HierarchicalPartition>,
    ranks: RankAllocation,
    opts: &EmOptions,
) -> Result<FitResult> {
    if data.x().is_none() {
        return Err(MlrError::InvalidArgument(
            "dataset has no covariates".into(),
        ));
    }
    fit(data, partition, ranks, opts)
}
