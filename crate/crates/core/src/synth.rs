//! Synthetic multilevel factor models and likelihood-based evaluation.
//!
//! Randomness comes from ChaCha8 with explicit stream splitting: stream 0
//! draws the model and stream 1 draws samples, so a model and its samples
//! are reproducible independently of each other.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{fit, init_frobenius_sweep, Dataset, EmOptions, Init};
use crate::error::{check_dim, MlrError, Result};
use crate::inverse::{invert, InverseMlr};
use crate::linalg::sym_eigen;
use crate::mlr::PsdMlr;
use crate::partition::{HierarchicalPartition, RankAllocation};

const MODEL_STREAM: u64 = 0;
const SAMPLE_STREAM: u64 = 1;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Random hierarchy with `levels` levels (including the singleton level) and
/// uneven blocks. Every non-leaf block splits into one to three children.
pub fn random_hierarchy<R: Rng + ?Sized>(
    n: usize,
    levels: usize,
    rng: &mut R,
) -> HierarchicalPartition {
    assert!(n >= 1 && levels >= 2, "need n >= 1 and at least two levels");
    let mut sizes = vec![vec![n]];
    for _ in 1..levels - 1 {
        let mut next = Vec::new();
        for &m in sizes.last().unwrap() {
            let children = rng.random_range(1..=m.min(3));
            let mut cuts: Vec<usize> = Vec::with_capacity(children + 1);
            cuts.push(0);
            while cuts.len() < children {
                let c = rng.random_range(1..m);
                if !cuts.contains(&c) {
                    cuts.push(c);
                }
            }
            cuts.push(m);
            cuts.sort_unstable();
            next.extend(cuts.windows(2).map(|w| w[1] - w[0]));
        }
        sizes.push(next);
    }
    // Explicit, so a factor level of singletons does not absorb the leaf level.
    sizes.push(vec![1; n]);
    HierarchicalPartition::from_sizes(&sizes).expect("random hierarchy is valid")
}

/// Model with standard normal factor entries and `d ~ U[0.5, 1.5]`.
pub fn random_model<R: Rng + ?Sized>(
    partition: Arc<HierarchicalPartition>,
    ranks: RankAllocation,
    rng: &mut R,
) -> PsdMlr {
    let n = partition.n();
    let factors = (0..partition.num_factor_levels())
        .map(|l| DMatrix::from_fn(n, ranks.rank(l), |_, _| rng.sample(StandardNormal)))
        .collect();
    let d = DVector::from_fn(n, |_, _| 0.5 + rng.random::<f64>());
    PsdMlr::new(partition, ranks, factors, d).expect("random model is valid")
}

/// Generator settings. `groups` holds the group count of every level; the
/// last entry is `n` (the singleton level).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub groups: Vec<usize>,
    pub ranks: Vec<usize>,
    pub snr: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// The scaled-down benchmark: `n = 500`, six levels, SNR 4, 80 samples.
    pub fn desk() -> Self {
        Self {
            groups: vec![1, 4, 8, 16, 32, 500],
            ranks: vec![10, 5, 4, 3, 2, 1],
            snr: 4.0,
            n_samples: 80,
            seed: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.groups.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.snr > 0.0) || !self.snr.is_finite() {
            return Err(MlrError::InvalidArgument(format!(
                "snr must be positive, got {}",
                self.snr
            )));
        }
        if self.n_samples == 0 {
            return Err(MlrError::InvalidArgument("N must be ≥ 1".into()));
        }
        self.partition()?;
        Ok(())
    }

    pub fn partition(&self) -> Result<(HierarchicalPartition, RankAllocation)> {
        let sizes = even_nested_sizes(&self.groups)?;
        let partition = HierarchicalPartition::from_sizes(&sizes)?;
        let ranks = RankAllocation::for_levels(&self.ranks, partition.num_levels())?;
        Ok((partition, ranks))
    }
}

/// Nested block sizes with the given group counts, each parent split as
/// evenly as possible. Every count must be a multiple of the one above it,
/// except the last, which is the number of features.
pub fn even_nested_sizes(groups: &[usize]) -> Result<Vec<Vec<usize>>> {
    let n = *groups
        .last()
        .ok_or_else(|| MlrError::InvalidArgument("no group counts given".into()))?;
    if n == 0 {
        return Err(MlrError::InvalidArgument("n must be positive".into()));
    }
    let mut sizes = vec![vec![n]];
    let inner = &groups[..groups.len() - 1];
    if inner.first().is_some_and(|&g| g != 1) {
        return Err(MlrError::InvalidArgument(
            "the top level must have one group".into(),
        ));
    }
    for w in inner.windows(2) {
        let (coarse, fine) = (w[0], w[1]);
        if fine % coarse != 0 || fine < coarse {
            return Err(MlrError::InvalidArgument(format!(
                "group count {fine} is not a multiple of {coarse}"
            )));
        }
        let split = fine / coarse;
        let mut next = Vec::with_capacity(fine);
        for &m in sizes.last().unwrap() {
            if m < split {
                return Err(MlrError::InvalidArgument(format!(
                    "cannot split a group of {m} features into {split}"
                )));
            }
            next.extend((0..split).map(|j| m / split + usize::from(j < m % split)));
        }
        sizes.push(next);
    }
    Ok(sizes)
}

/// A generated ground-truth model.
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    pub config: SynthConfig,
    pub truth: PsdMlr,
}

/// Draws the ground truth: standard normal factors and
/// `d_i ~ U[0, 2·mean(diag FFᵀ)/snr]`, with exact zeros redrawn.
pub fn generate(cfg: &SynthConfig) -> Result<SyntheticModel> {
    cfg.validate()?;
    let (partition, ranks) = cfg.partition()?;
    let n = partition.n();
    let mut rng = stream_rng(cfg.seed, MODEL_STREAM);
    let mut factors = Vec::with_capacity(partition.num_factor_levels());
    for l in 0..partition.num_factor_levels() {
        let r = ranks.rank(l);
        let mut f = DMatrix::zeros(n, r);
        for i in 0..n {
            for j in 0..r {
                f[(i, j)] = rng.sample(StandardNormal);
            }
        }
        factors.push(f);
    }
    let signal: f64 = factors.iter().map(|f| f.norm_squared()).sum::<f64>() / n as f64;
    let upper = 2.0 * signal / cfg.snr;
    let d = if upper > 0.0 {
        let dist =
            Uniform::new(0.0, upper).map_err(|e| MlrError::InvalidArgument(e.to_string()))?;
        DVector::from_iterator(
            n,
            (0..n).map(|_| loop {
                let v: f64 = dist.sample(&mut rng);
                if v > 0.0 {
                    break v;
                }
            }),
        )
    } else {
        // No factors at all: fall back to unit noise.
        DVector::from_element(n, 1.0)
    };
    let truth = PsdMlr::new(Arc::new(partition), ranks, factors, d)?;
    Ok(SyntheticModel {
        config: cfg.clone(),
        truth,
    })
}

impl SyntheticModel {
    /// Draws `count` samples `y = Fz + e` from the truth.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Dataset> {
        sample_model(&self.truth, count, seed)
    }
}

/// Draws `count` samples `y = Fz + e` with `z ~ N(0, I_s)`, `e ~ N(0, D)`.
pub fn sample_model(model: &PsdMlr, count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(MlrError::InvalidArgument("N must be ≥ 1".into()));
    }
    let partition = model.partition();
    let n = model.n();
    let sd = model.d().map(f64::sqrt);
    let mut rng = stream_rng(seed, SAMPLE_STREAM);
    let mut y = DMatrix::zeros(count, n);
    let mut row = DVector::zeros(n);
    for t in 0..count {
        for i in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            row[i] = sd[i] * e;
        }
        for (l, f) in model.factor_levels().iter().enumerate() {
            let r = f.ncols();
            if r == 0 {
                continue;
            }
            for k in 0..partition.num_blocks(l) {
                let z = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
                let range = partition.block_range(l, k);
                let contrib = f.rows(range.start, range.len()) * z;
                let mut target = row.rows_mut(range.start, range.len());
                target += contrib;
            }
        }
        y.row_mut(t).copy_from(&row.transpose());
    }
    Dataset::new(y)
}

/// `tr(Σ_fit⁻¹ Σ_true)` from the factored forms in `O(n r² L)`.
fn trace_inverse_times(inv: &InverseMlr, truth: &PsdMlr) -> f64 {
    let partition = truth.partition();
    let dinv = inv.dinv();
    // tr(FᵀD⁻¹F) plus tr(diag(Σ⁻¹) D_true).
    let mut total: f64 = 0.0;
    for f in truth.factor_levels() {
        for (i, row) in f.row_iter().enumerate() {
            total += dinv[i] * row.norm_squared();
        }
    }
    total += inv.diag_inverse().dot(truth.d());
    // − Σ ‖H_aᵀ F_b‖² over overlapping block pairs.
    for (a, h) in inv.h_levels().iter().enumerate() {
        if h.ncols() == 0 {
            continue;
        }
        for (b, f) in truth.factor_levels().iter().enumerate() {
            if f.ncols() == 0 {
                continue;
            }
            let fine = a.max(b);
            for k in 0..partition.num_blocks(fine) {
                let range = partition.block_range(fine, k);
                let hk = h.rows(range.start, range.len());
                let fk = f.rows(range.start, range.len());
                total -= (hk.transpose() * fk).norm_squared();
            }
        }
    }
    total
}

/// Expected log-likelihood of one sample from `truth` under `fit`:
/// `−(n/2) log 2π − ½ log det Σ_fit − ½ tr(Σ_fit⁻¹ Σ_true)`.
pub fn expected_ll(fit: &PsdMlr, truth: &PsdMlr) -> Result<f64> {
    if !fit.partition().same_structure(truth.partition()) {
        return Err(MlrError::PartitionMismatch {
            left: fit.n(),
            right: truth.n(),
        });
    }
    let inv = invert(fit)?;
    let n = fit.n() as f64;
    let trace = trace_inverse_times(&inv, truth);
    Ok(-0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * inv.logdet() - 0.5 * trace)
}

fn dense_logdet(
    s: &DMatrix<f64>,
    what: &str,
) -> Result<(f64, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
    let chol = ((s + s.transpose()) * 0.5)
        .cholesky()
        .ok_or_else(|| MlrError::Singular(format!("{what} is not positive definite")))?;
    let logdet = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|v| v.ln())
            .sum::<f64>();
    Ok((logdet, chol))
}

/// Average log-likelihood `ℓ(Σ; Y)/N` for data with sample covariance `S`.
pub fn average_ll_dense(s: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    check_dim("covariance size", s.nrows(), sigma.nrows())?;
    let n = s.nrows() as f64;
    let (logdet, chol) = dense_logdet(sigma, "covariance")?;
    let trace = chol.solve(s).trace();
    Ok(-0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet - 0.5 * trace)
}

/// Second-order approximation of the average log-likelihood around the
/// sample covariance, `ℓ(S; Y)/N − ¼ Tr((I − S⁻¹Σ)²)`.
///
/// The correction is evaluated as `‖I − L⁻¹ΣL⁻ᵀ‖_F²` with `S = LLᵀ`, which
/// is the symmetric form of the trace. It equals `‖I − S⁻¹Σ‖_F²` when `S`
/// and `Σ` commute; in general only the trace form has a third-order
/// remainder.
pub fn quadratic_ll_approx_dense(s: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    check_dim("covariance rows", s.nrows(), sigma.nrows())?;
    check_dim("covariance columns", s.ncols(), sigma.ncols())?;
    let n = s.nrows();
    let (logdet, chol) = dense_logdet(s, "sample covariance")
        .map_err(|_| MlrError::Singular("sample covariance is singular; consider shrinkage".into()))?;
    let at_s = -0.5 * n as f64 * ((2.0 * std::f64::consts::PI).ln() + 1.0) - 0.5 * logdet;
    let l = chol.l();
    let half = l
        .solve_lower_triangular(sigma)
        .ok_or_else(|| MlrError::Singular("sample covariance is singular; consider shrinkage".into()))?;
    let whitened = l
        .solve_lower_triangular(&half.transpose())
        .ok_or_else(|| MlrError::Singular("sample covariance is singular; consider shrinkage".into()))?;
    let correction = (DMatrix::identity(n, n) - whitened).norm_squared();
    Ok(at_s - 0.25 * correction)
}

pub fn quadratic_ll_approx(s: &DMatrix<f64>, model: &PsdMlr, cap: usize) -> Result<f64> {
    quadratic_ll_approx_dense(s, &model.to_dense(cap)?)
}

/// Standard deviation `√(n / 2N)` of the average log-likelihood.
pub fn ll_std(n: usize, n_samples: usize) -> f64 {
    (n as f64 / (2.0 * n_samples as f64)).sqrt()
}

/// Mean and standard deviation of `ℓ/N` for `N` samples drawn from `model`.
pub fn ll_mean_std_under_model(model: &PsdMlr, n_samples: usize) -> Result<(f64, f64)> {
    if n_samples == 0 {
        return Err(MlrError::InvalidArgument("N must be ≥ 1".into()));
    }
    let inv = invert(model)?;
    let n = model.n() as f64;
    let mean = -0.5 * n * ((2.0 * std::f64::consts::PI).ln() + 1.0) - 0.5 * inv.logdet();
    Ok((mean, ll_std(model.n(), n_samples)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    /// Expected log-likelihood of the EM fit.
    pub ell_mle: f64,
    /// Expected log-likelihood of the Frobenius-sweep baseline.
    pub ell_frob: f64,
    pub diff: f64,
    /// Observed-data log-likelihoods of both fits on the trial sample.
    pub observed_mle: f64,
    pub observed_frob: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline: String,
    pub trials: Vec<TrialResult>,
    pub mean: f64,
    pub std: f64,
    pub fraction_positive: f64,
}

impl ComparisonReport {
    fn from_trials(trials: Vec<TrialResult>) -> Self {
        let count = trials.len();
        let (mean, std, fraction_positive) = if count == 0 {
            (0.0, 0.0, 0.0)
        } else {
            let mean = trials.iter().map(|t| t.diff).sum::<f64>() / count as f64;
            let var = if count > 1 {
                trials.iter().map(|t| (t.diff - mean).powi(2)).sum::<f64>() / (count - 1) as f64
            } else {
                0.0
            };
            let positive = trials.iter().filter(|t| t.diff > 0.0).count();
            (mean, var.sqrt(), positive as f64 / count as f64)
        };
        Self {
            baseline: "frobenius_sweep".into(),
            trials,
            mean,
            std,
            fraction_positive,
        }
    }
}

/// Runs `trials` independent sample draws from the generated truth and
/// compares the EM fit (warm-started from the sweep) against the single
/// Frobenius sweep by expected log-likelihood. Trials run in parallel with
/// per-trial seeds `seed + t`.
pub fn compare_methods(
    cfg: &SynthConfig,
    trials: usize,
    seed: u64,
    opts: &EmOptions,
) -> Result<ComparisonReport> {
    let model = generate(cfg)?;
    let partition = model.truth.partition_arc().clone();
    let ranks = model.truth.ranks().clone();
    let results: Result<Vec<TrialResult>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let data = model.sample(cfg.n_samples, seed.wrapping_add(t as u64))?;
            let floor = opts.resolve_floor(&data);
            let (baseline, _) = init_frobenius_sweep(
                &data,
                partition.clone(),
                ranks.clone(),
                floor,
                opts.dense_cap,
            )?;
            let mut trial_opts = opts.clone();
            trial_opts.init = Init::Warm(baseline.clone());
            let result = fit(&data, partition.clone(), ranks.clone(), &trial_opts)?;
            let ell_mle = expected_ll(&result.model, &model.truth)?;
            let ell_frob = expected_ll(&baseline, &model.truth)?;
            let observed_frob = result
                .trace
                .rows
                .first()
                .map(|r| r.loglik)
                .unwrap_or(f64::NAN);
            let observed_mle = result
                .trace
                .rows
                .last()
                .map(|r| r.loglik)
                .unwrap_or(f64::NAN);
            Ok(TrialResult {
                trial: t,
                ell_mle,
                ell_frob,
                diff: ell_mle - ell_frob,
                observed_mle,
                observed_frob,
                iterations: result.trace.rows.len().saturating_sub(1),
            })
        })
        .collect();
    Ok(ComparisonReport::from_trials(results?))
}

/// Sample covariance `YᵀY / N` (the model has zero mean).
pub fn sample_covariance(y: &DMatrix<f64>) -> DMatrix<f64> {
    y.transpose() * y / y.nrows() as f64
}

/// Top `rank` eigenpairs of a symmetric matrix as a PSD factor `Q√Λ`, with
/// negative eigenvalues clipped to zero.
pub(crate) fn psd_truncation(a: &DMatrix<f64>, rank: usize) -> DMatrix<f64> {
    let (values, vectors) = sym_eigen(a);
    let keep = rank.min(values.len());
    let mut out = DMatrix::zeros(a.nrows(), rank);
    for j in 0..keep {
        let scale = values[j].max(0.0).sqrt();
        out.set_column(j, &(vectors.column(j) * scale));
    }
    out
}
