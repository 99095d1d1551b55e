use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde_json::json;

use mlrfit::cholesky::{factorize, schur_complement_check};
use mlrfit::em::{fit, log_likelihood_with_mean, Dataset, EmOptions, FitStatus, Init};
use mlrfit::io::{
    attach_covariates, default_labels, hierarchy_spec, read_table, write_histogram, write_table,
    write_trace, InverseFile, ModelFile, ModelMetadata,
};
use mlrfit::product::identity_residual;
use mlrfit::synth::{compare_methods, expected_ll, generate, ll_mean_std_under_model, SynthConfig};
use mlrfit::{invert, MlrError, PsdMlr, RankAllocation, Result};

#[derive(Parser)]
#[command(
    name = "mlrfit",
    version,
    about = "Fit and evaluate multilevel factor models"
)]
struct Cli {
    /// Worker threads for parallel sections (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to data by EM. Exits with 2 if max-iters was reached.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        hierarchy: PathBuf,
        #[arg(long)]
        covariates: Option<PathBuf>,
        /// Comma separated ranks, overriding the hierarchy file.
        #[arg(long, value_delimiter = ',')]
        ranks: Option<Vec<usize>>,
        /// `frob`, `random` or `warm:PATH`.
        #[arg(long, default_value = "frob")]
        init: String,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 300)]
        max_iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        d_floor: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Draw a synthetic model and samples from a config file.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_model: PathBuf,
        #[arg(long)]
        out_data: PathBuf,
        #[arg(long)]
        out_hierarchy: Option<PathBuf>,
        #[arg(long)]
        n_samples: Option<usize>,
        /// Sample seed (defaults to the config seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Log-likelihood of data under a model, and expected log-likelihood
    /// against a known truth.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        covariates: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Verify the inverse and factorization of a model.
    Check {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 2000)]
        dense_cap: usize,
        #[arg(long)]
        inverse_out: Option<PathBuf>,
        #[arg(long)]
        cholesky_out: Option<PathBuf>,
    },
    /// Compare EM against the Frobenius sweep on repeated synthetic draws.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long)]
        out_report: Option<PathBuf>,
        #[arg(long)]
        out_histogram: Option<PathBuf>,
    },
}

const EXIT_ERROR: u8 = 1;
const EXIT_MAX_ITERS: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;

const IDENTITY_TOL: f64 = 1e-8;
const RECONSTRUCTION_TOL: f64 = 1e-10;
const LOGDET_TOL: f64 = 1e-9;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            return report(MlrError::InvalidArgument(e.to_string()));
        }
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => report(e),
    }
}

fn report(e: MlrError) -> ExitCode {
    let payload = json!({ "error": { "code": e.code(), "message": e.to_string() } });
    eprintln!("{payload}");
    ExitCode::from(EXIT_ERROR)
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Fit {
            data,
            hierarchy,
            covariates,
            ranks,
            init,
            tol,
            max_iters,
            seed,
            d_floor,
            out,
            trace,
        } => {
            let loaded = mlrfit::io::read_dataset(&data, &hierarchy)?;
            let ranks = match ranks {
                Some(r) => RankAllocation::for_levels(&r, loaded.partition.num_levels())?,
                None => loaded.ranks.clone().ok_or_else(|| {
                    MlrError::InvalidArgument(
                        "no ranks given in the hierarchy or on the command line".into(),
                    )
                })?,
            };
            let dataset = match &covariates {
                Some(path) => attach_covariates(loaded.dataset.clone(), path)?,
                None => loaded.dataset.clone(),
            };
            let init_mode = parse_init(&init)?;
            let opts = EmOptions {
                max_iters,
                rel_tol: tol,
                d_floor,
                init: init_mode,
                seed,
                ..Default::default()
            };
            let result = fit(&dataset, loaded.partition.clone(), ranks, &opts)?;
            let status = match result.trace.status {
                FitStatus::Converged => "converged",
                FitStatus::MaxIters => "max_iters",
            };
            let metadata = ModelMetadata {
                source: Some("fit".into()),
                seed: Some(seed),
                init: Some(init),
                max_iters: Some(max_iters),
                rel_tol: Some(tol),
                d_floor: Some(result.trace.floor),
                floored: Some(result.trace.floored),
                status: Some(status.into()),
                iterations: Some(result.trace.iterations()),
                final_loglik: Some(result.trace.final_loglik()),
                init_fallback: result.trace.init_fallback.then_some(true),
            };
            ModelFile::from_model(
                &result.model,
                result.b.as_ref(),
                Some(loaded.features.clone()),
                metadata,
            )
            .write(&out)?;
            if let Some(path) = trace {
                write_trace(BufWriter::new(File::create(path)?), &result.trace)?;
            }
            println!(
                "{}",
                json!({
                    "status": status,
                    "iterations": result.trace.iterations(),
                    "loglik": result.trace.final_loglik(),
                    "floored": result.trace.floored,
                    "init_fallback": result.trace.init_fallback,
                })
            );
            Ok(match result.trace.status {
                FitStatus::Converged => 0,
                FitStatus::MaxIters => EXIT_MAX_ITERS,
            })
        }
        Command::Generate {
            config,
            out_model,
            out_data,
            out_hierarchy,
            n_samples,
            seed,
        } => {
            let cfg: SynthConfig = serde_json::from_reader(File::open(&config)?)?;
            let model = generate(&cfg)?;
            let count = n_samples.unwrap_or(cfg.n_samples);
            let data = model.sample(count, seed.unwrap_or(cfg.seed))?;
            let labels = default_labels(model.truth.n());
            let metadata = ModelMetadata {
                source: Some("generate".into()),
                seed: Some(cfg.seed),
                ..Default::default()
            };
            ModelFile::from_model(&model.truth, None, Some(labels.clone()), metadata)
                .write(&out_model)?;
            write_table(BufWriter::new(File::create(&out_data)?), &labels, data.y())?;
            if let Some(path) = out_hierarchy {
                let spec = hierarchy_spec(model.truth.partition(), model.truth.ranks(), labels);
                std::fs::write(path, serde_json::to_string_pretty(&spec)? + "\n")?;
            }
            println!("{}", json!({ "n": model.truth.n(), "n_samples": count }));
            Ok(0)
        }
        Command::Eval {
            model,
            data,
            covariates,
            truth,
        } => {
            let file = ModelFile::read(&model)?;
            let (fitted, b) = file.to_model()?;
            let mut dataset = load_for_model(&file, &fitted, &data)?;
            if let Some(path) = &covariates {
                dataset = attach_covariates(dataset, path)?;
            }
            let samples = dataset.n_samples();
            let ll = log_likelihood_with_mean(&fitted, b.as_ref(), &dataset)?;
            let mut out = json!({
                "n": fitted.n(),
                "n_samples": samples,
                "loglik": ll,
                "loglik_per_sample": ll / samples as f64,
            });
            if let Some(path) = truth {
                let (truth_model, _) = ModelFile::read(&path)?.to_model()?;
                let (mean, std) = ll_mean_std_under_model(&truth_model, samples)?;
                out["expected_ll"] = json!(expected_ll(&fitted, &truth_model)?);
                out["truth_ll_mean"] = json!(mean);
                out["truth_ll_std"] = json!(std);
            }
            println!("{out}");
            Ok(0)
        }
        Command::Check {
            model,
            dense_cap,
            inverse_out,
            cholesky_out,
        } => {
            let (m, _) = ModelFile::read(&model)?.to_model()?;
            let (out, ok) = check_model(
                &m,
                dense_cap,
                inverse_out.as_deref(),
                cholesky_out.as_deref(),
            )?;
            println!("{out}");
            Ok(if ok { 0 } else { EXIT_CHECK_FAILED })
        }
        Command::Compare {
            config,
            trials,
            seed,
            max_iters,
            tol,
            out_report,
            out_histogram,
        } => {
            let cfg: SynthConfig = serde_json::from_reader(File::open(&config)?)?;
            let opts = EmOptions {
                max_iters,
                rel_tol: tol,
                ..Default::default()
            };
            let report = compare_methods(&cfg, trials, seed, &opts)?;
            if let Some(path) = out_report {
                std::fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
            }
            if let Some(path) = out_histogram {
                write_histogram(BufWriter::new(File::create(path)?), &report)?;
            }
            println!(
                "{}",
                json!({
                    "baseline": report.baseline,
                    "trials": report.trials.len(),
                    "mean": report.mean,
                    "std": report.std,
                    "fraction_positive": report.fraction_positive,
                })
            );
            Ok(0)
        }
    }
}

fn parse_init(text: &str) -> Result<Init> {
    match text {
        "frob" => Ok(Init::FrobeniusSweep),
        "random" => Ok(Init::Random),
        other => match other.strip_prefix("warm:") {
            Some(path) => Ok(Init::Warm(ModelFile::read(Path::new(path))?.to_model()?.0)),
            None => Err(MlrError::InvalidArgument(format!(
                "unknown init `{other}` (expected frob, random or warm:PATH)"
            ))),
        },
    }
}

/// Reads a data CSV into the model's contiguous order, matching columns by
/// label when the model carries feature labels.
fn load_for_model(file: &ModelFile, model: &PsdMlr, path: &Path) -> Result<Dataset> {
    let table = read_table(File::open(path)?)?;
    if table.values.nrows() == 0 {
        return Err(MlrError::InvalidArgument("N must be ≥ 1".into()));
    }
    let cols: Vec<usize> = match &file.features {
        Some(features) => {
            let index: HashMap<&str, usize> = table
                .labels
                .iter()
                .enumerate()
                .map(|(i, l)| (l.as_str(), i))
                .collect();
            if let Some(extra) = table.labels.iter().find(|l| !features.contains(l)) {
                return Err(MlrError::UnknownFeature(extra.clone()));
            }
            features
                .iter()
                .map(|f| {
                    index
                        .get(f.as_str())
                        .copied()
                        .ok_or_else(|| MlrError::MissingFeature(f.clone()))
                })
                .collect::<Result<_>>()?
        }
        None => {
            if table.labels.len() != model.n() {
                return Err(MlrError::Dimension {
                    what: "data columns",
                    expected: model.n(),
                    found: table.labels.len(),
                });
            }
            model.partition().perm().to_vec()
        }
    };
    Dataset::new(DMatrix::from_fn(
        table.values.nrows(),
        cols.len(),
        |t, i| table.values[(t, cols[i])],
    ))
}

fn check_model(
    m: &PsdMlr,
    cap: usize,
    inverse_out: Option<&Path>,
    cholesky_out: Option<&Path>,
) -> Result<(serde_json::Value, bool)> {
    let n = m.n();
    let inv = invert(m)?;
    let chol = factorize(m)?;
    let chol_logdet = chol.logdet()?;
    let logdet_gap = (inv.logdet() - chol_logdet).abs();
    let mut ok = logdet_gap < LOGDET_TOL;

    // Identity residual: dense product when small, random probes otherwise.
    let identity = if n <= cap {
        identity_residual(m, &inv, cap)? / (n as f64).sqrt()
    } else {
        let probes = DMatrix::from_fn(n, 4, |i, j| ((i * 7 + j * 13) % 17) as f64 - 8.0);
        let back = m.apply(&inv.apply(&probes)?)?;
        (back - &probes).norm() / probes.norm()
    };
    ok &= identity < IDENTITY_TOL;

    let s = m.ranks().num_factors(m.partition());
    let (reconstruction, schur, dense_logdet_gap) = if n + s <= cap {
        let e = mlrfit::cholesky::build_expanded_dense(m, cap)?;
        let l = chol.dense_l(cap)?;
        let rec = (&l * chol.dense_d(cap)? * l.transpose() - &e).norm() / e.norm();
        let schur = schur_complement_check(m, cap)?;
        let dense = m.to_dense(cap)?;
        let gap = dense.cholesky().map(|c| {
            (2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() - inv.logdet()).abs()
        });
        ok &= rec < RECONSTRUCTION_TOL && schur < RECONSTRUCTION_TOL;
        if let Some(g) = gap {
            ok &= g < LOGDET_TOL;
        }
        (Some(rec), Some(schur), gap)
    } else {
        (None, None, None)
    };
    let (pos, neg) = chol.inertia();
    ok &= pos == n && neg == s;

    if let Some(path) = inverse_out {
        InverseFile::from_inverse(&inv).write(path)?;
    }
    if let Some(path) = cholesky_out {
        let mut w = BufWriter::new(File::create(path)?);
        chol.write_binary(&mut w)?;
        w.flush()?;
    }
    let diag_min = m.d().min();
    let out = json!({
        "n": n,
        "s": s,
        "mlr_rank": m.ranks().mlr_rank(),
        "logdet": inv.logdet(),
        "logdet_cholesky": chol_logdet,
        "logdet_gap": logdet_gap,
        "logdet_dense_gap": dense_logdet_gap,
        "identity_residual": identity,
        "cholesky_reconstruction": reconstruction,
        "schur_residual": schur,
        "inertia": [pos, neg],
        "nnz_l": chol.nnz(),
        "d_min": diag_min,
        "ok": ok,
    });
    Ok((out, ok))
}
