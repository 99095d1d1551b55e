//! File formats: CSV data, hierarchy and model JSON, trace and report CSVs.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::em::{Dataset, FitTrace};
use crate::error::{check_dim, MlrError, Result};
use crate::inverse::InverseMlr;
use crate::mlr::{CompressedForm, PsdMlr};
use crate::partition::{HierarchicalPartition, HierarchySpec, RankAllocation};
use crate::synth::ComparisonReport;

pub const SCHEMA_VERSION: u32 = 1;

/// A labelled numeric table read from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub labels: Vec<String>,
    /// Rows are records.
    pub values: DMatrix<f64>,
}

/// Reads a CSV with a header row. Cells must parse as finite decimal
/// numbers; errors carry the 1-based file line and column.
pub fn read_table<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let labels: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut seen = HashMap::new();
    for label in &labels {
        if seen.insert(label.as_str(), ()).is_some() {
            return Err(MlrError::DuplicateFeature(label.clone()));
        }
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (t, record) in rdr.records().enumerate() {
        let record = record?;
        let line = t + 2;
        if record.len() != labels.len() {
            return Err(MlrError::Parse {
                row: line,
                column: record.len().min(labels.len()) + 1,
                message: format!("expected {} cells, found {}", labels.len(), record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let value: f64 = cell.parse().map_err(|_| MlrError::Parse {
                row: line,
                column: c + 1,
                message: format!("`{cell}` is not a number"),
            })?;
            if !value.is_finite() {
                return Err(MlrError::Parse {
                    row: line,
                    column: c + 1,
                    message: format!("`{cell}` is not finite"),
                });
            }
            data.push(value);
        }
        rows += 1;
    }
    Ok(Table {
        values: DMatrix::from_row_slice(rows, labels.len(), &data),
        labels,
    })
}

pub fn write_table<W: Write>(writer: W, labels: &[String], values: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(labels)?;
    for row in values.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Data permuted into the contiguous order of its hierarchy.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: Dataset,
    pub partition: Arc<HierarchicalPartition>,
    pub ranks: Option<RankAllocation>,
    /// Feature labels in contiguous order.
    pub features: Vec<String>,
}

/// Reorders the columns of `table` so that column `i` holds `order[i]`.
fn select_columns(table: &Table, order: &[String]) -> Result<DMatrix<f64>> {
    let index: HashMap<&str, usize> = table
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let cols: Vec<usize> = order
        .iter()
        .map(|l| {
            index
                .get(l.as_str())
                .copied()
                .ok_or_else(|| MlrError::MissingFeature(l.clone()))
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(
        table.values.nrows(),
        cols.len(),
        |t, i| table.values[(t, cols[i])],
    ))
}

/// Combines a data table with a hierarchy. Columns are matched by label
/// when the hierarchy lists features, otherwise taken in file order.
pub fn assemble_dataset(table: &Table, spec: &HierarchySpec) -> Result<LoadedData> {
    if table.values.nrows() == 0 {
        return Err(MlrError::InvalidArgument("N must be ≥ 1".into()));
    }
    let (partition, ranks) = spec.build()?;
    let raw_labels: Vec<String> = match &spec.features {
        Some(features) => {
            let known: HashMap<&str, ()> = features.iter().map(|f| (f.as_str(), ())).collect();
            if known.len() != features.len() {
                let mut seen = HashMap::new();
                for f in features {
                    if seen.insert(f.as_str(), ()).is_some() {
                        return Err(MlrError::DuplicateFeature(f.clone()));
                    }
                }
            }
            if let Some(unknown) = table
                .labels
                .iter()
                .find(|l| !known.contains_key(l.as_str()))
            {
                return Err(MlrError::UnknownFeature(unknown.clone()));
            }
            features.clone()
        }
        None => {
            check_dim("data columns", partition.n(), table.labels.len())?;
            table.labels.clone()
        }
    };
    let features: Vec<String> = partition
        .perm()
        .iter()
        .map(|&j| raw_labels[j].clone())
        .collect();
    let y = select_columns(table, &features)?;
    Ok(LoadedData {
        dataset: Dataset::new(y)?,
        partition: Arc::new(partition),
        ranks,
        features,
    })
}

pub fn read_hierarchy(path: &Path) -> Result<HierarchySpec> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn read_dataset(data: &Path, hierarchy: &Path) -> Result<LoadedData> {
    let table = read_table(BufReader::new(File::open(data)?))?;
    assemble_dataset(&table, &read_hierarchy(hierarchy)?)
}

/// Reads covariates (`N × p`, any labels) and attaches them to `data`.
pub fn attach_covariates(data: Dataset, path: &Path) -> Result<Dataset> {
    let table = read_table(BufReader::new(File::open(path)?))?;
    Dataset::with_covariates(data.y().clone(), table.values)
}

/// Fit provenance stored alongside a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_floor: Option<f64>,
    /// Number of `d` entries held at the floor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floored: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loglik: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_fallback: Option<bool>,
}

/// Versioned JSON model: the compressed factors `F̄` row by row and `d`, in
/// contiguous feature order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    /// Block sizes of every level, coarsest first.
    pub levels: Vec<Vec<usize>>,
    pub ranks: Vec<usize>,
    pub fbar: Vec<Vec<f64>>,
    pub d: Vec<f64>,
    /// Covariate loadings, `n × p` by rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    /// Labels of the contiguous features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<String>>,
    /// Raw feature index at every contiguous position.
    pub permutation: Vec<usize>,
    #[serde(default)]
    pub metadata: ModelMetadata,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize, what: &'static str) -> Result<DMatrix<f64>> {
    for r in rows {
        check_dim(what, ncols, r.len())?;
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl ModelFile {
    pub fn from_model(
        model: &PsdMlr,
        b: Option<&DMatrix<f64>>,
        features: Option<Vec<String>>,
        metadata: ModelMetadata,
    ) -> Self {
        let partition = model.partition();
        let compressed = model.pack_compressed();
        Self {
            schema_version: SCHEMA_VERSION,
            levels: partition.level_sizes().to_vec(),
            ranks: model.ranks().as_slice().to_vec(),
            fbar: rows_of(&compressed.fbar),
            d: compressed.d.iter().copied().collect(),
            b: b.map(rows_of),
            features,
            permutation: partition.perm().to_vec(),
            metadata,
        }
    }

    pub fn partition(&self) -> Result<HierarchicalPartition> {
        HierarchicalPartition::from_sizes_with_perm(&self.levels, self.permutation.clone())
    }

    pub fn to_model(&self) -> Result<(PsdMlr, Option<DMatrix<f64>>)> {
        let partition = Arc::new(self.partition()?);
        let ranks = RankAllocation::for_levels(&self.ranks, partition.num_levels())?;
        check_dim("fbar rows", partition.n(), self.fbar.len())?;
        let fbar = matrix_from_rows(&self.fbar, ranks.factor_width(), "fbar row width")?;
        let compressed = CompressedForm {
            fbar,
            d: DVector::from_vec(self.d.clone()),
        };
        let model = PsdMlr::unpack_compressed(partition, ranks, &compressed)?;
        let b = match &self.b {
            Some(rows) => {
                check_dim("covariate loading rows", model.n(), rows.len())?;
                let p = rows.first().map_or(0, Vec::len);
                Some(matrix_from_rows(rows, p, "covariate loading width")?)
            }
            None => None,
        };
        Ok((model, b))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses JSON, checking the schema version before the payload.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        check_version(&value)?;
        Ok(serde_json::from_value(value)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_json()?.as_bytes())?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn check_version(value: &serde_json::Value) -> Result<()> {
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| MlrError::Structural("missing schema_version".into()))?;
    if found != SCHEMA_VERSION as u64 {
        return Err(MlrError::SchemaVersion {
            expected: SCHEMA_VERSION,
            found: found.min(u32::MAX as u64) as u32,
        });
    }
    Ok(())
}

/// JSON form of `Σ⁻¹ = D⁻¹ − Σ_l H_lH_lᵀ`; `sign` records that the
/// factors enter negatively.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseFile {
    pub schema_version: u32,
    pub levels: Vec<Vec<usize>>,
    pub ranks: Vec<usize>,
    pub sign: i32,
    pub hbar: Vec<Vec<f64>>,
    pub dinv: Vec<f64>,
    pub logdet: f64,
}

impl InverseFile {
    pub fn from_inverse(inv: &InverseMlr) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            levels: inv.partition().level_sizes().to_vec(),
            ranks: inv.ranks().as_slice().to_vec(),
            sign: -1,
            hbar: rows_of(&inv.compressed_h()),
            dinv: inv.dinv().iter().copied().collect(),
            logdet: inv.logdet(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Writes `iter,loglik,rel_change,seconds`; the first change is empty.
pub fn write_trace<W: Write>(writer: W, trace: &FitTrace) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["iter", "loglik", "rel_change", "seconds"])?;
    for row in &trace.rows {
        let rel = if row.rel_change.is_nan() {
            String::new()
        } else {
            row.rel_change.to_string()
        };
        w.write_record([
            row.iter.to_string(),
            row.loglik.to_string(),
            rel,
            row.seconds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `trial,ell_mle,ell_frob,diff`.
pub fn write_histogram<W: Write>(writer: W, report: &ComparisonReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["trial", "ell_mle", "ell_frob", "diff"])?;
    for t in &report.trials {
        w.write_record([
            t.trial.to_string(),
            t.ell_mle.to_string(),
            t.ell_frob.to_string(),
            t.diff.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Default labels `f0, f1, …`.
pub fn default_labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("f{i}")).collect()
}

/// Hierarchy JSON for a contiguous partition with the given labels.
pub fn hierarchy_spec(
    partition: &HierarchicalPartition,
    ranks: &RankAllocation,
    features: Vec<String>,
) -> HierarchySpec {
    HierarchySpec {
        n: Some(partition.n()),
        features: Some(features),
        levels: Some(partition.level_sizes().to_vec()),
        assignments: None,
        ranks: Some(ranks.as_slice().to_vec()),
    }
}
