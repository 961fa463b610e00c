//! Count-table ingest and CSV/JSON output.
//!
//! Counts are TSV/CSV with taxa as rows: first column taxon id, header row
//! sample ids. A companion metadata CSV is keyed by sample id and carries
//! the condition label plus optional vessel, timepoint, and external
//! log-scale columns.

use crate::decisions::DecisionTable;
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-sample covariates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample: String,
    /// Two-level condition label (false = control/reference level).
    pub condition: bool,
    pub vessel: Option<String>,
    pub timepoint: Option<bool>,
    /// External log-scale measurement, when available.
    pub log_scale: Option<f64>,
}

/// A D x N table of nonnegative integer counts with per-sample covariates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountTable {
    counts: DMatrix<u64>,
    taxa: Vec<String>,
    samples: Vec<String>,
    meta: Vec<SampleMeta>,
}

impl CountTable {
    pub fn new(
        counts: DMatrix<u64>,
        taxa: Vec<String>,
        samples: Vec<String>,
        condition: Vec<bool>,
    ) -> Result<Self> {
        let meta = samples
            .iter()
            .zip(&condition)
            .map(|(s, &c)| SampleMeta {
                sample: s.clone(),
                condition: c,
                vessel: None,
                timepoint: None,
                log_scale: None,
            })
            .collect();
        Self::with_meta(counts, taxa, samples, meta)
    }

    pub fn with_meta(
        counts: DMatrix<u64>,
        taxa: Vec<String>,
        samples: Vec<String>,
        meta: Vec<SampleMeta>,
    ) -> Result<Self> {
        if counts.nrows() != taxa.len() || counts.ncols() != samples.len() {
            return Err(Error::dim(format!(
                "count table: {}x{} counts but {} taxa and {} samples",
                counts.nrows(),
                counts.ncols(),
                taxa.len(),
                samples.len()
            )));
        }
        if meta.len() != samples.len() {
            return Err(Error::invalid_data(format!(
                "count table: {} samples but {} metadata rows",
                samples.len(),
                meta.len()
            )));
        }
        for (s, m) in samples.iter().zip(&meta) {
            if s != &m.sample {
                return Err(Error::invalid_data(format!(
                    "count table: metadata row for '{}' does not match sample '{s}'",
                    m.sample
                )));
            }
        }
        check_unique(&taxa, "taxon")?;
        check_unique(&samples, "sample")?;
        Ok(CountTable {
            counts,
            taxa,
            samples,
            meta,
        })
    }

    pub fn counts(&self) -> &DMatrix<u64> {
        &self.counts
    }

    pub fn taxa(&self) -> &[String] {
        &self.taxa
    }

    pub fn samples(&self) -> &[String] {
        &self.samples
    }

    pub fn meta(&self) -> &[SampleMeta] {
        &self.meta
    }

    pub fn num_taxa(&self) -> usize {
        self.counts.nrows()
    }

    pub fn num_samples(&self) -> usize {
        self.counts.ncols()
    }

    pub fn condition_labels(&self) -> Vec<bool> {
        self.meta.iter().map(|m| m.condition).collect()
    }

    /// Restrict to a subset of sample columns (preserving order given).
    pub fn select_samples(&self, idx: &[usize]) -> Result<CountTable> {
        for &j in idx {
            if j >= self.num_samples() {
                return Err(Error::dim(format!(
                    "select_samples: index {j} out of range for {} samples",
                    self.num_samples()
                )));
            }
        }
        let counts = DMatrix::from_fn(self.num_taxa(), idx.len(), |i, k| {
            self.counts[(i, idx[k])]
        });
        let samples: Vec<String> = idx.iter().map(|&j| self.samples[j].clone()).collect();
        let meta: Vec<SampleMeta> = idx.iter().map(|&j| self.meta[j].clone()).collect();
        CountTable::with_meta(counts, self.taxa.clone(), samples, meta)
    }
}

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::invalid_data(format!("duplicate {what} id '{id}'")));
        }
    }
    Ok(())
}

fn delimiter_for(path: &Path) -> u8 {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") | Some("txt") => b'\t',
        _ => b',',
    }
}

/// Load a count table and its companion metadata file.
pub fn load_counts(counts_path: &Path, meta_path: &Path) -> Result<CountTable> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter_for(counts_path))
        .has_headers(true)
        .from_path(counts_path)?;
    let samples: Vec<String> = reader
        .headers()?
        .iter()
        .skip(1)
        .map(|s| s.trim().to_string())
        .collect();
    if samples.is_empty() {
        return Err(Error::invalid_data(format!(
            "{}: header row has no sample columns",
            counts_path.display()
        )));
    }
    let mut taxa = Vec::new();
    let mut rows: Vec<Vec<u64>> = Vec::new();
    for (rec_idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = rec_idx + 2; // 1-based, after the header
        if record.len() != samples.len() + 1 {
            return Err(Error::invalid_data(format!(
                "{}:{line}: expected {} fields, found {}",
                counts_path.display(),
                samples.len() + 1,
                record.len()
            )));
        }
        let taxon = record[0].trim().to_string();
        let mut row = Vec::with_capacity(samples.len());
        for (k, field) in record.iter().skip(1).enumerate() {
            let value: i64 = field.trim().parse().map_err(|_| {
                Error::invalid_data(format!(
                    "{}:{line}: count for taxon '{taxon}', sample '{}' is not an integer: '{field}'",
                    counts_path.display(),
                    samples[k]
                ))
            })?;
            if value < 0 {
                return Err(Error::invalid_data(format!(
                    "{}:{line}: negative count {value} for taxon '{taxon}', sample '{}'",
                    counts_path.display(),
                    samples[k]
                )));
            }
            row.push(value as u64);
        }
        taxa.push(taxon);
        rows.push(row);
    }
    if taxa.is_empty() {
        return Err(Error::invalid_data(format!(
            "{}: no count rows",
            counts_path.display()
        )));
    }
    let counts = DMatrix::from_fn(taxa.len(), samples.len(), |i, j| rows[i][j]);
    let meta = load_metadata(meta_path, &samples)?;
    CountTable::with_meta(counts, taxa, samples, meta)
}

fn parse_binary(field: &str, where_: &str) -> Result<bool> {
    match field.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "case" | "post" => Ok(true),
        "0" | "false" | "control" | "pre" => Ok(false),
        other => Err(Error::invalid_data(format!(
            "{where_}: expected a binary label (0/1, true/false, control/case, pre/post), got '{other}'"
        ))),
    }
}

fn load_metadata(path: &Path, samples: &[String]) -> Result<Vec<SampleMeta>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter_for(path))
        .has_headers(true)
        .from_path(path)?;
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_ascii_lowercase())
        .collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let sample_col = col("sample").ok_or_else(|| {
        Error::invalid_data(format!("{}: missing 'sample' column", path.display()))
    })?;
    let condition_col = col("condition").ok_or_else(|| {
        Error::invalid_data(format!("{}: missing 'condition' column", path.display()))
    })?;
    let vessel_col = col("vessel");
    let timepoint_col = col("timepoint");
    let scale_col = col("log_scale");

    let mut by_sample = std::collections::HashMap::new();
    for (rec_idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = rec_idx + 2;
        let sample = record[sample_col].trim().to_string();
        let where_ = format!("{}:{line}", path.display());
        let condition = parse_binary(&record[condition_col], &where_)?;
        let vessel = vessel_col
            .and_then(|c| record.get(c))
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty());
        let timepoint = timepoint_col
            .and_then(|c| record.get(c))
            .filter(|v| !v.trim().is_empty())
            .map(|v| parse_binary(v, &where_))
            .transpose()?;
        let log_scale = scale_col
            .and_then(|c| record.get(c))
            .filter(|v| !v.trim().is_empty())
            .map(|v| {
                v.trim().parse::<f64>().map_err(|_| {
                    Error::invalid_data(format!("{where_}: log_scale is not a number: '{v}'"))
                })
            })
            .transpose()?;
        if by_sample
            .insert(
                sample.clone(),
                SampleMeta {
                    sample: sample.clone(),
                    condition,
                    vessel,
                    timepoint,
                    log_scale,
                },
            )
            .is_some()
        {
            return Err(Error::invalid_data(format!(
                "{where_}: duplicate metadata row for sample '{sample}'"
            )));
        }
    }
    samples
        .iter()
        .map(|s| {
            by_sample.remove(s).ok_or_else(|| {
                Error::invalid_data(format!(
                    "{}: no metadata row for sample '{s}'",
                    path.display()
                ))
            })
        })
        .collect()
}

/// Format a float with 10 significant digits, stable for re-ingestion.
pub fn fmt10(x: f64) -> String {
    if x == 0.0 {
        "0".to_string()
    } else {
        format!("{x:.9e}")
    }
}

/// Write a count table (TSV or CSV chosen by extension) plus metadata CSV.
pub fn write_counts(table: &CountTable, counts_path: &Path, meta_path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter_for(counts_path))
        .from_path(counts_path)?;
    let mut header = vec!["taxon".to_string()];
    header.extend(table.samples().iter().cloned());
    w.write_record(&header)?;
    for i in 0..table.num_taxa() {
        let mut row = vec![table.taxa()[i].clone()];
        for j in 0..table.num_samples() {
            row.push(table.counts()[(i, j)].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter_for(meta_path))
        .from_path(meta_path)?;
    w.write_record(["sample", "condition", "vessel", "timepoint", "log_scale"])?;
    for m in table.meta() {
        w.write_record([
            m.sample.clone(),
            if m.condition { "1".into() } else { "0".into() },
            m.vessel.clone().unwrap_or_default(),
            m.timepoint
                .map(|t| if t { "1".to_string() } else { "0".to_string() })
                .unwrap_or_default(),
            m.log_scale.map(fmt10).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write a decision table as CSV, one row per taxon.
pub fn write_decisions(table: &DecisionTable, taxa: &[String], path: &Path) -> Result<()> {
    if taxa.len() != table.taxa.len() {
        return Err(Error::dim(format!(
            "write_decisions: {} taxon ids for {} decisions",
            taxa.len(),
            table.taxa.len()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "taxon",
        "effect_size",
        "p_like",
        "p_bh",
        "significant",
        "lfc_mean",
        "lfc_lo",
        "lfc_hi",
        "logit_ecdf0",
        "direction",
    ])?;
    for (id, t) in taxa.iter().zip(&table.taxa) {
        w.write_record([
            id.clone(),
            fmt10(t.effect_size),
            fmt10(t.p_like),
            fmt10(t.p_bh),
            t.significant.to_string(),
            fmt10(t.lfc_mean),
            fmt10(t.lfc_lo),
            fmt10(t.lfc_hi),
            fmt10(t.logit_ecdf0),
            format!("{:?}", t.direction).to_lowercase(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
