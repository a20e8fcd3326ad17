//! CSV and binary artifact formats.
//!
//! Floats are written in shortest round-trip form, so a parse of a written
//! file reproduces the in-memory values bit for bit.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anneal::{ActionLedger, LedgerRow, LEDGER_HEADER};
use crate::continuum::ElResidual;
use crate::error::{Error, Result};
use crate::forge::PredictionReport;
use crate::lbfgs::Termination;
use crate::network::{DataLibrary, DataPair, GeneratorMetadata};

pub const LEDGER_SCHEMA: &str = "ledger/1";
pub const LIBRARY_SCHEMA: &str = "library/1";
pub const PATH_SCHEMA: &str = "path/1";
pub const PREDICTION_SCHEMA: &str = "prediction/1";
pub const SWEEP_SCHEMA: &str = "sweep/1";
pub const EL_RESIDUAL_SCHEMA: &str = "el-residual/1";

pub const PATH_HEADER: &str = "index,value";
pub const PREDICTION_HEADER: &str = "m_train,m_predict,pair_index,square_error";
pub const SWEEP_HEADER: &str = "m_train,l_f,seed,lowest_action,prediction_mse,status";
pub const EL_RESIDUAL_HEADER: &str = "grid,component,residual";

/// Every CSV schema this crate writes, for the run manifest.
pub fn schema_versions() -> Vec<(&'static str, &'static str)> {
    vec![
        ("ledger", LEDGER_SCHEMA),
        ("library", LIBRARY_SCHEMA),
        ("path", PATH_SCHEMA),
        ("prediction", PREDICTION_SCHEMA),
        ("sweep", SWEEP_SCHEMA),
        ("el_residual", EL_RESIDUAL_SCHEMA),
    ]
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes())
}

/// Checks the header row column by column so the message names the culprit.
fn check_header(rdr: &mut csv::Reader<&[u8]>, expected: &str) -> Result<()> {
    let got = rdr.headers().map_err(csv_err)?.clone();
    let want: Vec<&str> = expected.split(',').collect();
    for (i, w) in want.iter().enumerate() {
        match got.get(i) {
            Some(g) if g.trim() == *w => {}
            Some(g) => return Err(Error::Parse(format!("column {} is '{g}', expected '{w}'", i + 1))),
            None => return Err(Error::Parse(format!("missing column '{w}'"))),
        }
    }
    if got.len() > want.len() {
        return Err(Error::Parse(format!("unexpected column '{}'", &got[want.len()])));
    }
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str, line: usize) -> Result<T> {
    let raw = rec.get(i).ok_or_else(|| Error::Parse(format!("line {line}: missing column '{name}'")))?;
    raw.trim().parse().map_err(|_| Error::Parse(format!("line {line}: column '{name}' has unparsable value '{raw}'")))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn ledger_to_csv(ledger: &ActionLedger) -> Result<String> {
    let mut w = writer();
    w.write_record(LEDGER_HEADER.split(',')).map_err(csv_err)?;
    for r in &ledger.rows {
        w.write_record([
            r.beta.to_string(),
            r.log10_rf_rm.to_string(),
            r.init_index.to_string(),
            r.total.to_string(),
            r.measurement_term.to_string(),
            r.model_term.to_string(),
            r.grad_norm.to_string(),
            r.termination.as_str().to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

pub fn parse_ledger_csv(text: &str) -> Result<ActionLedger> {
    let mut rdr = reader(text);
    check_header(&mut rdr, LEDGER_HEADER)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        let term: String = field(&rec, 7, "termination", line)?;
        rows.push(LedgerRow {
            beta: field(&rec, 0, "beta", line)?,
            log10_rf_rm: field(&rec, 1, "log10_rf_rm", line)?,
            init_index: field(&rec, 2, "init_index", line)?,
            total: field(&rec, 3, "total", line)?,
            measurement_term: field(&rec, 4, "measurement_term", line)?,
            model_term: field(&rec, 5, "model_term", line)?,
            grad_norm: field(&rec, 6, "grad_norm", line)?,
            termination: Termination::parse(&term)
                .ok_or_else(|| Error::Parse(format!("line {line}: column 'termination' has unknown value '{term}'")))?,
        });
    }
    let ledger = ActionLedger { rows };
    ledger.validate().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(ledger)
}

pub fn write_ledger(ledger: &ActionLedger, path: &Path) -> Result<()> {
    write_text(path, &ledger_to_csv(ledger)?)
}

pub fn read_ledger(path: &Path) -> Result<ActionLedger> {
    parse_ledger_csv(&fs::read_to_string(path)?)
}

fn library_header(l_in: usize, l_out: usize) -> Vec<String> {
    (1..=l_in).map(|r| format!("y_in_{r}")).chain((1..=l_out).map(|r| format!("y_out_{r}"))).collect()
}

/// Sidecar written next to a library CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraryMeta {
    pub schema: String,
    pub n_pairs: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub noise_variance: f64,
    pub metadata: GeneratorMetadata,
}

pub fn library_to_csv(lib: &DataLibrary) -> Result<String> {
    let mut w = writer();
    w.write_record(library_header(lib.input_dim(), lib.output_dim())).map_err(csv_err)?;
    for p in &lib.pairs {
        w.write_record(p.input.iter().chain(&p.output).map(|v| v.to_string())).map_err(csv_err)?;
    }
    finish(w)
}

pub fn parse_library_csv(text: &str, meta: &LibraryMeta) -> Result<DataLibrary> {
    let mut rdr = reader(text);
    check_header(&mut rdr, &library_header(meta.input_dim, meta.output_dim).join(","))?;
    let names = library_header(meta.input_dim, meta.output_dim);
    let mut pairs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let vals = (0..names.len()).map(|c| field::<f64>(&rec, c, &names[c], i + 2)).collect::<Result<Vec<_>>>()?;
        pairs.push(DataPair { input: vals[..meta.input_dim].to_vec(), output: vals[meta.input_dim..].to_vec() });
    }
    if pairs.len() != meta.n_pairs {
        return Err(Error::Parse(format!("library has {} rows, sidecar says {}", pairs.len(), meta.n_pairs)));
    }
    DataLibrary::new(pairs, meta.noise_variance, meta.metadata.clone())
}

pub fn library_meta_path(csv_path: &Path) -> PathBuf {
    let mut s = csv_path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_library(lib: &DataLibrary, path: &Path) -> Result<()> {
    let meta = LibraryMeta {
        schema: LIBRARY_SCHEMA.into(),
        n_pairs: lib.len(),
        input_dim: lib.input_dim(),
        output_dim: lib.output_dim(),
        noise_variance: lib.noise_variance,
        metadata: lib.metadata.clone(),
    };
    write_text(path, &library_to_csv(lib)?)?;
    write_text(&library_meta_path(path), &(serde_json::to_string_pretty(&meta)? + "\n"))
}

pub fn read_library(path: &Path) -> Result<DataLibrary> {
    let meta: LibraryMeta = serde_json::from_str(&fs::read_to_string(library_meta_path(path))?)?;
    parse_library_csv(&fs::read_to_string(path)?, &meta)
}

pub fn path_to_csv(flat: &[f64]) -> Result<String> {
    let mut w = writer();
    w.write_record(PATH_HEADER.split(',')).map_err(csv_err)?;
    for (i, v) in flat.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()]).map_err(csv_err)?;
    }
    finish(w)
}

pub fn parse_path_csv(text: &str) -> Result<Vec<f64>> {
    let mut rdr = reader(text);
    check_header(&mut rdr, PATH_HEADER)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let idx: usize = field(&rec, 0, "index", i + 2)?;
        if idx != out.len() {
            return Err(Error::Parse(format!("line {}: index {idx} out of sequence", i + 2)));
        }
        out.push(field(&rec, 1, "value", i + 2)?);
    }
    Ok(out)
}

/// Raw little-endian f64, no header.
pub fn write_path_binary(flat: &[f64], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    let bytes: Vec<u8> = flat.iter().flat_map(|v| v.to_le_bytes()).collect();
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_path_binary(path: &Path) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse(format!("binary path has {} bytes, not a multiple of 8", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Reads a path from either format, chosen by extension (`.csv` or binary).
pub fn read_path(path: &Path) -> Result<Vec<f64>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => parse_path_csv(&fs::read_to_string(path)?),
        _ => read_path_binary(path),
    }
}

pub fn prediction_to_csv(report: &PredictionReport) -> Result<String> {
    let mut w = writer();
    w.write_record(PREDICTION_HEADER.split(',')).map_err(csv_err)?;
    for (i, e) in report.per_pair_errors.iter().enumerate() {
        w.write_record([report.m_train.to_string(), report.m_predict.to_string(), i.to_string(), e.to_string()])
            .map_err(csv_err)?;
    }
    finish(w)
}

pub fn parse_prediction_csv(text: &str) -> Result<PredictionReport> {
    let mut rdr = reader(text);
    check_header(&mut rdr, PREDICTION_HEADER)?;
    let (mut m_train, mut m_predict) = (None, None);
    let mut errs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        let mt: usize = field(&rec, 0, "m_train", line)?;
        let mp: usize = field(&rec, 1, "m_predict", line)?;
        if *m_train.get_or_insert(mt) != mt || *m_predict.get_or_insert(mp) != mp {
            return Err(Error::Parse(format!("line {line}: m_train/m_predict differ from earlier rows")));
        }
        errs.push(field(&rec, 3, "square_error", line)?);
    }
    if errs.is_empty() {
        return Err(Error::Parse("prediction report has no rows".into()));
    }
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    Ok(PredictionReport { m_train: m_train.unwrap(), m_predict: m_predict.unwrap(), mean_square_error: mean, per_pair_errors: errs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m_train: usize,
    pub l_f: usize,
    pub seed: u64,
    pub lowest_action: f64,
    pub prediction_mse: f64,
    /// `ok` or a short failure tag.
    pub status: String,
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = writer();
    w.write_record(SWEEP_HEADER.split(',')).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.m_train.to_string(),
            r.l_f.to_string(),
            r.seed.to_string(),
            r.lowest_action.to_string(),
            r.prediction_mse.to_string(),
            r.status.clone(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut rdr = reader(text);
    check_header(&mut rdr, SWEEP_HEADER)?;
    rdr.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(csv_err)?;
            let line = i + 2;
            Ok(SweepRow {
                m_train: field(&rec, 0, "m_train", line)?,
                l_f: field(&rec, 1, "l_f", line)?,
                seed: field(&rec, 2, "seed", line)?,
                lowest_action: field(&rec, 3, "lowest_action", line)?,
                prediction_mse: field(&rec, 4, "prediction_mse", line)?,
                status: field(&rec, 5, "status", line)?,
            })
        })
        .collect()
}

pub fn el_residual_to_csv(res: &ElResidual) -> Result<String> {
    let mut w = writer();
    w.write_record(EL_RESIDUAL_HEADER.split(',')).map_err(csv_err)?;
    for (l, r) in res.grid.iter().zip(&res.residuals) {
        for (a, v) in r.iter().enumerate() {
            w.write_record([l.to_string(), a.to_string(), v.to_string()]).map_err(csv_err)?;
        }
    }
    finish(w)
}
