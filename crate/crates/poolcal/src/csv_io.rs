//! CSV ingestion and export of pooled matched datasets.
//!
//! Columns: `study_id`, `stratum_id`, `case`, `w`, optional `z1..zK`,
//! `x_cat`, `x`, `id` and `in_calibration`. Column order is free; names
//! are matched case-insensitively.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use poolcal_core::data::{assemble, records, Record};
use poolcal_core::{CategoryScheme, PooledDataset};

use crate::CliError;

/// Parsed rows plus the number of covariate columns found.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub records: Vec<Record>,
    pub covariate_count: usize,
}

impl Table {
    /// Largest reference category in the file, if any row has one.
    pub fn max_category(&self) -> Option<usize> {
        self.records.iter().filter_map(|r| r.ref_category).max()
    }

    pub fn into_dataset(self, scheme: &CategoryScheme) -> Result<PooledDataset, CliError> {
        Ok(assemble(self.records, scheme, self.covariate_count)?)
    }
}

struct Columns {
    study: usize,
    stratum: usize,
    case: usize,
    w: usize,
    z: Vec<usize>,
    x_cat: Option<usize>,
    x: Option<usize>,
    id: Option<usize>,
    in_calibration: Option<usize>,
}

fn locate(headers: &csv::StringRecord) -> Result<Columns, CliError> {
    let names: Vec<String> = headers.iter().map(|h| h.trim().to_ascii_lowercase()).collect();
    let find = |name: &str| names.iter().position(|n| n == name);
    let need =
        |name: &str| find(name).ok_or_else(|| CliError::Format(format!("missing required column {name:?}")));
    let mut z = Vec::new();
    while let Some(i) = find(&format!("z{}", z.len() + 1)) {
        z.push(i);
    }
    if let Some(stray) = names
        .iter()
        .find(|n| n.starts_with('z') && n[1..].parse::<usize>().is_ok_and(|k| k == 0 || k > z.len()))
    {
        return Err(CliError::Format(format!(
            "covariate column {stray:?} is out of sequence (expected z1..z{})",
            z.len()
        )));
    }
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(CliError::Format(format!("column {n:?} appears twice")));
        }
    }
    Ok(Columns {
        study: need("study_id")?,
        stratum: need("stratum_id")?,
        case: need("case")?,
        w: need("w")?,
        z,
        x_cat: find("x_cat"),
        x: find("x"),
        id: find("id"),
        in_calibration: find("in_calibration"),
    })
}

fn flag(value: &str, column: &str, row: usize) -> Result<bool, String> {
    match value {
        "1" | "true" | "TRUE" | "True" => Ok(true),
        "0" | "false" | "FALSE" | "False" => Ok(false),
        other => Err(format!("row {row}: {column} must be 0 or 1, got {other:?}")),
    }
}

fn number(value: &str, column: &str, row: usize) -> Result<Option<f64>, String> {
    if value.is_empty() {
        return Ok(None);
    }
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Some)
        .ok_or_else(|| format!("row {row}: {column} is not a finite number: {value:?}"))
}

/// Reads records from CSV text. Rows are numbered from 1 after the header.
pub fn read_table<R: Read>(reader: R) -> Result<Table, CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Format(format!("unreadable header: {e}")))?
        .clone();
    let cols = locate(&headers)?;
    let mut out = Vec::new();
    let mut problems = Vec::new();
    for (i, result) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = result.map_err(|e| CliError::Format(format!("row {row}: {e}")))?;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let opt = |c: Option<usize>| c.map(get).unwrap_or("");
        let parsed = (|| -> Result<Record, String> {
            let study_id = get(cols.study);
            let stratum_id = get(cols.stratum);
            if study_id.is_empty() || stratum_id.is_empty() {
                return Err(format!("row {row}: empty study_id or stratum_id"));
            }
            let covariates = cols
                .z
                .iter()
                .enumerate()
                .map(|(k, &c)| {
                    number(get(c), &format!("z{}", k + 1), row)?
                        .ok_or_else(|| format!("row {row}: missing z{}", k + 1))
                })
                .collect::<Result<Vec<f64>, String>>()?;
            let ref_category = match opt(cols.x_cat) {
                "" => None,
                v => Some(
                    v.parse::<usize>()
                        .map_err(|_| format!("row {row}: x_cat must be a positive integer, got {v:?}"))?,
                ),
            };
            let ref_value = number(opt(cols.x), "x", row)?;
            let in_calibration = match opt(cols.in_calibration) {
                "" => ref_category.is_some() || ref_value.is_some(),
                v => flag(v, "in_calibration", row)?,
            };
            Ok(Record {
                row,
                study_id: study_id.to_string(),
                stratum_id: stratum_id.to_string(),
                participant_id: Some(opt(cols.id)).filter(|s| !s.is_empty()).map(String::from),
                case: flag(get(cols.case), "case", row)?,
                local_value: number(get(cols.w), "w", row)?,
                covariates,
                ref_category,
                ref_value,
                in_calibration,
            })
        })();
        match parsed {
            Ok(r) => out.push(r),
            Err(msg) => problems.push(msg),
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Core(poolcal_core::Error::Validation(
            problems.join("; "),
        )));
    }
    if out.is_empty() {
        return Err(CliError::Format("no data rows".into()));
    }
    Ok(Table {
        records: out,
        covariate_count: cols.z.len(),
    })
}

pub fn load_table(path: &Path) -> Result<Table, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_table(file).map_err(|e| e.in_file(path))
}

/// Loads and validates a dataset under `scheme`.
pub fn load_dataset(path: &Path, scheme: &CategoryScheme) -> Result<PooledDataset, CliError> {
    load_table(path)?
        .into_dataset(scheme)
        .map_err(|e| e.in_file(path))
}

/// Writes a dataset with every column, case rows first in each stratum.
pub fn write_dataset<W: Write>(dataset: &PooledDataset, writer: W) -> Result<(), CliError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let k = dataset.covariate_count();
    let mut header: Vec<String> = ["study_id", "stratum_id", "id", "case", "w"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=k).map(|i| format!("z{i}")));
    header.extend(["x_cat", "x", "in_calibration"].iter().map(|s| s.to_string()));
    let csv_err = |e: csv::Error| CliError::Format(format!("writing CSV: {e}"));
    wtr.write_record(&header).map_err(csv_err)?;
    for r in records(dataset) {
        let mut row = vec![
            r.study_id,
            r.stratum_id,
            r.participant_id.unwrap_or_default(),
            u8::from(r.case).to_string(),
            r.local_value.map(|v| v.to_string()).unwrap_or_default(),
        ];
        row.extend(r.covariates.iter().map(|v| v.to_string()));
        row.push(r.ref_category.map(|c| c.to_string()).unwrap_or_default());
        row.push(r.ref_value.map(|v| v.to_string()).unwrap_or_default());
        row.push(u8::from(r.in_calibration).to_string());
        wtr.write_record(&row).map_err(csv_err)?;
    }
    wtr.flush()
        .map_err(|e| CliError::Format(format!("writing CSV: {e}")))?;
    Ok(())
}
