//! CSV and JSON readers/writers for arm-level summaries and subject-level data.
//!
//! Summary rows: `trial_id,arm,n,y_mean,<y_sd|y_var|y_se_mean>,x1_mean,<x1_sd|x1_var>,x1_family,...`
//! IPD rows: `trial_id,z,y,x1,...,xp[,source][,weight]`. Lines starting with `#`
//! are comments (used for provenance stamps). JSON files hold an array of
//! objects with the same field names.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::data::{Arm, ArmSummary, CovariateFamily, Dataset, Source, SubjectRecord, TrialSummary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    /// Guesses from the file extension; anything but `.json` is CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format `{other}`")),
        }
    }
}

/// One raw row, field name to text, with its source line for error messages.
struct RawRow {
    line: usize,
    fields: HashMap<String, String>,
}

impl RawRow {
    fn get(&self, field: &str) -> Option<&str> {
        self.fields.get(field).map(|s| s.trim()).filter(|s| !s.is_empty())
    }

    fn require(&self, field: &str) -> Result<&str> {
        self.get(field).ok_or_else(|| Error::Parse {
            line: self.line,
            field: field.to_string(),
            message: "missing value".into(),
        })
    }

    fn parse<T: std::str::FromStr>(&self, field: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.require(field)?;
        raw.parse::<T>().map_err(|e| Error::Parse {
            line: self.line,
            field: field.to_string(),
            message: format!("`{raw}`: {e}"),
        })
    }

    fn parse_opt(&self, field: &str) -> Result<Option<f64>> {
        match self.get(field) {
            None => Ok(None),
            Some(_) => self.parse::<f64>(field).map(Some),
        }
    }
}

fn csv_rows<R: Read>(r: R) -> Result<(Vec<String>, Vec<RawRow>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let fields = header
            .iter()
            .cloned()
            .zip(rec.iter().map(|s| s.to_string()))
            .collect();
        rows.push(RawRow { line, fields });
    }
    Ok((header, rows))
}

fn json_rows<R: Read>(r: R) -> Result<(Vec<String>, Vec<RawRow>)> {
    let v: Value = serde_json::from_reader(r)?;
    let arr = match v {
        Value::Array(a) => a,
        _ => return Err(Error::Schema("expected a JSON array of rows".into())),
    };
    let mut header: Vec<String> = Vec::new();
    let mut rows = Vec::new();
    for (i, item) in arr.into_iter().enumerate() {
        let obj = match item {
            Value::Object(o) => o,
            _ => return Err(Error::Schema(format!("row {i} is not an object"))),
        };
        let mut fields = HashMap::new();
        for (k, v) in obj {
            if !header.contains(&k) {
                header.push(k.clone());
            }
            let s = match v {
                Value::String(s) => s,
                Value::Null => String::new(),
                other => other.to_string(),
            };
            fields.insert(k, s);
        }
        rows.push(RawRow { line: i + 1, fields });
    }
    Ok((header, rows))
}

fn rows_from<R: Read>(r: R, format: Format) -> Result<(Vec<String>, Vec<RawRow>)> {
    match format {
        Format::Csv => csv_rows(r),
        Format::Json => json_rows(r),
    }
}

/// Number of covariates, counted as consecutive `x{j}_mean` (summaries) or
/// `x{j}` (IPD) columns starting from 1.
fn covariate_count(header: &[String], suffix: &str) -> usize {
    (1..)
        .take_while(|j| header.iter().any(|h| h == &format!("x{j}{suffix}")))
        .count()
}

fn variance_from(row: &RawRow, prefix: &str, n: usize, allow_se: bool) -> Result<f64> {
    let var_f = format!("{prefix}_var");
    let sd_f = format!("{prefix}_sd");
    let se_f = format!("{prefix}_se_mean");
    let (field, var) = if let Some(v) = row.parse_opt(&var_f)? {
        (var_f, v)
    } else if let Some(sd) = row.parse_opt(&sd_f)? {
        if sd < 0.0 {
            (sd_f, -1.0)
        } else {
            (sd_f, sd * sd)
        }
    } else if let (true, Some(se)) = (allow_se, row.parse_opt(&se_f)?) {
        if se < 0.0 {
            (se_f, -1.0)
        } else {
            (se_f, n as f64 * se * se)
        }
    } else {
        let alts = if allow_se {
            format!("{sd_f}, {var_f} or {se_f}")
        } else {
            format!("{sd_f} or {var_f}")
        };
        return Err(Error::Parse {
            line: row.line,
            field: sd_f,
            message: format!("one of {alts} is required"),
        });
    };
    if var < 0.0 || !var.is_finite() {
        return Err(Error::Parse {
            line: row.line,
            field,
            message: "negative or non-finite variance".into(),
        });
    }
    Ok(var)
}

fn summaries_from_rows(header: &[String], rows: Vec<RawRow>) -> Result<Vec<TrialSummary>> {
    if rows.is_empty() {
        return Err(Error::NoTrials);
    }
    let p = covariate_count(header, "_mean");
    // Preserve first-appearance order of trials.
    let mut order: Vec<String> = Vec::new();
    let mut by_trial: BTreeMap<String, Vec<ArmSummary>> = BTreeMap::new();
    for row in rows {
        let trial_id = row.require("trial_id")?.to_string();
        let arm_raw: u8 = row.parse("arm")?;
        let arm = Arm::try_from(arm_raw).map_err(|m| Error::Parse {
            line: row.line,
            field: "arm".into(),
            message: m,
        })?;
        let n: usize = row.parse("n")?;
        if n == 0 {
            return Err(Error::Parse {
                line: row.line,
                field: "n".into(),
                message: "n must be positive; omit empty arms".into(),
            });
        }
        let y_mean: f64 = row.parse("y_mean")?;
        let y_var = variance_from(&row, "y", n, true)?;
        let mut x_mean = Vec::with_capacity(p);
        let mut x_var = Vec::with_capacity(p);
        let mut x_family = Vec::with_capacity(p);
        for j in 1..=p {
            x_mean.push(row.parse::<f64>(&format!("x{j}_mean"))?);
            x_var.push(variance_from(&row, &format!("x{j}"), n, false)?);
            let fam_f = format!("x{j}_family");
            let fam = match row.get(&fam_f) {
                None => CovariateFamily::Continuous,
                Some(_) => row.parse::<CovariateFamily>(&fam_f)?,
            };
            x_family.push(fam);
        }
        let summary = ArmSummary {
            trial_id: trial_id.clone(),
            arm,
            n,
            y_mean,
            y_var,
            x_mean,
            x_var,
            x_family,
        };
        let entry = by_trial.entry(trial_id.clone()).or_default();
        if entry.iter().any(|a| a.arm == arm) {
            return Err(Error::DuplicateArm {
                trial_id,
                arm: arm.as_u8(),
            });
        }
        if entry.is_empty() {
            order.push(trial_id);
        }
        entry.push(summary);
    }
    let trials = order
        .into_iter()
        .map(|id| {
            let arms = by_trial.remove(&id).unwrap_or_default();
            TrialSummary::new(id, arms)
        })
        .collect::<Result<Vec<_>>>()?;
    crate::data::check_consistent_layout(&trials)?;
    Ok(trials)
}

pub fn read_summaries_from<R: Read>(r: R, format: Format) -> Result<Vec<TrialSummary>> {
    let (header, rows) = rows_from(r, format)?;
    summaries_from_rows(&header, rows)
}

pub fn read_summaries(path: &Path, format: Format) -> Result<Vec<TrialSummary>> {
    let f = File::open(path)?;
    read_summaries_from(BufReader::new(f), format)
}

fn summary_rows(trials: &[TrialSummary]) -> (Vec<String>, Vec<Vec<String>>) {
    let p = trials.first().map(|t| t.p()).unwrap_or(0);
    let mut header: Vec<String> = ["trial_id", "arm", "n", "y_mean", "y_var"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for j in 1..=p {
        header.push(format!("x{j}_mean"));
        header.push(format!("x{j}_var"));
        header.push(format!("x{j}_family"));
    }
    let mut rows = Vec::new();
    for t in trials {
        for a in &t.arms {
            let mut r = vec![
                a.trial_id.clone(),
                a.arm.to_string(),
                a.n.to_string(),
                a.y_mean.to_string(),
                a.y_var.to_string(),
            ];
            for j in 0..p {
                r.push(a.x_mean[j].to_string());
                r.push(a.x_var[j].to_string());
                r.push(a.x_family[j].to_string());
            }
            rows.push(r);
        }
    }
    (header, rows)
}

/// Writes summaries with `y_var`/`x{j}_var` columns so values round-trip exactly.
pub fn write_summaries_to<W: Write>(w: W, trials: &[TrialSummary], format: Format) -> Result<()> {
    let (header, rows) = summary_rows(trials);
    write_table(w, &header, &rows, format, None)
}

pub fn write_summaries(path: &Path, trials: &[TrialSummary], format: Format) -> Result<()> {
    write_summaries_to(File::create(path)?, trials, format)
}

fn write_table<W: Write>(
    mut w: W,
    header: &[String],
    rows: &[Vec<String>],
    format: Format,
    stamp: Option<&str>,
) -> Result<()> {
    match format {
        Format::Csv => {
            if let Some(s) = stamp {
                for line in s.lines() {
                    writeln!(w, "# {line}")?;
                }
            }
            let mut wtr = csv::Writer::from_writer(w);
            wtr.write_record(header)?;
            for r in rows {
                wtr.write_record(r)?;
            }
            wtr.flush()?;
        }
        Format::Json => {
            let arr: Vec<Value> = rows
                .iter()
                .map(|r| {
                    let obj = header
                        .iter()
                        .zip(r)
                        .map(|(h, v)| (h.clone(), json_scalar(h, v)))
                        .collect::<serde_json::Map<_, _>>();
                    Value::Object(obj)
                })
                .collect();
            serde_json::to_writer_pretty(&mut w, &arr)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

fn json_scalar(field: &str, v: &str) -> Value {
    if field == "trial_id" || field == "source" || field.ends_with("_family") {
        return Value::String(v.to_string());
    }
    if let Ok(i) = v.parse::<i64>() {
        return Value::from(i);
    }
    match v.parse::<f64>() {
        Ok(f) if f.is_finite() => Value::from(f),
        _ => Value::String(v.to_string()),
    }
}

/// Which optional columns to emit for subject-level data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IpdColumns {
    pub source: bool,
    pub weight: bool,
}

impl IpdColumns {
    pub const ALL: IpdColumns = IpdColumns {
        source: true,
        weight: true,
    };
}

/// Reads subject-level rows. Without a `source` column, rows whose `trial_id`
/// equals `target_id` (or every row, when `target_id` is `None`) are target rows.
pub fn read_ipd_from<R: Read>(r: R, format: Format, target_id: Option<&str>) -> Result<Dataset> {
    let (header, rows) = rows_from(r, format)?;
    let p = covariate_count(&header, "");
    let has_source = header.iter().any(|h| h == "source");
    let mut subjects = Vec::with_capacity(rows.len());
    for row in rows {
        let trial_id = row.require("trial_id")?.to_string();
        let z_raw: u8 = row.parse("z")?;
        let z = Arm::try_from(z_raw).map_err(|m| Error::Parse {
            line: row.line,
            field: "z".into(),
            message: m,
        })?;
        let y: f64 = row.parse("y")?;
        let x = (1..=p)
            .map(|j| row.parse::<f64>(&format!("x{j}")))
            .collect::<Result<Vec<_>>>()?;
        let source = if has_source {
            row.parse::<Source>("source")?
        } else {
            match target_id {
                Some(t) if t != trial_id => Source::Reconstructed,
                _ => Source::Target,
            }
        };
        let weight = row.parse_opt("weight")?.unwrap_or(1.0);
        subjects.push(SubjectRecord {
            trial_id,
            z,
            y,
            x,
            weight,
            source,
        });
    }
    let target = match target_id {
        Some(t) => t.to_string(),
        None => subjects
            .iter()
            .find(|s| s.is_target())
            .map(|s| s.trial_id.clone())
            .unwrap_or_default(),
    };
    Ok(Dataset::new(target, p, subjects))
}

pub fn read_ipd(path: &Path, format: Format, target_id: Option<&str>) -> Result<Dataset> {
    let f = File::open(path)?;
    read_ipd_from(BufReader::new(f), format, target_id)
}

pub fn write_ipd_to<W: Write>(
    w: W,
    d: &Dataset,
    cols: IpdColumns,
    format: Format,
    stamp: Option<&str>,
) -> Result<()> {
    let mut header: Vec<String> = vec!["trial_id".into(), "z".into(), "y".into()];
    header.extend((1..=d.p).map(|j| format!("x{j}")));
    if cols.source {
        header.push("source".into());
    }
    if cols.weight {
        header.push("weight".into());
    }
    let rows: Vec<Vec<String>> = d
        .subjects
        .iter()
        .map(|s| {
            let mut r = vec![s.trial_id.clone(), s.z.to_string(), s.y.to_string()];
            r.extend(s.x.iter().map(|v| v.to_string()));
            if cols.source {
                r.push(s.source.to_string());
            }
            if cols.weight {
                r.push(s.weight.to_string());
            }
            r
        })
        .collect();
    write_table(w, &header, &rows, format, stamp)
}

pub fn write_ipd(path: &Path, d: &Dataset, cols: IpdColumns, format: Format, stamp: Option<&str>) -> Result<()> {
    write_ipd_to(File::create(path)?, d, cols, format, stamp)
}
