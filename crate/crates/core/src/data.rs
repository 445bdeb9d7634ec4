//! Longitudinal dataset type, wide-format CSV ingestion, and the empirical
//! positivity check.
//!
//! The CSV layout is `id, <X columns...>, L0, A0, L1, A1, ..., LK, AK, Y`.
//! The horizon is inferred from the header (number of `A` columns minus
//! one). Binary columns are validated to {0,1}; rows with missing cells are
//! dropped and reported with their line numbers (complete-case analysis).

use serde::Serialize;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::history::{encode, MAX_HORIZON};

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    /// Baseline covariate values, aligned with the dataset's
    /// `covariate_names`.
    pub x: Vec<f64>,
    pub l0: u8,
    /// Treatments `a_0..a_K`.
    pub a: Vec<u8>,
    /// Intermediate covariates `l_1..l_K`.
    pub l: Vec<u8>,
    pub y: u8,
}

impl Subject {
    /// Packed history code of the subject's realized `(a, l)` sequence.
    pub fn history_code(&self) -> Result<u64> {
        encode(&self.a, &self.l)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongitudinalDataset {
    pub horizon: usize,
    pub covariate_names: Vec<String>,
    pub subjects: Vec<Subject>,
}

impl LongitudinalDataset {
    pub fn new(
        horizon: usize,
        covariate_names: Vec<String>,
        subjects: Vec<Subject>,
    ) -> Result<Self> {
        if horizon > MAX_HORIZON {
            return Err(Error::HorizonTooLarge(horizon, MAX_HORIZON));
        }
        let ds = Self {
            horizon,
            covariate_names,
            subjects,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.subjects.iter().enumerate() {
            if s.x.len() != self.covariate_names.len() {
                return Err(Error::InvalidData(format!(
                    "subject {} (`{}`) has {} covariates, expected {}",
                    i,
                    s.id,
                    s.x.len(),
                    self.covariate_names.len()
                )));
            }
            if s.a.len() != self.horizon + 1 || s.l.len() != self.horizon {
                return Err(Error::InvalidData(format!(
                    "subject {} (`{}`) history length does not match horizon {}",
                    i, s.id, self.horizon
                )));
            }
            for &b in s.a.iter().chain(s.l.iter()).chain([s.l0, s.y].iter()) {
                if b > 1 {
                    return Err(Error::InvalidData(format!(
                        "subject {} (`{}`) has non-binary value {}",
                        i, s.id, b
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    /// Resamples subjects with replacement according to the given indices.
    pub fn resample(&self, indices: &[usize]) -> Self {
        Self {
            horizon: self.horizon,
            covariate_names: self.covariate_names.clone(),
            subjects: indices
                .iter()
                .map(|&i| self.subjects[i].clone())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct IngestReport {
    /// 1-based line numbers of rows dropped for missing cells.
    pub dropped_lines: Vec<usize>,
    pub n_rows: usize,
}

/// Parses wide-format CSV data, inferring the horizon from the header.
pub fn read_csv<R: Read>(reader: R) -> Result<(LongitudinalDataset, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.is_empty() {
        return Err(Error::InvalidData("empty file".into()));
    }
    let layout = HeaderLayout::parse(&headers)?;

    let mut subjects = Vec::new();
    let mut report = IngestReport::default();
    for (row_idx, record) in rdr.records().enumerate() {
        let record = record?;
        let line = row_idx + 2; // 1-based, after the header
        report.n_rows += 1;
        if record.len() != headers.len() {
            return Err(Error::CsvValue {
                line,
                column: String::new(),
                message: format!(
                    "inconsistent column count: expected {}, got {}",
                    headers.len(),
                    record.len()
                ),
            });
        }
        if record
            .iter()
            .any(|cell| matches!(cell.trim(), "" | "NA" | "na" | "NaN"))
        {
            report.dropped_lines.push(line);
            continue;
        }
        subjects.push(layout.parse_row(&record, line)?);
    }
    let ds = LongitudinalDataset::new(layout.horizon, layout.covariate_names.clone(), subjects)?;
    Ok((ds, report))
}

pub fn read_csv_path<P: AsRef<Path>>(path: P) -> Result<(LongitudinalDataset, IngestReport)> {
    read_csv(std::fs::File::open(path)?)
}

/// Writes the dataset in the same wide format `read_csv` accepts.
pub fn write_csv<W: Write>(ds: &LongitudinalDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string()];
    header.extend(ds.covariate_names.iter().cloned());
    header.push("L0".into());
    for k in 0..=ds.horizon {
        header.push(format!("A{k}"));
        if k < ds.horizon {
            header.push(format!("L{}", k + 1));
        }
    }
    header.push("Y".into());
    wtr.write_record(&header)?;
    for s in &ds.subjects {
        let mut row = vec![s.id.clone()];
        row.extend(s.x.iter().map(|v| format_num(*v)));
        row.push(s.l0.to_string());
        for k in 0..=ds.horizon {
            row.push(s.a[k].to_string());
            if k < ds.horizon {
                row.push(s.l[k].to_string());
            }
        }
        row.push(s.y.to_string());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_csv_path<P: AsRef<Path>>(ds: &LongitudinalDataset, path: P) -> Result<()> {
    write_csv(ds, std::fs::File::create(path)?)
}

fn format_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

struct HeaderLayout {
    covariate_names: Vec<String>,
    horizon: usize,
    x_cols: Vec<usize>,
    l_cols: Vec<usize>, // L0..LK
    a_cols: Vec<usize>, // A0..AK
    y_col: usize,
    id_col: usize,
}

impl HeaderLayout {
    fn parse(headers: &[String]) -> Result<Self> {
        let find = |name: &str| headers.iter().position(|h| h == name);
        let id_col =
            find("id").ok_or_else(|| Error::InvalidData("missing `id` column".into()))?;
        let y_col = find("Y").ok_or_else(|| Error::InvalidData("missing `Y` column".into()))?;
        let mut horizon = 0;
        while find(&format!("A{}", horizon + 1)).is_some() {
            horizon += 1;
        }
        let mut l_cols = Vec::new();
        let mut a_cols = Vec::new();
        for k in 0..=horizon {
            l_cols.push(find(&format!("L{k}")).ok_or_else(|| {
                Error::InvalidData(format!("missing `L{k}` column for horizon {horizon}"))
            })?);
            a_cols.push(find(&format!("A{k}")).ok_or_else(|| {
                Error::InvalidData(format!("missing `A{k}` column for horizon {horizon}"))
            })?);
        }
        let special: Vec<usize> = l_cols
            .iter()
            .chain(a_cols.iter())
            .chain([y_col, id_col].iter())
            .cloned()
            .collect();
        let x_cols: Vec<usize> = (0..headers.len())
            .filter(|i| !special.contains(i))
            .collect();
        let covariate_names = x_cols.iter().map(|&i| headers[i].clone()).collect();
        Ok(Self {
            covariate_names,
            horizon,
            x_cols,
            l_cols,
            a_cols,
            y_col,
            id_col,
        })
    }

    fn parse_row(&self, record: &csv::StringRecord, line: usize) -> Result<Subject> {
        let bit = |col: usize, name: &str| -> Result<u8> {
            let cell = record.get(col).unwrap_or("").trim();
            match cell {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(Error::CsvValue {
                    line,
                    column: name.to_string(),
                    message: format!("expected 0 or 1, got `{other}`"),
                }),
            }
        };
        let mut x = Vec::with_capacity(self.x_cols.len());
        for (i, &col) in self.x_cols.iter().enumerate() {
            let cell = record.get(col).unwrap_or("").trim();
            let v = cell.parse::<f64>().map_err(|_| Error::CsvValue {
                line,
                column: self.covariate_names[i].clone(),
                message: format!("expected a number, got `{cell}`"),
            })?;
            x.push(v);
        }
        let l0 = bit(self.l_cols[0], "L0")?;
        let mut a = Vec::with_capacity(self.horizon + 1);
        let mut l = Vec::with_capacity(self.horizon);
        for k in 0..=self.horizon {
            a.push(bit(self.a_cols[k], &format!("A{k}"))?);
            if k > 0 {
                l.push(bit(self.l_cols[k], &format!("L{k}"))?);
            }
        }
        let y = bit(self.y_col, "Y")?;
        Ok(Subject {
            id: record.get(self.id_col).unwrap_or("").to_string(),
            x,
            l0,
            a,
            l,
            y,
        })
    }
}

/// One stratum in which only a single treatment arm was observed.
#[derive(Clone, Debug, Serialize)]
pub struct PositivityViolation {
    pub stage: usize,
    /// Realized `(l_0, a_0, l_1, ..., l_k)` prefix defining the stratum.
    pub stratum: String,
    pub n_subjects: usize,
    pub observed_arm: u8,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct PositivityReport {
    pub violations: Vec<PositivityViolation>,
    pub n_strata_checked: usize,
}

impl PositivityReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Empirical positivity check: at every stage, each observed history-prefix
/// stratum (pooled over X) should contain both treatment arms. Warning-only;
/// strata never observed are not assessable and are not reported.
pub fn validate_positivity(ds: &LongitudinalDataset) -> PositivityReport {
    let mut report = PositivityReport::default();
    for stage in 0..=ds.horizon {
        // Key: bits of (l_0, a_0, l_1, a_1, ..., l_stage).
        let mut strata: BTreeMap<u64, (usize, [usize; 2])> = BTreeMap::new();
        for s in &ds.subjects {
            let mut key = u64::from(s.l0);
            for k in 0..stage {
                key = (key << 1) | u64::from(s.a[k]);
                key = (key << 1) | u64::from(s.l[k]);
            }
            let entry = strata.entry(key).or_insert((0, [0, 0]));
            entry.0 += 1;
            entry.1[s.a[stage] as usize] += 1;
        }
        report.n_strata_checked += strata.len();
        for (key, (n, arms)) in strata {
            if arms[0] == 0 || arms[1] == 0 {
                let observed_arm = u8::from(arms[1] > 0);
                report.violations.push(PositivityViolation {
                    stage,
                    stratum: render_prefix(key, stage),
                    n_subjects: n,
                    observed_arm,
                });
            }
        }
    }
    report
}

fn render_prefix(key: u64, stage: usize) -> String {
    let n_bits = 1 + 2 * stage;
    let mut parts = Vec::with_capacity(n_bits);
    for i in (0..n_bits).rev() {
        let b = (key >> i) & 1;
        parts.push(b.to_string());
    }
    let mut out = format!("l0={}", parts[0]);
    for k in 0..stage {
        out.push_str(&format!(
            " a{}={} l{}={}",
            k,
            parts[1 + 2 * k],
            k + 1,
            parts[2 + 2 * k]
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(id: &str, x: Vec<f64>, l0: u8, a: Vec<u8>, l: Vec<u8>, y: u8) -> Subject {
        Subject {
            id: id.into(),
            x,
            l0,
            a,
            l,
            y,
        }
    }

    fn small_dataset() -> LongitudinalDataset {
        LongitudinalDataset::new(
            1,
            vec!["z".into()],
            vec![
                subject("1", vec![1.0], 0, vec![0, 1], vec![1], 1),
                subject("2", vec![0.0], 1, vec![1, 0], vec![0], 0),
                subject("3", vec![1.0], 0, vec![1, 1], vec![1], 1),
            ],
        )
        .unwrap()
    }

    #[test]
    fn csv_round_trip_bit_exact() {
        let ds = small_dataset();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let (back, report) = read_csv(buf.as_slice()).unwrap();
        assert_eq!(ds, back);
        assert!(report.dropped_lines.is_empty());

        let mut buf2 = Vec::new();
        write_csv(&back, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn non_binary_cell_is_an_error_naming_row_and_column() {
        let csv = "id,z,L0,A0,L1,A1,Y\n1,0.5,0,1,0,2,1\n";
        let err = read_csv(csv.as_bytes()).unwrap_err();
        match err {
            Error::CsvValue { line, column, .. } => {
                assert_eq!(line, 2);
                assert_eq!(column, "A1");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_cells_drop_rows_with_line_numbers() {
        let csv = "id,z,L0,A0,L1,A1,Y\n1,0.5,0,1,0,1,1\n2,,0,1,0,1,1\n3,0.5,0,NA,0,1,1\n4,1,1,0,1,0,0\n";
        let (ds, report) = read_csv(csv.as_bytes()).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(report.dropped_lines, vec![3, 4]);
        assert_eq!(report.n_rows, 4);
    }

    #[test]
    fn horizon_inferred_from_header() {
        let mut header = String::from("id,x1,x2,x3,x4,L0");
        for k in 0..=7 {
            header.push_str(&format!(",A{k}"));
            if k < 7 {
                header.push_str(&format!(",L{}", k + 1));
            }
        }
        header.push_str(",Y\n");
        let mut body = String::new();
        for i in 0..147 {
            let mut row = format!("{i},1,0,1,0,0");
            for k in 0..=7 {
                row.push_str(&format!(",{}", (i + k) % 2));
                if k < 7 {
                    row.push_str(&format!(",{}", i % 2));
                }
            }
            row.push_str(",1\n");
            body.push_str(&row);
        }
        let (ds, _) = read_csv(format!("{header}{body}").as_bytes()).unwrap();
        assert_eq!(ds.horizon, 7);
        assert_eq!(ds.n(), 147);
        assert_eq!(ds.covariate_names, vec!["x1", "x2", "x3", "x4"]);
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(read_csv(&b""[..]).is_err());
    }

    #[test]
    fn positivity_flags_constructed_violation() {
        // A1 is always 1 whenever L1 is 1.
        let mut subjects = Vec::new();
        for i in 0..20 {
            let l1 = (i % 2) as u8;
            let a1 = if l1 == 1 { 1 } else { (i / 2 % 2) as u8 };
            subjects.push(subject(
                &i.to_string(),
                vec![],
                0,
                vec![(i / 4 % 2) as u8, a1],
                vec![l1],
                1,
            ));
        }
        let ds = LongitudinalDataset::new(1, vec![], subjects).unwrap();
        let report = validate_positivity(&ds);
        assert!(!report.ok());
        assert!(report
            .violations
            .iter()
            .all(|v| v.stage == 1 && v.stratum.contains("l1=1") && v.observed_arm == 1));
    }

    #[test]
    fn positivity_passes_on_balanced_data() {
        let mut subjects = Vec::new();
        let mut idx = 0;
        for l0 in 0..2u8 {
            for a0 in 0..2u8 {
                for l1 in 0..2u8 {
                    for a1 in 0..2u8 {
                        subjects.push(subject(
                            &idx.to_string(),
                            vec![],
                            l0,
                            vec![a0, a1],
                            vec![l1],
                            1,
                        ));
                        idx += 1;
                    }
                }
            }
        }
        let ds = LongitudinalDataset::new(1, vec![], subjects).unwrap();
        assert!(validate_positivity(&ds).ok());
    }
}
